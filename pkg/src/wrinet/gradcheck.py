"""Central finite-difference verification of every backward pass.

Each check builds a small float64 instance, computes analytic gradients, and
compares against (f(x+h) - f(x-h)) / 2h over every coordinate. The error
measure is |a - n| / max(|a|, |n|, 1e-6): central differences on a loss of
order 1 carry ~2e-11 of cancellation noise, so gradients below the 1e-6 floor
are compared at that absolute scale instead of a meaningless ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import layers
from .blocks import UnitSpec, build_standalone_unit
from .builder import NetworkConfig, StageConfig, build_network, execute
from .graph import NetworkGraph

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4

# Central differences are invalid when any ReLU input sits within the probe
# step of 0 (the +/- h evaluations straddle the kink). Graph-level checks
# redraw their instance, deterministically, until pre-activations clear this
# band.
KINK_MARGIN = 2e-4
MAX_REDRAWS = 64


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   scale_floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), scale_floor)
    rel = np.abs(a - n) / scale
    return float(rel.max()) if rel.size else 0.0


def fd_gradients(f: Callable[[], float], arrays: Iterable[np.ndarray],
                 step: float = DEFAULT_STEP) -> list[np.ndarray]:
    """Central differences of a scalar function over every array coordinate;
    arrays are perturbed in place and restored."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float = DEFAULT_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _projection(y0: np.ndarray, rng) -> np.ndarray:
    """Random projection scaled so the scalar objective sum(y * proj) is O(1)
    at the base point, keeping the finite-difference noise floor uniform."""
    p = rng.normal(size=y0.shape)
    return p / max(1.0, abs(float(np.sum(y0 * p))))


# ---------------------------------------------------------------------------
# Layer-level checks
# ---------------------------------------------------------------------------

def check_conv(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    p = layers.make_conv(3, 4, 3, stride=2, bias=True, dtype=np.float64)
    layers.msr_initialize(p, rng)
    y0, _ = layers.conv2d_forward(x, p)
    proj = _projection(y0, rng)

    def loss() -> float:
        y, _ = layers.conv2d_forward(x, p)
        return float(np.sum(y * proj))

    _, cache = layers.conv2d_forward(x, p)
    dx, dw, db = layers.conv2d_backward(proj, cache)
    nx, nw, nb = fd_gradients(loss, [x, p.weights, p.bias], step)
    return max(relative_error(dx, nx), relative_error(dw, nw), relative_error(db, nb))


def check_batch_norm(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 5, 5)) * 2.0 + 0.3
    p = layers.make_batch_norm(4, dtype=np.float64)
    p.gamma[...] = rng.normal(1.0, 0.2, size=4)
    p.beta[...] = rng.normal(0.0, 0.2, size=4)
    y0, _ = layers.batch_norm_forward(x, p, mode="train", update_stats=False)
    proj = _projection(y0, rng)

    def loss() -> float:
        y, _ = layers.batch_norm_forward(x, p, mode="train", update_stats=False)
        return float(np.sum(y * proj))

    _, cache = layers.batch_norm_forward(x, p, mode="train", update_stats=False)
    dx, dgamma, dbeta = layers.batch_norm_backward(proj, cache)
    nx, ngamma, nbeta = fd_gradients(loss, [x, p.gamma, p.beta], step)
    return max(relative_error(dx, nx), relative_error(dgamma, ngamma),
               relative_error(dbeta, nbeta))


def check_relu(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 6))
    x = np.where(np.abs(x) < 1e-3, 1e-3, x)  # keep clear of the kink
    y0, mask = layers.relu_forward(x)
    proj = _projection(y0, rng)

    def loss() -> float:
        y, _ = layers.relu_forward(x)
        return float(np.sum(y * proj))

    dx = layers.relu_backward(proj, mask)
    (nx,) = fd_gradients(loss, [x], step)
    return relative_error(dx, nx)


def check_global_avg_pool(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 4))
    y0, cache = layers.global_avg_pool_forward(x)
    proj = _projection(y0, rng)

    def loss() -> float:
        y, _ = layers.global_avg_pool_forward(x)
        return float(np.sum(y * proj))

    dx = layers.global_avg_pool_backward(proj, cache)
    (nx,) = fd_gradients(loss, [x], step)
    return relative_error(dx, nx)


def check_fully_connected(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 7))
    p = layers.make_fc(7, 4, dtype=np.float64)
    layers.msr_initialize(p, rng)
    p.bias[...] = rng.normal(size=4)
    y0, _ = layers.fully_connected_forward(x, p)
    proj = _projection(y0, rng)

    def loss() -> float:
        y, _ = layers.fully_connected_forward(x, p)
        return float(np.sum(y * proj))

    _, cache = layers.fully_connected_forward(x, p)
    dx, dw, db = layers.fully_connected_backward(proj, cache)
    nx, nw, nb = fd_gradients(loss, [x, p.weights, p.bias], step)
    return max(relative_error(dx, nx), relative_error(dw, nw), relative_error(db, nb))


def check_softmax_cross_entropy(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)

    def loss() -> float:
        value, _ = layers.softmax_cross_entropy(logits, labels)
        return value

    _, grad = layers.softmax_cross_entropy(logits, labels)
    (num,) = fd_gradients(loss, [logits], step)
    return relative_error(grad, num)


# ---------------------------------------------------------------------------
# Unit-level and network-level checks
# ---------------------------------------------------------------------------

UNIT_SPECS = {
    "unit-basic": UnitSpec("basic", 3, (4, 4), 2, 4),
    "unit-bottleneck": UnitSpec("bottleneck", 4, (2, 2, 4), 1, 4),
    "unit-inception": UnitSpec("inception", 4, (4, 3, 2, 4), 2, 5),
}


def _init_graph_params(g: NetworkGraph, rng: np.random.Generator) -> None:
    for name in g.order:
        node = g.nodes[name]
        if node.op == "conv":
            layers.msr_initialize(node.conv, rng)
        elif node.op == "bn":
            layers.msr_initialize(node.bn, rng)
            node.bn.gamma[...] = rng.normal(1.0, 0.1, size=node.bn.gamma.shape)
            node.bn.beta[...] = rng.normal(0.0, 0.1, size=node.bn.beta.shape)
        elif node.op == "fc":
            layers.msr_initialize(node.fc, rng)


def _min_relu_input(g: NetworkGraph, x: np.ndarray) -> float:
    result = g.forward(x, mode="train", update_stats=False)
    margin = np.inf
    for name in g.order:
        node = g.nodes[name]
        if node.op == "relu":
            z = result.outputs[node.inputs[0]]
            margin = min(margin, float(np.abs(z).min()))
    return margin


def check_unit(spec: UnitSpec, seed: int = 0, step: float = DEFAULT_STEP) -> float:
    g = None
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng((seed, attempt))
        g, out = build_standalone_unit(spec, dtype=np.float64)
        _init_graph_params(g, rng)
        x = rng.normal(size=(2, spec.in_channels, 8, 8))
        if _min_relu_input(g, x) >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free instance found for seed {seed}")
    first = g.forward(x, mode="train", update_stats=False)
    proj = _projection(first.outputs[out], rng)
    params = g.parameters()

    def loss() -> float:
        r = g.forward(x, mode="train", update_stats=False)
        return float(np.sum(r.outputs[out] * proj))

    result = g.forward(x, mode="train", update_stats=False, keep_caches=True)
    analytic, input_grad = g.backward(result, {out: proj})
    worst = 0.0
    numeric = fd_gradients(loss, list(params.values()) + [x], step)
    for (name, _), num in zip(params.items(), numeric[:-1]):
        worst = max(worst, relative_error(analytic[name], num))
    worst = max(worst, relative_error(input_grad, numeric[-1]))
    return worst


def miniature_config(num_classes: int = 4) -> NetworkConfig:
    stages = [
        StageConfig([UnitSpec("basic", 4, (4, 4), 1, 4)], 1),
        StageConfig([UnitSpec("inception", 4, (4, 3, 3, 4), 2, 4)], 2),
        StageConfig([UnitSpec("bottleneck", 4, (2, 2, 6), 2, 6)], 2),
    ]
    return NetworkConfig(name="miniature", input_shape=(3, 8, 8), conv1=(3, 4),
                         stages=stages, num_classes=num_classes)


def check_miniature_network(seed: int = 0, step: float = DEFAULT_STEP) -> float:
    g = None
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng((seed, attempt))
        g = build_network(miniature_config(), seed=seed + 7919 * attempt,
                          dtype=np.float64)
        x = rng.normal(size=(2, 3, 8, 8))
        if _min_relu_input(g, x) >= KINK_MARGIN:
            break
    else:
        raise RuntimeError(f"no kink-free instance found for seed {seed}")
    labels = rng.integers(0, 4, size=2)

    def loss() -> float:
        r = g.forward(x, mode="train", update_stats=False)
        value, _ = layers.softmax_cross_entropy(r.outputs[g.output_name], labels)
        return value

    result = g.forward(x, mode="train", update_stats=False, keep_caches=True)
    _, dlogits = layers.softmax_cross_entropy(result.outputs[g.output_name], labels)
    analytic, input_grad = g.backward(result, {g.output_name: dlogits})
    params = g.parameters()
    worst = 0.0
    numeric = fd_gradients(loss, list(params.values()) + [x], step)
    for (name, _), num in zip(params.items(), numeric[:-1]):
        worst = max(worst, relative_error(analytic[name], num))
    worst = max(worst, relative_error(input_grad, numeric[-1]))
    return worst


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

LAYER_CHECKS: dict[str, Callable[[int, float], float]] = {
    "conv2d": check_conv,
    "batch_norm": check_batch_norm,
    "relu": check_relu,
    "global_avg_pool": check_global_avg_pool,
    "fully_connected": check_fully_connected,
    "softmax_cross_entropy": check_softmax_cross_entropy,
}


def run_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE,
              step: float = DEFAULT_STEP, corrupt: bool = False) -> list[CheckResult]:
    """All layer, unit, and miniature-network checks for one seed. ``corrupt``
    injects a known error into one result, as a harness negative control."""
    results = []
    for name, fn in LAYER_CHECKS.items():
        results.append(CheckResult(name, fn(seed, step), tolerance))
    for name, spec in UNIT_SPECS.items():
        results.append(CheckResult(name, check_unit(spec, seed, step), tolerance))
    results.append(CheckResult("miniature-network",
                               check_miniature_network(seed, step), tolerance))
    if corrupt:
        bad = results[0]
        results[0] = CheckResult(bad.name, bad.max_rel_err + 1.0, tolerance)
    return results
