"""Whole-network assembly from declarative stage configurations.

A network is: 3x3 stem convolution, a sequence of stages (each a run of
residual units whose first unit may downsample), a final BN -> ReLU, global
average pooling, and a fully connected classifier. The four built-in
configurations cover the 16-layer wide nets (widths 64/128/256), their
inception variants, and the 164-layer bottleneck baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers
from .blocks import UnitSpec, make_unit
from .graph import NetworkGraph
from .layers import make_batch_norm, make_conv, make_fc, msr_initialize
from .tensor import DEFAULT_DTYPE, ShapeError

BUILTIN_NAMES = ("wrn-16-4", "wr-inception", "wr-inception-l2", "preact-resnet-164")


@dataclass
class StageConfig:
    units: list[UnitSpec]
    stage_stride: int = 1

    def __post_init__(self):
        if not self.units:
            raise ValueError("stage needs at least one unit")
        if self.units[0].stride != self.stage_stride:
            raise ValueError(
                f"first unit stride {self.units[0].stride} must match "
                f"stage_stride {self.stage_stride}")
        for i, u in enumerate(self.units[1:], start=1):
            if u.stride != 1:
                raise ValueError(f"unit {i} must have stride 1 inside a stage")


@dataclass
class NetworkConfig:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    conv1: tuple[int, int]  # (kernel, out_channels)
    stages: list[StageConfig]
    num_classes: int

    def validate_chaining(self) -> None:
        channels = self.conv1[1]
        for idx, stage in enumerate(self.stages):
            for unit in stage.units:
                if unit.in_channels != channels:
                    raise ShapeError(
                        f"stage {idx}: unit expects {unit.in_channels} input "
                        f"channels but receives {channels}")
                channels = unit.out_channels

    # -- JSON round trip -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "conv1": {"kernel": self.conv1[0], "out_channels": self.conv1[1]},
            "num_classes": self.num_classes,
            "stages": [
                {
                    "stage_stride": s.stage_stride,
                    "units": [
                        {
                            "variant": u.variant,
                            "in_channels": u.in_channels,
                            "widths": list(u.widths),
                            "stride": u.stride,
                            "out_channels": u.out_channels,
                        }
                        for u in s.units
                    ],
                }
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        stages = [
            StageConfig(
                units=[UnitSpec(**u) for u in s["units"]],
                stage_stride=s["stage_stride"],
            )
            for s in d["stages"]
        ]
        cfg = cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            conv1=(d["conv1"]["kernel"], d["conv1"]["out_channels"]),
            stages=stages,
            num_classes=d["num_classes"],
        )
        cfg.validate_chaining()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls.from_dict(json.loads(text))


def _basic(cin: int, w: int, stride: int = 1) -> UnitSpec:
    return UnitSpec("basic", cin, (w, w), stride, w)


def _bottleneck(cin: int, internal: int, w: int, stride: int = 1) -> UnitSpec:
    return UnitSpec("bottleneck", cin, (internal, internal, w), stride, w)


def builtin_config(name: str, num_classes: int = 10,
                   input_shape: tuple[int, int, int] = (3, 32, 32)) -> NetworkConfig:
    """Canonical configurations of the built-in network family."""
    if name == "wrn-16-4":
        stages = [
            StageConfig([_basic(16, 64), _basic(64, 64)], 1),
            StageConfig([_basic(64, 128, 2), _basic(128, 128)], 2),
            StageConfig([_basic(128, 256, 2), _basic(256, 256)], 2),
        ]
        conv1 = (3, 16)
    elif name == "wr-inception":
        stages = [
            StageConfig([_basic(16, 64), _basic(64, 64)], 1),
            StageConfig(
                [_basic(64, 128, 2),
                 UnitSpec("inception", 128, (128, 64, 64, 128), 1, 128)], 2),
            StageConfig([_basic(128, 256, 2), _basic(256, 256)], 2),
        ]
        conv1 = (3, 16)
    elif name == "wr-inception-l2":
        stages = [
            StageConfig([_basic(64, 64), _basic(64, 64)], 1),
            StageConfig(
                [_basic(64, 256, 2),
                 UnitSpec("inception", 256, (256, 256, 128, 256), 1, 256)], 2),
            StageConfig([_basic(256, 256, 2), _basic(256, 256)], 2),
        ]
        conv1 = (3, 64)
    elif name == "preact-resnet-164":
        # 18 bottleneck units per stage; internal widths follow the 164-layer
        # pre-activation baseline (16/32/64 inside 64/128/256).
        def stage(cin: int, internal: int, w: int, stride: int) -> StageConfig:
            units = [_bottleneck(cin, internal, w, stride)]
            units += [_bottleneck(w, internal, w) for _ in range(17)]
            return StageConfig(units, stride)

        stages = [stage(16, 16, 64, 1), stage(64, 32, 128, 2), stage(128, 64, 256, 2)]
        conv1 = (3, 16)
    else:
        raise KeyError(f"unknown network name {name!r}; known: {', '.join(BUILTIN_NAMES)}")
    cfg = NetworkConfig(name=name, input_shape=input_shape, conv1=conv1,
                        stages=stages, num_classes=num_classes)
    cfg.validate_chaining()
    return cfg


def build_network(config: NetworkConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> NetworkGraph:
    """Materialize a graph with MSR-initialized parameters, deterministically
    for a given (config, seed)."""
    config.validate_chaining()
    g = NetworkGraph(config.input_shape[0], name=config.name)
    kernel, stem_out = config.conv1
    x = g.add_conv("conv1", g.input_name,
                   make_conv(config.input_shape[0], stem_out, kernel, dtype=dtype))
    for s_idx, stage in enumerate(config.stages, start=1):
        for u_idx, unit in enumerate(stage.units):
            x = make_unit(g, x, unit, f"stage{s_idx}/unit{u_idx}", dtype=dtype)
    final_c = config.stages[-1].units[-1].out_channels
    x = g.add_bn("head/bn", x, make_batch_norm(final_c, dtype=dtype))
    x = g.add_relu("head/relu", x)
    x = g.add_global_avg_pool("head/gap", x)
    g.add_fc("head/fc", x, make_fc(final_c, config.num_classes, dtype=dtype))

    rng = np.random.default_rng(seed)
    for name in g.order:
        node = g.nodes[name]
        if node.op == "conv":
            msr_initialize(node.conv, rng)
        elif node.op == "bn":
            msr_initialize(node.bn, rng)
        elif node.op == "fc":
            msr_initialize(node.fc, rng)
    return g


@dataclass
class ExecutionResult:
    logits: np.ndarray
    loss: Optional[float] = None
    grads: Optional[dict[str, np.ndarray]] = None


def execute(graph: NetworkGraph, x: np.ndarray, mode: str = "infer",
            labels: Optional[np.ndarray] = None,
            freeze: tuple[str, ...] = ()) -> ExecutionResult:
    """Run the classifier graph. Train mode with labels returns loss and
    gradients for every non-frozen parameter; infer mode uses running
    batch-norm statistics and computes no gradients."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and labels is None:
        raise ValueError("train mode requires labels")
    want_grads = mode == "train"
    result = graph.forward(x, mode=mode, keep_caches=want_grads)
    logits = result[graph.output_name]
    if labels is None:
        return ExecutionResult(logits=logits)
    loss, dlogits = layers.softmax_cross_entropy(logits, labels)
    if not want_grads:
        return ExecutionResult(logits=logits, loss=loss)
    grads, _ = graph.backward(result, {graph.output_name: dlogits})
    if freeze:
        grads = {k: v for k, v in grads.items()
                 if not any(k.startswith(p) for p in freeze)}
    return ExecutionResult(logits=logits, loss=loss, grads=grads)
