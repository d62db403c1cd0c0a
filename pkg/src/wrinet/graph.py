"""Directed acyclic network graphs with deterministic evaluation order.

A :class:`NetworkGraph` is a list of named layer nodes in construction
(topological) order. Forward evaluation walks that order; backward walks it in
reverse, accumulating gradients. Parameters live in a registry keyed by
hierarchical names (``stage1/unit0/conv1/weight``) so optimizers, freeze masks,
and checkpoints all address the same namespace.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import layers, tensor
from .layers import BatchNormParams, ConvParams, FCParams
from .tensor import ShapeError

CHECKPOINT_MAGIC = b"WRIN"
CHECKPOINT_VERSION = 1


class NodeNonFiniteError(tensor.NonFiniteError):
    """NaN/Inf surfaced during evaluation; names the first offending node."""

    def __init__(self, node: str):
        super().__init__(f"non-finite values first appear at node {node!r}")
        self.node = node


@dataclass
class Node:
    name: str
    op: str  # input|conv|bn|relu|add|concat|gap|fc
    inputs: list[str]
    conv: Optional[ConvParams] = None
    bn: Optional[BatchNormParams] = None
    fc: Optional[FCParams] = None
    channels: int = 0  # output channels (D_out for fc)


@dataclass
class ForwardResult:
    outputs: dict[str, np.ndarray]
    caches: dict[str, tuple]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.outputs[name]


class NetworkGraph:
    """Layer DAG plus parameter registry. Construction is single-threaded;
    a built graph is evaluated without mutation (batch-norm running statistics
    are the one exception, updated only in train mode)."""

    def __init__(self, input_channels: int, name: str = "net"):
        self.name = name
        self.nodes: dict[str, Node] = {}
        self.order: list[str] = []
        self.input_name = "input"
        self._add(Node(self.input_name, "input", [], channels=input_channels))
        self.output_name = self.input_name

    # -- construction ------------------------------------------------------

    def _add(self, node: Node) -> str:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node name {node.name!r}")
        for inp in node.inputs:
            if inp not in self.nodes:
                raise ValueError(f"node {node.name!r} references unknown input {inp!r}")
        self.nodes[node.name] = node
        self.order.append(node.name)
        self.output_name = node.name
        return node.name

    def add_conv(self, name: str, inp: str, params: ConvParams) -> str:
        have = self.nodes[inp].channels
        if params.in_channels != have:
            raise ShapeError(
                f"conv {name!r} expects {params.in_channels} input channels, "
                f"node {inp!r} provides {have}")
        return self._add(Node(name, "conv", [inp], conv=params,
                              channels=params.out_channels))

    def add_bn(self, name: str, inp: str, params: BatchNormParams) -> str:
        have = self.nodes[inp].channels
        if params.gamma.shape[0] != have:
            raise ShapeError(
                f"batch norm {name!r} sized for {params.gamma.shape[0]} channels, "
                f"node {inp!r} provides {have}")
        return self._add(Node(name, "bn", [inp], bn=params, channels=have))

    def add_relu(self, name: str, inp: str) -> str:
        return self._add(Node(name, "relu", [inp], channels=self.nodes[inp].channels))

    def add_add(self, name: str, a: str, b: str) -> str:
        ca, cb = self.nodes[a].channels, self.nodes[b].channels
        if ca != cb:
            raise ShapeError(f"add {name!r}: channel mismatch {ca} vs {cb}")
        return self._add(Node(name, "add", [a, b], channels=ca))

    def add_concat(self, name: str, inputs: list[str]) -> str:
        channels = sum(self.nodes[i].channels for i in inputs)
        return self._add(Node(name, "concat", list(inputs), channels=channels))

    def add_global_avg_pool(self, name: str, inp: str) -> str:
        return self._add(Node(name, "gap", [inp], channels=self.nodes[inp].channels))

    def add_fc(self, name: str, inp: str, params: FCParams) -> str:
        return self._add(Node(name, "fc", [inp], fc=params,
                              channels=params.weights.shape[0]))

    # -- parameter registry --------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Learnable arrays in construction order, hierarchically named."""
        out: dict[str, np.ndarray] = {}
        for name in self.order:
            node = self.nodes[name]
            if node.op == "conv":
                out[f"{name}/weight"] = node.conv.weights
                if node.conv.bias is not None:
                    out[f"{name}/bias"] = node.conv.bias
            elif node.op == "bn":
                out[f"{name}/gamma"] = node.bn.gamma
                out[f"{name}/beta"] = node.bn.beta
            elif node.op == "fc":
                out[f"{name}/weight"] = node.fc.weights
                out[f"{name}/bias"] = node.fc.bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-learnable state (batch-norm running statistics)."""
        out: dict[str, np.ndarray] = {}
        for name in self.order:
            node = self.nodes[name]
            if node.op == "bn":
                out[f"{name}/running_mean"] = node.bn.running_mean
                out[f"{name}/running_var"] = node.bn.running_var
        return out

    def state_entries(self) -> dict[str, np.ndarray]:
        entries = self.parameters()
        entries.update(self.buffers())
        return entries

    # -- evaluation ----------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "infer", update_stats: bool = True,
                keep_caches: bool = False, check_finite: bool = False) -> ForwardResult:
        """Evaluate all nodes in topological order. ``check_finite`` validates
        every node output and raises :class:`NodeNonFiniteError` at the first
        offender (the diagnostic mode the trainer uses after a bad loss)."""
        x = tensor.require_nchw(x, "network input")
        if x.shape[1] != self.nodes[self.input_name].channels:
            raise ShapeError(
                f"input has {x.shape[1]} channels, graph expects "
                f"{self.nodes[self.input_name].channels}")
        outputs: dict[str, np.ndarray] = {self.input_name: x}
        caches: dict[str, tuple] = {}
        for name in self.order[1:]:
            node = self.nodes[name]
            ins = [outputs[i] for i in node.inputs]
            try:
                if node.op == "conv":
                    y, cache = layers.conv2d_forward(ins[0], node.conv,
                                                     keep_cols=keep_caches)
                elif node.op == "bn":
                    y, cache = layers.batch_norm_forward(
                        ins[0], node.bn, mode=("train" if mode == "train" else "infer"),
                        update_stats=update_stats)
                elif node.op == "relu":
                    y, cache = layers.relu_forward(ins[0])
                elif node.op == "add":
                    y, cache = tensor.add_elementwise(ins[0], ins[1]), None
                elif node.op == "concat":
                    y = tensor.concat_channels(ins)
                    cache = tuple(a.shape[1] for a in ins)
                elif node.op == "gap":
                    y, cache = layers.global_avg_pool_forward(ins[0])
                elif node.op == "fc":
                    flat = ins[0].reshape(ins[0].shape[0], -1)
                    y, cache = layers.fully_connected_forward(flat, node.fc)
                    cache = (cache, ins[0].shape)
                else:  # pragma: no cover
                    raise ValueError(f"unknown op {node.op!r}")
            except tensor.NonFiniteError as exc:
                raise NodeNonFiniteError(name) from exc
            if check_finite and not np.all(np.isfinite(y)):
                raise NodeNonFiniteError(name)
            outputs[name] = y
            if keep_caches:
                caches[name] = cache
        return ForwardResult(outputs=outputs, caches=caches)

    def backward(self, result: ForwardResult, out_grads: dict[str, np.ndarray]
                 ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backpropagate from injected output gradients.

        ``out_grads`` maps node names to gradients of the scalar objective with
        respect to those nodes' outputs. Returns (parameter gradients, input
        gradient). Gradients are accumulated without mutating shared arrays.
        """
        acc: dict[str, np.ndarray] = {}

        def contribute(name: str, g: np.ndarray) -> None:
            if name in acc:
                acc[name] = acc[name] + g
            else:
                acc[name] = g

        for name, g in out_grads.items():
            if name not in self.nodes:
                raise ValueError(f"unknown node {name!r} in out_grads")
            contribute(name, g)

        param_grads: dict[str, np.ndarray] = {}
        for name in reversed(self.order[1:]):
            if name not in acc:
                continue
            g = acc.pop(name)
            node = self.nodes[name]
            cache = result.caches[name]
            if node.op == "conv":
                dx, dw, db = layers.conv2d_backward(g, cache)
                param_grads[f"{name}/weight"] = dw
                if db is not None:
                    param_grads[f"{name}/bias"] = db
                contribute(node.inputs[0], dx)
            elif node.op == "bn":
                dx, dgamma, dbeta = layers.batch_norm_backward(g, cache)
                param_grads[f"{name}/gamma"] = dgamma
                param_grads[f"{name}/beta"] = dbeta
                contribute(node.inputs[0], dx)
            elif node.op == "relu":
                contribute(node.inputs[0], layers.relu_backward(g, cache))
            elif node.op == "add":
                contribute(node.inputs[0], g)
                contribute(node.inputs[1], g)
            elif node.op == "concat":
                sizes = cache
                offsets = np.cumsum((0,) + sizes)
                for inp, lo, hi in zip(node.inputs, offsets[:-1], offsets[1:]):
                    contribute(inp, g[:, lo:hi])
            elif node.op == "gap":
                contribute(node.inputs[0], layers.global_avg_pool_backward(g, cache))
            elif node.op == "fc":
                fc_cache, in_shape = cache
                dx, dw, db = layers.fully_connected_backward(g, fc_cache)
                param_grads[f"{name}/weight"] = dw
                param_grads[f"{name}/bias"] = db
                contribute(node.inputs[0], dx.reshape(in_shape))
        input_grad = acc.get(self.input_name)
        return param_grads, input_grad

    # -- static shape inference ----------------------------------------------

    def infer_shapes(self, input_hw: tuple[int, int]) -> dict[str, tuple[int, int, int]]:
        """Per-node output shape (C, H, W) for a single sample; fc yields (D, 1, 1)."""
        shapes: dict[str, tuple[int, int, int]] = {
            self.input_name: (self.nodes[self.input_name].channels, *input_hw)
        }
        for name in self.order[1:]:
            node = self.nodes[name]
            first = shapes[node.inputs[0]]
            if node.op == "conv":
                p = node.conv
                kh, kw = p.kernel
                h = layers.conv_output_size(first[1], kh, p.stride, p.padding)
                w = layers.conv_output_size(first[2], kw, p.stride, p.padding)
                if h < 1 or w < 1:
                    raise ShapeError(f"node {name!r} output collapses to {h}x{w}")
                shapes[name] = (p.out_channels, h, w)
            elif node.op in ("bn", "relu"):
                shapes[name] = first
            elif node.op == "add":
                second = shapes[node.inputs[1]]
                if first != second:
                    raise ShapeError(f"add {name!r}: {first} vs {second}")
                shapes[name] = first
            elif node.op == "concat":
                hw = first[1:]
                for inp in node.inputs[1:]:
                    if shapes[inp][1:] != hw:
                        raise ShapeError(f"concat {name!r}: spatial mismatch")
                shapes[name] = (node.channels, *hw)
            elif node.op == "gap":
                shapes[name] = (first[0], 1, 1)
            elif node.op == "fc":
                shapes[name] = (node.fc.weights.shape[0], 1, 1)
        return shapes

    # -- receptive fields ------------------------------------------------------

    def receptive_field_map(self, input_hw: tuple[int, int]
                            ) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        """Receptive field extent and effective stride per node.

        Computed by the recurrence rf' = rf + (k - 1) * stride_product along
        each path; at add/concat joins the per-branch extents are recorded and
        the maximum becomes the node's extent. Global average pooling behaves
        like a kernel covering the whole incoming map.

        Returns name -> (rf, stride_product, per-branch rf tuple).
        """
        shapes = self.infer_shapes(input_hw)
        rf: dict[str, int] = {self.input_name: 1}
        sp: dict[str, int] = {self.input_name: 1}
        branches: dict[str, tuple[int, ...]] = {self.input_name: (1,)}
        for name in self.order[1:]:
            node = self.nodes[name]
            ins = node.inputs
            if node.op == "conv":
                k = node.conv.kernel[0]
                rf[name] = rf[ins[0]] + (k - 1) * sp[ins[0]]
                sp[name] = sp[ins[0]] * node.conv.stride
                branches[name] = (rf[name],)
            elif node.op in ("bn", "relu"):
                rf[name], sp[name] = rf[ins[0]], sp[ins[0]]
                branches[name] = (rf[name],)
            elif node.op in ("add", "concat"):
                per = tuple(rf[i] for i in ins)
                strides = {sp[i] for i in ins}
                if len(strides) != 1:
                    raise ShapeError(f"join {name!r} merges paths of unequal stride")
                rf[name] = max(per)
                sp[name] = strides.pop()
                branches[name] = per
            elif node.op == "gap":
                h_in = shapes[ins[0]][1]
                rf[name] = rf[ins[0]] + (h_in - 1) * sp[ins[0]]
                sp[name] = sp[ins[0]] * h_in
                branches[name] = (rf[name],)
            elif node.op == "fc":
                rf[name], sp[name] = rf[ins[0]], sp[ins[0]]
                branches[name] = (rf[name],)
        return {n: (rf[n], sp[n], branches[n]) for n in self.order}


# ---------------------------------------------------------------------------
# Checkpoint format: magic "WRIN", version byte, then per entry
#   uint32 LE name length | UTF-8 name | rank byte | uint32 LE dims |
#   float32 LE values
# and a trailing uint64 LE entry count. Batch-norm running statistics are
# stored alongside learnable parameters so a reload reproduces inference
# bit for bit.
# ---------------------------------------------------------------------------

def save_checkpoint(graph: NetworkGraph, path: str) -> None:
    chunks = [CHECKPOINT_MAGIC, bytes([CHECKPOINT_VERSION])]
    entries = graph.state_entries()
    for name, array in entries.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(bytes([array.ndim]))
        for dim in array.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    chunks.append(struct.pack("<Q", len(entries)))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(graph: NetworkGraph, path: str) -> None:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    if blob[4] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob[4]}")
    declared = struct.unpack("<Q", blob[-8:])[0]
    entries = graph.state_entries()
    pos = 5
    loaded: set[str] = set()
    end = len(blob) - 8
    while pos < end:
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rank = blob[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        if name not in entries:
            raise ValueError(f"{path}: unknown entry {name!r} for graph {graph.name!r}")
        target = entries[name]
        if tuple(dims) != target.shape:
            raise ValueError(
                f"{path}: entry {name!r} has shape {tuple(dims)}, expected {target.shape}")
        target[...] = values.astype(target.dtype)
        loaded.add(name)
    if len(loaded) != declared:
        raise ValueError(
            f"{path}: trailing count says {declared} entries, found {len(loaded)}")
    if len(loaded) != len(entries):
        missing = sorted(set(entries) - loaded)
        raise ValueError(f"{path}: checkpoint is missing entries {missing[:5]}")
