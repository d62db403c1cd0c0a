"""Detection head: 3x3 class/offset predictors on two backbone feature maps.

The head taps the classifier backbone at the ends of its last two stages,
runs one classification conv and one localization conv per map, and flattens
predictions in (map, row, col, prior) order so they align with
:func:`wrinet.detection.generate_priors`. Gradients flow through the head
convolutions back into the backbone, which supports transfer learning with
frozen early stages at toy scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .detection import PriorLayout, evenly_spaced_layout, generate_priors, multibox_loss
from .graph import NetworkGraph
from .layers import ConvParams, make_conv, msr_initialize
from .tensor import DEFAULT_DTYPE


@dataclass
class DetectionHead:
    taps: tuple[str, ...]
    cls_convs: list[ConvParams]
    loc_convs: list[ConvParams]
    layout: PriorLayout
    priors: np.ndarray  # (P, 4) normalized
    num_classes: int  # foreground classes; logits carry background at index 0

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (c, l) in enumerate(zip(self.cls_convs, self.loc_convs)):
            out[f"head/map{i}/cls/weight"] = c.weights
            out[f"head/map{i}/cls/bias"] = c.bias
            out[f"head/map{i}/loc/weight"] = l.weights
            out[f"head/map{i}/loc/bias"] = l.bias
        return out


def build_detection_head(backbone: NetworkGraph, taps: tuple[str, ...],
                         input_hw: tuple[int, int], num_classes: int,
                         aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5),
                         s_min: float = 0.2, s_max: float = 0.9,
                         seed: int = 0, dtype=DEFAULT_DTYPE) -> DetectionHead:
    shapes = backbone.infer_shapes(input_hw)
    grids = [shapes[t][1:] for t in taps]
    layout = evenly_spaced_layout(grids, s_min=s_min, s_max=s_max,
                                  aspect_ratios=aspect_ratios)
    rng = np.random.default_rng(seed)
    cls_convs, loc_convs = [], []
    for i, tap in enumerate(taps):
        channels = shapes[tap][0]
        per_cell = layout.priors_per_cell(i)
        cls = make_conv(channels, per_cell * (num_classes + 1), 3, bias=True, dtype=dtype)
        loc = make_conv(channels, per_cell * 4, 3, bias=True, dtype=dtype)
        msr_initialize(cls, rng)
        msr_initialize(loc, rng)
        cls_convs.append(cls)
        loc_convs.append(loc)
    return DetectionHead(taps=tuple(taps), cls_convs=cls_convs, loc_convs=loc_convs,
                         layout=layout, priors=generate_priors(layout),
                         num_classes=num_classes)


def _flatten_predictions(y: np.ndarray, per_cell: int, fields: int) -> np.ndarray:
    """(N, per_cell*fields, H, W) -> (N, H*W*per_cell, fields)."""
    n, _, h, w = y.shape
    return (y.reshape(n, per_cell, fields, h, w)
            .transpose(0, 3, 4, 1, 2)
            .reshape(n, h * w * per_cell, fields))


def _unflatten_gradient(g: np.ndarray, per_cell: int, fields: int,
                        h: int, w: int) -> np.ndarray:
    n = g.shape[0]
    return (g.reshape(n, h, w, per_cell, fields)
            .transpose(0, 3, 4, 1, 2)
            .reshape(n, per_cell * fields, h, w))


def detection_forward(backbone: NetworkGraph, head: DetectionHead, x: np.ndarray,
                      mode: str = "train") -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns per-prior class logits (N, P, C) and offsets (N, P, 4)."""
    result = backbone.forward(x, mode=mode, keep_caches=(mode == "train"))
    logits_parts, offset_parts, conv_caches = [], [], []
    for i, tap in enumerate(head.taps):
        feat = result.outputs[tap]
        per_cell = head.layout.priors_per_cell(i)
        cls_y, cls_cache = layers.conv2d_forward(feat, head.cls_convs[i])
        loc_y, loc_cache = layers.conv2d_forward(feat, head.loc_convs[i])
        logits_parts.append(_flatten_predictions(cls_y, per_cell, head.num_classes + 1))
        offset_parts.append(_flatten_predictions(loc_y, per_cell, 4))
        conv_caches.append((cls_cache, loc_cache, feat.shape))
    logits = np.concatenate(logits_parts, axis=1)
    offsets = np.concatenate(offset_parts, axis=1)
    caches = {"backbone": result, "convs": conv_caches}
    return logits, offsets, caches


def detection_backward(backbone: NetworkGraph, head: DetectionHead, caches: dict,
                       grad_logits: np.ndarray, grad_offsets: np.ndarray
                       ) -> dict[str, np.ndarray]:
    """Map per-prior gradients back through the predictor convs and the
    backbone; returns a merged parameter-gradient dict (head + backbone)."""
    grads: dict[str, np.ndarray] = {}
    tap_grads: dict[str, np.ndarray] = {}
    offset = 0
    for i, tap in enumerate(head.taps):
        cls_cache, loc_cache, feat_shape = caches["convs"][i]
        _, _, h, w = feat_shape
        per_cell = head.layout.priors_per_cell(i)
        count = h * w * per_cell
        g_cls = _unflatten_gradient(grad_logits[:, offset:offset + count],
                                    per_cell, head.num_classes + 1, h, w)
        g_loc = _unflatten_gradient(grad_offsets[:, offset:offset + count],
                                    per_cell, 4, h, w)
        offset += count
        dx_cls, dw_cls, db_cls = layers.conv2d_backward(g_cls, cls_cache)
        dx_loc, dw_loc, db_loc = layers.conv2d_backward(g_loc, loc_cache)
        grads[f"head/map{i}/cls/weight"] = dw_cls
        grads[f"head/map{i}/cls/bias"] = db_cls
        grads[f"head/map{i}/loc/weight"] = dw_loc
        grads[f"head/map{i}/loc/bias"] = db_loc
        tap_grads[tap] = dx_cls + dx_loc if tap not in tap_grads else (
            tap_grads[tap] + dx_cls + dx_loc)
    backbone_grads, _ = backbone.backward(caches["backbone"], tap_grads)
    grads.update(backbone_grads)
    return grads


def detection_loss_batch(logits: np.ndarray, offsets: np.ndarray,
                         priors: np.ndarray, gt_boxes: list[np.ndarray],
                         gt_labels: list[np.ndarray], iou_threshold: float = 0.5,
                         negpos_ratio: int = 3
                         ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean multibox loss over a batch with per-image matching and encoding."""
    from .detection import encode_boxes, match_priors

    n = logits.shape[0]
    grad_logits = np.zeros_like(logits)
    grad_offsets = np.zeros_like(offsets)
    total = 0.0
    for b in range(n):
        assignment = match_priors(priors, gt_boxes[b], iou_threshold)
        targets = np.zeros_like(offsets[b])
        pos = assignment >= 0
        if pos.any():
            targets[pos] = encode_boxes(gt_boxes[b][assignment[pos]], priors[pos])
        loss, gl, go = multibox_loss(logits[b], offsets[b], assignment,
                                     gt_labels[b], targets, negpos_ratio)
        total += loss
        grad_logits[b] = gl / n
        grad_offsets[b] = go / n
    return total / n, grad_logits, grad_offsets
