"""Prediction heads, label assignment, and the tracking losses.

Two independent 3-layer MLPs with ReLU run per search token: one emits a
single foreground logit, the other four sigmoid-squashed regression values
(cell-relative center offset and normalized width/height). Tokens whose
cell center falls inside the ground-truth box are positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .tensor import (
    ShapeError, Tensor, bce_with_logits, linear, maximum, minimum, narrow,
    relu, reshape, select_rows, sigmoid, trunc_normal,
)

__all__ = [
    "BoundingBox", "HeadParams", "PredictionMaps", "LabelAssignment",
    "build_head_params", "mlp_head", "assign_labels", "cls_loss", "iou",
    "giou", "reg_loss", "total_loss", "grid_centers",
]


@dataclass
class BoundingBox:
    """Axis-aligned box as center + size. Units are contextual: normalized
    [0, 1] for prediction maps and labels, pixels for frame-space boxes."""

    cx: float
    cy: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BoundingBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def to_xywh(self) -> tuple[float, float, float, float]:
        """Top-left corner + size (the on-disk ground-truth convention)."""
        return (self.x0, self.y0, self.w, self.h)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(x + w / 2.0, y + h / 2.0, w, h)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU - (enclosing - union) / enclosing, in [-1, 1]."""
    ew = max(a.x1, b.x1) - min(a.x0, b.x0)
    eh = max(a.y1, b.y1) - min(a.y0, b.y0)
    enclosing = ew * eh
    if enclosing <= 0.0:
        raise ValueError("giou undefined: enclosing box has zero area")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    return inter / union - (enclosing - union) / enclosing if union > 0.0 \
        else -(enclosing - union) / enclosing


@dataclass
class HeadParams:
    """Weights of the two per-token MLPs (w1/w2 hidden layers + output)."""

    cls_w1: Tensor
    cls_b1: Tensor
    cls_w2: Tensor
    cls_b2: Tensor
    cls_w3: Tensor
    cls_b3: Tensor
    reg_w1: Tensor
    reg_b1: Tensor
    reg_w2: Tensor
    reg_b2: Tensor
    reg_w3: Tensor
    reg_b3: Tensor


def build_head_params(register, in_dim: int, hidden: int, prefix: str = "head",
                      rng: np.random.Generator | None = None,
                      init_std: float | None = 0.02) -> HeadParams:
    """Create head weights through a `register(name, array)` callback so the
    owner controls Parameter bookkeeping. init_std=None scales each layer
    by 1/sqrt(fan_in)."""
    rng = rng or np.random.default_rng(0)
    tensors = []
    for branch, out in (("cls", 1), ("reg", 4)):
        dims = [(in_dim, hidden), (hidden, hidden), (hidden, out)]
        for li, (di, do) in enumerate(dims, start=1):
            std = init_std if init_std is not None else di ** -0.5
            tensors.append(register(f"{prefix}.{branch}.w{li}",
                                    trunc_normal(rng, (di, do), std)))
            tensors.append(register(f"{prefix}.{branch}.b{li}", np.zeros(do)))
    return HeadParams(*tensors)


@dataclass
class PredictionMaps:
    """Per-token predictions on the output grid: cls logits (G, G) and
    sigmoid regression values (G, G, 4) as (dx, dy, w, h)."""

    cls: Tensor
    reg: Tensor

    @property
    def grid(self) -> int:
        return self.cls.data.shape[0]


def _head_mlp(x: Tensor, w1, b1, w2, b2, w3, b3) -> Tensor:
    h = relu(linear(x, w1, b1))
    h = relu(linear(h, w2, b2))
    return linear(h, w3, b3)


def mlp_head(f_out: Tensor, head: HeadParams) -> PredictionMaps:
    """Apply both MLPs tokenwise; f_out is (T, D) with T a square count."""
    if f_out.data.ndim != 2:
        raise ShapeError(f"mlp_head expects (tokens, dim), got {f_out.data.shape}")
    T = f_out.data.shape[0]
    if f_out.data.shape[1] != head.cls_w1.data.shape[0]:
        raise ShapeError(
            f"feature width {f_out.data.shape[1]} does not match head input {head.cls_w1.data.shape[0]}")
    grid = math.isqrt(T)
    if grid * grid != T:
        raise ShapeError(f"token count {T} is not a square grid")
    logits = _head_mlp(f_out, head.cls_w1, head.cls_b1, head.cls_w2, head.cls_b2,
                       head.cls_w3, head.cls_b3)
    regs = sigmoid(_head_mlp(f_out, head.reg_w1, head.reg_b1, head.reg_w2,
                             head.reg_b2, head.reg_w3, head.reg_b3))
    return PredictionMaps(reshape(logits, (grid, grid)), reshape(regs, (grid, grid, 4)))


class LabelAssignment(NamedTuple):
    mask: np.ndarray      # (G, G) bool, True where the token is positive
    degenerate: bool      # gt had non-positive width/height


def grid_centers(grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized cell-center coordinates, flattened row-major: (xs, ys)."""
    c = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return xs.reshape(-1), ys.reshape(-1)


def assign_labels(gt: BoundingBox, grid: int) -> LabelAssignment:
    """A token is positive iff its cell center lies inside the gt box.

    Interval membership is half-open ([x0, x1) per axis) so a box edge
    sitting exactly on a cell center claims the cell on the low side only.
    """
    if gt.w <= 0.0 or gt.h <= 0.0:
        return LabelAssignment(np.zeros((grid, grid), dtype=bool), True)
    xs, ys = grid_centers(grid)
    inside = (xs >= gt.x0) & (xs < gt.x1) & (ys >= gt.y0) & (ys < gt.y1)
    return LabelAssignment(inside.reshape(grid, grid), False)


def cls_loss(logits: Tensor, mask: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Binary cross entropy over all tokens. pos_weight != 1 switches to a
    weighted mean where positive tokens count pos_weight times."""
    if logits.data.shape != mask.shape:
        raise ShapeError(f"logits {logits.data.shape} and mask {mask.shape} disagree")
    targets = mask.astype(np.float64)
    per = bce_with_logits(logits, targets)
    if pos_weight == 1.0:
        return per.mean()
    weights = np.where(mask, float(pos_weight), 1.0)
    return (per * Tensor(weights)).sum() / float(weights.sum())


def _decode_positives(reg: Tensor, idx: np.ndarray, grid: int):
    """Differentiable decode of the selected tokens' boxes (normalized)."""
    rows = select_rows(reshape(reg, (grid * grid, 4)), idx)
    n = idx.size

    def col(j: int) -> Tensor:
        return reshape(narrow(rows, 1, j, 1), (n,))

    xs, ys = grid_centers(grid)
    cx = (col(0) - 0.5) * (1.0 / grid) + Tensor(xs[idx])
    cy = (col(1) - 0.5) * (1.0 / grid) + Tensor(ys[idx])
    return cx, cy, col(2), col(3)


def _giou_terms(cx, cy, w, h, gt: BoundingBox):
    """Vectorized GIoU of decoded boxes against one gt box (tensor ops)."""
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5
    iw = relu(minimum(px1, gt.x1) - maximum(px0, gt.x0))
    ih = relu(minimum(py1, gt.y1) - maximum(py0, gt.y0))
    inter = iw * ih
    union = w * h + gt.area() - inter
    ew = maximum(px1, gt.x1) - minimum(px0, gt.x0)
    eh = maximum(py1, gt.y1) - minimum(py0, gt.y0)
    enclosing = ew * eh
    return inter / union - (enclosing - union) / enclosing


def reg_loss(pred: PredictionMaps, gt: BoundingBox, mask: np.ndarray,
             lambda_giou: float = 2.0, lambda_l1: float = 5.0
             ) -> tuple[Tensor, bool]:
    """Mean over positive tokens of lambda_giou*(1-GIoU) + lambda_l1*L1.

    Returns (loss, has_positives); with no positive tokens the loss is 0
    and the flag is False.
    """
    grid = pred.grid
    if mask.shape != (grid, grid):
        raise ShapeError(f"mask {mask.shape} does not match grid {grid}")
    idx = np.flatnonzero(mask.reshape(-1))
    if idx.size == 0:
        return Tensor(0.0), False
    cx, cy, w, h = _decode_positives(pred.reg, idx, grid)
    g = _giou_terms(cx, cy, w, h, gt)
    l1 = (cx - gt.cx).abs() + (cy - gt.cy).abs() + (w - gt.w).abs() + (h - gt.h).abs()
    per = lambda_giou * (1.0 - g) + lambda_l1 * l1
    return per.mean(), True


def total_loss(pred: PredictionMaps, gt: BoundingBox, *,
               lambda_giou: float = 2.0, lambda_l1: float = 5.0,
               pos_weight: float = 1.0) -> tuple[Tensor, dict]:
    """Classification + regression objective; returns (loss, float parts)."""
    labels = assign_labels(gt, pred.grid)
    c = cls_loss(pred.cls, labels.mask, pos_weight)
    r, has_pos = reg_loss(pred, gt, mask=labels.mask,
                          lambda_giou=lambda_giou, lambda_l1=lambda_l1)
    loss = c + r
    parts = {"cls": c.item(), "reg": r.item() if has_pos else 0.0,
             "total": loss.item(), "positives": int(labels.mask.sum())}
    return loss, parts
