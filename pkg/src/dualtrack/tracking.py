"""Tracking-by-detection driver, synthetic sequences, and evaluation.

Frames are float64 (H, W, 3) arrays in [0, 1]. Frame-space boxes are
BoundingBox in pixel units; crop-space boxes are normalized to [0, 1].
A square region (factor * sqrt(w*h) on a side, centered on the box) is
resampled bilinearly to the model's crop size; out-of-frame area is filled
with the per-channel frame mean, and the affine crop<->frame transform is
returned alongside so predictions can be mapped back.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import TrackerModel
from .heads import BoundingBox, PredictionMaps, iou
from .tensor import no_grad

__all__ = [
    "CropTransform", "crop_region", "decode_prediction", "TrackOptions",
    "TrackerState", "track_sequence", "st_token", "metrics", "SynthSpec",
    "Sequence", "synth_sequence", "save_sequence", "load_sequence",
    "save_results", "load_results", "load_groundtruth", "similarity_map",
]


@dataclass
class CropTransform:
    """Affine map between a square crop and frame coordinates.

    Continuous crop coordinate u in [0, out_size] maps to frame
    x = x0 + u * scale; crop pixel i has center u = i + 0.5.
    """

    x0: float
    y0: float
    scale: float
    out_size: int

    @property
    def side(self) -> float:
        return self.scale * self.out_size

    def point_to_frame(self, u: float, v: float) -> tuple[float, float]:
        return (self.x0 + u * self.scale, self.y0 + v * self.scale)

    def point_to_crop(self, x: float, y: float) -> tuple[float, float]:
        return ((x - self.x0) / self.scale, (y - self.y0) / self.scale)

    def box_to_frame(self, box: BoundingBox) -> BoundingBox:
        """Normalized crop box -> frame pixels."""
        cx, cy = self.point_to_frame(box.cx * self.out_size, box.cy * self.out_size)
        return BoundingBox(cx, cy, box.w * self.side, box.h * self.side)

    def box_to_crop(self, box: BoundingBox) -> BoundingBox:
        """Frame-pixel box -> normalized crop coordinates."""
        u, v = self.point_to_crop(box.cx, box.cy)
        return BoundingBox(u / self.out_size, v / self.out_size,
                           box.w / self.side, box.h / self.side)


def _bilinear_gather(frame: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                     fill: np.ndarray) -> np.ndarray:
    """Sample frame at continuous pixel-index coords (out,)x(out,) grid,
    constant fill outside."""
    H, W, _ = frame.shape
    gy = ys[:, None]
    gx = xs[None, :]
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    wy = gy - y0
    wx = gx - x0
    out = np.zeros((ys.size, xs.size, 3))
    for oy, ox, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                      (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy, xx = y0 + oy, x0 + ox
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        vals = frame[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)]
        vals = np.where(valid[..., None], vals, fill)
        out += w[..., None] * vals
    return out


def crop_region(frame: np.ndarray, box: BoundingBox, factor: float,
                out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Square context crop around a frame-space box.

    The side is factor * sqrt(w * h); the crop is resampled to
    out_size x out_size. Out-of-frame samples use the per-channel frame mean.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"frame must be (H, W, 3), got {frame.shape}")
    area = box.w * box.h
    if area <= 0.0:
        raise ValueError(f"cannot crop around a degenerate box {box}")
    side = factor * math.sqrt(area)
    tf = CropTransform(x0=box.cx - side / 2.0, y0=box.cy - side / 2.0,
                       scale=side / out_size, out_size=out_size)
    # crop pixel i center sits at frame position x0 + (i + 0.5)*scale;
    # subtract 0.5 to express it in pixel-index space for sampling
    coords = (np.arange(out_size) + 0.5) * tf.scale - 0.5
    fill = frame.reshape(-1, 3).mean(axis=0)
    crop = _bilinear_gather(frame, coords + tf.y0, coords + tf.x0, fill)
    return crop, tf


def decode_prediction(maps: PredictionMaps, tf: CropTransform
                      ) -> tuple[BoundingBox, float]:
    """Pick the highest-logit token (row-major argmax; ties resolve to the
    smallest index) and decode its box into frame pixels."""
    grid = maps.grid
    logits = maps.cls.data.reshape(-1)
    k = int(np.argmax(logits))
    row, col = divmod(k, grid)
    dx, dy, w, h = (float(v) for v in maps.reg.data[row, col])
    cx = (col + 0.5) / grid + (dx - 0.5) / grid
    cy = (row + 0.5) / grid + (dy - 0.5) / grid
    conf = 1.0 / (1.0 + math.exp(-logits[k])) if logits[k] > -500 else 0.0
    return tf.box_to_frame(BoundingBox(cx, cy, w, h)), conf


@dataclass
class TrackOptions:
    mode: str = "baseline"          # "baseline" or "st"
    template_factor: float = 1.5
    search_factor: float = 3.0

    def validate(self) -> None:
        if self.mode not in ("baseline", "st"):
            raise ValueError(f"unknown tracking mode: {self.mode!r}")
        if self.template_factor <= 0 or self.search_factor <= 0:
            raise ValueError("crop factors must be positive")


@dataclass
class TrackerState:
    """Per-sequence tracker state. The template crop is fixed at init;
    its hash is re-checked every frame."""

    template: np.ndarray
    prev: BoundingBox
    template_hash: str
    context: np.ndarray | None = None   # spatio-temporal token, (4C,)


def _hash_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def _clamp_box(box: BoundingBox, height: int, width: int) -> BoundingBox:
    w = min(max(box.w, 2.0), float(width))
    h = min(max(box.h, 2.0), float(height))
    cx = min(max(box.cx, w / 2.0), width - w / 2.0)
    cy = min(max(box.cy, h / 2.0), height - h / 2.0)
    return BoundingBox(cx, cy, w, h)


def st_token(prev_search_features: np.ndarray, state: TrackerState) -> TrackerState:
    """Refresh the spatio-temporal context token: global average pool of the
    previous frame's final search-stream features. Applied every frame."""
    feats = np.asarray(prev_search_features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"search features must be (tokens, C), got {feats.shape}")
    state.context = feats.mean(axis=0)
    return state


def track_sequence(model: TrackerModel, seq: "Sequence",
                   options: TrackOptions | None = None
                   ) -> list[tuple[BoundingBox, float]]:
    """Track one sequence from its first-frame ground truth.

    Frame 0 output echoes the init box with confidence 1. Every later frame
    crops around the previous prediction, runs the model, and decodes the
    best token. In "st" mode the context token from the previous frame's
    search features is appended to the template token set.
    """
    options = options or TrackOptions()
    options.validate()
    if len(seq.frames) < 2:
        raise ValueError("tracking needs at least two frames")
    cfg = model.config
    H, W, _ = seq.frames[0].shape
    init = _clamp_box(seq.boxes[0], H, W)
    template, _ = crop_region(seq.frames[0], init, options.template_factor,
                              cfg.template_size)
    state = TrackerState(template=template, prev=init,
                         template_hash=_hash_array(template))
    results = [(init, 1.0)]
    for frame in seq.frames[1:]:
        if _hash_array(state.template) != state.template_hash:
            raise RuntimeError("template crop mutated during tracking")
        search, tf = crop_region(frame, state.prev, options.search_factor,
                                 cfg.search_size)
        st_vec = state.context if options.mode == "st" else None
        with no_grad():
            maps, extras = model.forward(state.template, search,
                                         st_vec=st_vec, want_extras=True)
        box, conf = decode_prediction(maps, tf)
        box = _clamp_box(box, frame.shape[0], frame.shape[1])
        state.prev = box
        results.append((box, conf))
        if options.mode == "st":
            st_token(extras["search_final"].data, state)
    return results


def metrics(pred_boxes: list[BoundingBox], gt_boxes: list[BoundingBox]) -> dict:
    """Average overlap and success rates, excluding the (given) first frame."""
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"prediction/gt length mismatch: {len(pred_boxes)} vs {len(gt_boxes)}")
    if len(pred_boxes) < 2:
        raise ValueError("metrics need at least two frames")
    ious = [iou(p, g) for p, g in zip(pred_boxes[1:], gt_boxes[1:])]
    arr = np.asarray(ious)
    return {
        "ao": float(arr.mean()),
        "sr50": float((arr > 0.5).mean()),
        "sr75": float((arr > 0.75).mean()),
        "per_frame_iou": ious,
    }


# -- synthetic sequences -------------------------------------------------------


@dataclass
class SynthSpec:
    """Recipe for a deterministic synthetic sequence."""

    seed: int = 0
    length: int = 20
    frame_size: int = 256
    target_size: float = 48.0
    velocity: tuple[float, float] = (2.0, 1.0)   # (vx, vy) px/frame
    motion: str = "constant"                     # "constant" or "sinusoidal"
    amplitude: float = 24.0                      # sinusoidal amplitude, px
    period: float = 16.0                         # sinusoidal period, frames
    size_drift: float = 0.0                      # relative size change per frame
    distractor: bool = False
    start: tuple[float, float] | None = None     # (cx, cy); default: center


@dataclass
class Sequence:
    name: str
    frames: list[np.ndarray]
    boxes: list[BoundingBox]
    clamped: bool = False   # trajectory hit the frame border and was clamped

    def __len__(self) -> int:
        return len(self.frames)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled low-resolution uniform noise in [0, 1]."""
    low = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1, 3))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(np.int64), cells - 1)
    x0 = np.minimum(xs.astype(np.int64), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = low[y0][:, x0]
    b = low[y0][:, x0 + 1]
    c = low[y0 + 1][:, x0]
    d = low[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Per-cell overlap of interval [lo, hi] with unit cells [i, i+1)."""
    i = np.arange(n)
    return np.clip(np.minimum(hi, i + 1) - np.maximum(lo, i), 0.0, 1.0)


def _paint_box(frame: np.ndarray, box: BoundingBox, tex: np.ndarray) -> None:
    """Alpha-composite a textured box at subpixel position (exact coverage)."""
    H, W, _ = frame.shape
    ax = _coverage(box.x0, box.x1, W)
    ay = _coverage(box.y0, box.y1, H)
    xs = np.flatnonzero(ax)
    ys = np.flatnonzero(ay)
    if xs.size == 0 or ys.size == 0:
        return
    alpha = ay[ys, None] * ax[None, xs]
    th, tw, _ = tex.shape
    # sample the texture in box-local coordinates so it moves with the box
    u = ((xs + 0.5 - box.x0) / max(box.w, 1e-9)) * (tw - 1)
    v = ((ys + 0.5 - box.y0) / max(box.h, 1e-9)) * (th - 1)
    u = np.clip(u, 0.0, tw - 1.0)
    v = np.clip(v, 0.0, th - 1.0)
    u0 = np.minimum(u.astype(np.int64), tw - 2) if tw > 1 else np.zeros_like(u, dtype=np.int64)
    v0 = np.minimum(v.astype(np.int64), th - 2) if th > 1 else np.zeros_like(v, dtype=np.int64)
    fu = (u - u0)[None, :, None]
    fv = (v - v0)[:, None, None]
    t00 = tex[v0][:, u0]
    t01 = tex[v0][:, u0 + 1] if tw > 1 else t00
    t10 = tex[v0 + 1][:, u0] if th > 1 else t00
    t11 = tex[v0 + 1][:, u0 + 1] if (tw > 1 and th > 1) else t00
    patch = (t00 * (1 - fv) * (1 - fu) + t01 * (1 - fv) * fu
             + t10 * fv * (1 - fu) + t11 * fv * fu)
    region = frame[np.ix_(ys, xs)]
    frame[np.ix_(ys, xs)] = region * (1 - alpha[..., None]) + patch * alpha[..., None]


def synth_sequence(spec: SynthSpec) -> Sequence:
    """Render a textured target moving over a smooth background.

    Deterministic: the same spec (same seed) produces bit-identical frames.
    Ground truth is the exact float trajectory; centers are clamped so the
    box stays inside the frame, with the clamped flag set when that bites.
    """
    if spec.length < 2:
        raise ValueError("a sequence needs at least two frames")
    if spec.motion not in ("constant", "sinusoidal"):
        raise ValueError(f"unknown motion kind: {spec.motion!r}")
    rng = np.random.default_rng(spec.seed)
    F = spec.frame_size
    bg = _smooth_noise(rng, F, F, cells=8) * 0.35 + 0.25      # low-contrast backdrop
    base = rng.uniform(0.55, 0.95, size=3)
    tex = _smooth_noise(rng, 48, 48, cells=5) * 0.5 + base * 0.7
    tex = np.clip(tex, 0.0, 1.0)
    d_tex = None
    d_start = None
    if spec.distractor:
        d_base = rng.uniform(0.45, 0.9, size=3)
        d_tex = np.clip(_smooth_noise(rng, 48, 48, cells=5) * 0.5 + d_base * 0.7, 0.0, 1.0)
        d_start = rng.uniform(0.2 * F, 0.8 * F, size=2)
    cx0, cy0 = spec.start if spec.start is not None else (F / 2.0, F / 2.0)
    vx, vy = spec.velocity
    frames, boxes = [], []
    clamped = False
    for k in range(spec.length):
        size = spec.target_size * (1.0 + spec.size_drift) ** k
        if spec.motion == "constant":
            cx, cy = cx0 + vx * k, cy0 + vy * k
        else:
            cx = cx0 + vx * k + spec.amplitude * math.sin(2 * math.pi * k / spec.period)
            cy = cy0 + vy * k + spec.amplitude * math.cos(2 * math.pi * k / spec.period)
        lo, hi = size / 2.0, F - size / 2.0
        ccx, ccy = min(max(cx, lo), hi), min(max(cy, lo), hi)
        if (ccx, ccy) != (cx, cy):
            clamped = True
        box = BoundingBox(ccx, ccy, size, size)
        frame = bg.copy()
        if spec.distractor:
            dx = d_start[0] - vx * 0.8 * k
            dy = d_start[1] + vy * 0.8 * k
            dbox = BoundingBox(min(max(dx, lo), hi), min(max(dy, lo), hi), size, size)
            _paint_box(frame, dbox, d_tex)
        _paint_box(frame, box, tex)
        frames.append(frame)
        boxes.append(box)
    return Sequence(name=f"synth{spec.seed:04d}", frames=frames, boxes=boxes,
                    clamped=clamped)


# -- on-disk formats -----------------------------------------------------------


def save_sequence(seq: Sequence, directory) -> None:
    """Numbered 8-bit PNG frames + groundtruth.txt with one 'x,y,w,h' line
    (top-left corner + size, pixels) per frame."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        img = Image.fromarray(np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8))
        img.save(d / f"{i:08d}.png")
    with open(d / "groundtruth.txt", "w") as fh:
        for box in seq.boxes:
            x, y, w, h = box.to_xywh()
            fh.write(f"{x:.4f},{y:.4f},{w:.4f},{h:.4f}\n")


def load_groundtruth(path) -> list[BoundingBox]:
    boxes = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = re.split(r"[,\s]+", line)
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 'x,y,w,h', got {line!r}")
            x, y, w, h = (float(v) for v in parts)
            boxes.append(BoundingBox.from_xywh(x, y, w, h))
    if not boxes:
        raise ValueError(f"{path}: no ground-truth boxes")
    return boxes


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    files = sorted(p for p in d.iterdir()
                   if p.suffix.lower() in (".png", ".ppm") and p.stem.isdigit())
    if not files:
        raise ValueError(f"{d}: no numbered image files")
    frames = [np.asarray(Image.open(p), dtype=np.float64) / 255.0 for p in files]
    boxes = load_groundtruth(d / "groundtruth.txt")
    if len(boxes) != len(frames):
        raise ValueError(f"{d}: {len(frames)} frames but {len(boxes)} gt boxes")
    return Sequence(name=d.name, frames=frames, boxes=boxes)


def save_results(path, results: list[tuple[BoundingBox, float]]) -> None:
    """One 'x,y,w,h,confidence' line per frame (pixels)."""
    with open(path, "w") as fh:
        for box, conf in results:
            x, y, w, h = box.to_xywh()
            fh.write(f"{x:.4f},{y:.4f},{w:.4f},{h:.4f},{conf:.6f}\n")


def load_results(path) -> list[tuple[BoundingBox, float]]:
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln}: expected 'x,y,w,h,conf', got {line!r}")
            x, y, w, h, conf = (float(v) for v in parts)
            out.append((BoundingBox.from_xywh(x, y, w, h), conf))
    if not out:
        raise ValueError(f"{path}: empty results file")
    return out


# -- diagnostics ---------------------------------------------------------------


def similarity_map(model: TrackerModel, template: np.ndarray,
                   search: np.ndarray) -> np.ndarray:
    """Cosine similarity between the template's center token and every
    search token, taken just before the cross-attention stage. Returns the
    (G, G) search-grid map in [-1, 1]."""
    with no_grad():
        _, extras = model.forward(template, search, want_extras=True)
    t = extras["template_pre_cab"].data
    s = extras["search_pre_cab"].data
    gt = model.config.out_grid(model.config.template_size)
    center = (gt // 2) * gt + gt // 2
    tc = t[center]
    denom = np.linalg.norm(s, axis=1) * np.linalg.norm(tc) + 1e-12
    sims = (s @ tc) / denom
    gs = model.config.out_grid(model.config.search_size)
    return sims.reshape(gs, gs)
