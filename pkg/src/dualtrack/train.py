"""SGD training on template/search crop pairs.

A training pair is built from two frames of one sequence: the template is
cropped around the ground truth of the first frame, the search region around
a jittered version of the ground truth of the second, and the second frame's
box (mapped into normalized search-crop coordinates) supervises the heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import TrackerModel
from .heads import BoundingBox, total_loss
from .tensor import Parameter
from .tracking import Sequence, crop_region

__all__ = ["TrainSettings", "TrainingDiverged", "TrainRecord", "sample_pair",
           "make_fixed_pairs", "SGD", "train"]


@dataclass
class TrainSettings:
    steps: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 4
    seed: int = 0
    lambda_giou: float = 2.0
    lambda_l1: float = 5.0
    pos_weight: float = 1.0
    grad_clip: float = 10.0          # global-norm cap; <= 0 disables
    lr_schedule: str = "constant"    # "constant" or "cosine" (anneals to lr/100)
    center_jitter: float = 0.15      # of target side, in the search frame
    scale_jitter: float = 0.10       # relative log-uniform size jitter
    max_gap: int = 8                 # max frame gap within a sequence
    template_factor: float = 1.5
    search_factor: float = 3.0

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule: {self.lr_schedule!r}")
        if self.max_gap < 1:
            raise ValueError("max_gap must be at least 1")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        t = step / max(1, self.steps - 1)
        floor = self.lr / 100.0
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * t))


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step at which it happened."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainRecord:
    step: int
    loss: float
    cls: float
    reg: float
    positives: int


def sample_pair(seq: Sequence, i: int, j: int, settings: TrainSettings,
                rng: np.random.Generator,
                template_size: int, search_size: int
                ) -> tuple[np.ndarray, np.ndarray, BoundingBox]:
    """Build (template crop, search crop, normalized gt box) from frames i, j."""
    gt_i, gt_j = seq.boxes[i], seq.boxes[j]
    template, _ = crop_region(seq.frames[i], gt_i, settings.template_factor,
                              template_size)
    side = math.sqrt(gt_j.w * gt_j.h)
    cx = gt_j.cx + rng.uniform(-1.0, 1.0) * settings.center_jitter * side
    cy = gt_j.cy + rng.uniform(-1.0, 1.0) * settings.center_jitter * side
    s = math.exp(rng.uniform(-1.0, 1.0) * settings.scale_jitter)
    around = BoundingBox(cx, cy, gt_j.w * s, gt_j.h * s)
    search, tf = crop_region(seq.frames[j], around, settings.search_factor,
                             search_size)
    return template, search, tf.box_to_crop(gt_j)


def make_fixed_pairs(sequences: list[Sequence], n_pairs: int,
                     settings: TrainSettings, template_size: int,
                     search_size: int) -> list[tuple[np.ndarray, np.ndarray, BoundingBox]]:
    """Pre-sample a fixed, reusable pair set (deterministic in settings.seed)."""
    rng = np.random.default_rng(settings.seed)
    pairs = []
    for k in range(n_pairs):
        seq = sequences[k % len(sequences)]
        i = int(rng.integers(0, len(seq) - 1))
        j = min(i + int(rng.integers(1, settings.max_gap + 1)), len(seq) - 1)
        pairs.append(sample_pair(seq, i, j, settings, rng,
                                 template_size, search_size))
    return pairs


class SGD:
    """Plain SGD with classical momentum over a named parameter dict."""

    def __init__(self, params: dict[str, Parameter], lr: float,
                 momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def global_grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            total += float((p.grad * p.grad).sum())
        return math.sqrt(total)

    def clip_gradients(self, max_norm: float) -> float:
        norm = self.global_grad_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                p.grad *= scale
        return norm

    def step(self) -> None:
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def train(model: TrackerModel,
          pairs: list[tuple[np.ndarray, np.ndarray, BoundingBox]],
          settings: TrainSettings,
          log_every: int = 0) -> list[TrainRecord]:
    """Minimize the detection loss over a fixed pair set.

    Each step averages gradients over a deterministic round-robin batch,
    clips the global gradient norm, and applies one momentum-SGD update.
    Raises TrainingDiverged on a non-finite loss.
    """
    settings.validate()
    opt = SGD(model.params, lr=settings.lr, momentum=settings.momentum)
    records = []
    for step in range(settings.steps):
        opt.lr = settings.lr_at(step)
        opt.zero_grad()
        loss_sum = cls_sum = reg_sum = 0.0
        npos = 0
        for b in range(settings.batch_size):
            template, search, gt = pairs[(step * settings.batch_size + b) % len(pairs)]
            maps = model.forward(template, search)
            loss, parts = total_loss(maps, gt,
                                     lambda_giou=settings.lambda_giou,
                                     lambda_l1=settings.lambda_l1,
                                     pos_weight=settings.pos_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            (loss * (1.0 / settings.batch_size)).backward()
            loss_sum += value / settings.batch_size
            cls_sum += parts["cls"] / settings.batch_size
            reg_sum += parts["reg"] / settings.batch_size
            npos += parts["positives"]
        opt.clip_gradients(settings.grad_clip)
        opt.step()
        rec = TrainRecord(step=step, loss=loss_sum, cls=cls_sum,
                          reg=reg_sum, positives=npos)
        records.append(rec)
        if log_every and (step % log_every == 0 or step == settings.steps - 1):
            print(f"step {rec.step:5d}  loss {rec.loss:.4f}  "
                  f"cls {rec.cls:.4f}  reg {rec.reg:.4f}  pos {rec.positives}")
    return records
