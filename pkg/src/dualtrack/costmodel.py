"""Closed-form parameter and FLOP accounting.

Conventions:
  - one multiply-accumulate = 2 FLOPs;
  - only matrix products are counted (softmax, layer norm, bias adds and
    elementwise maps are ignored), matching the FlopCounter instrumentation
    in the tensor core, so closed form and measured counts agree exactly;
  - the published-style attention formulas are kept in their original
    multiply-accumulate unit and exposed verbatim for reference.

flops_local_paper / flops_global_paper reproduce the literal published
formulas (whose window/token terms are transposed relative to the
accompanying prose); flops_attention implements the prose-consistent pair
used by the cost report: local attention linear in tokens at fixed window,
global attention quadratic.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .backbone import ModelConfig

__all__ = [
    "CostReport", "flops_local_paper", "flops_global_paper",
    "flops_attention", "count_params", "count_flops",
]


def flops_local_paper(n: int, m: int, c: int) -> int:
    """Literal published local-attention cost: 4*n*c^2 + 2*(m*m)^2*c."""
    return 4 * n * c * c + 2 * (m * m) ** 2 * c


def flops_global_paper(n: int, m: int, c: int) -> int:
    """Literal published global-attention cost: 4*n*c^2 + 2*m^2*n*c."""
    return 4 * n * c * c + 2 * m * m * n * c


def flops_attention(tokens: int, window: int, channels: int, kind: str) -> int:
    """Consistency-corrected attention cost (multiply-accumulate unit).

    local:  4*T*C^2 + 2*M^2*T*C   (linear in T at fixed window)
    global: 4*T*C^2 + 2*T^2*C     (quadratic in T)
    """
    proj = 4 * tokens * channels * channels
    if kind == "local":
        if tokens % (window * window):
            raise ValueError(
                f"local attention needs window^2 ({window * window}) tokens "
                f"per window to tile {tokens} tokens exactly")
        return proj + 2 * window * window * tokens * channels
    if kind == "global":
        return proj + 2 * tokens * tokens * channels
    raise ValueError(f"unknown attention kind: {kind!r}")


@dataclass
class CostReport:
    """Totals plus per-module / per-block-kind breakdowns. Construction
    asserts that each breakdown sums to its total."""

    params_total: int
    params_by_module: dict[str, int]
    flops_total: int
    flops_by_kind: dict[str, int]
    template_size: int
    search_size: int
    config: dict

    def __post_init__(self):
        if sum(self.params_by_module.values()) != self.params_total:
            raise ValueError("parameter breakdown does not sum to total")
        if sum(self.flops_by_kind.values()) != self.flops_total:
            raise ValueError("FLOP breakdown does not sum to total")

    def lines(self) -> list[str]:
        out = [f"parameters total: {self.params_total:,}"]
        out += [f"  {k}: {v:,}" for k, v in self.params_by_module.items()]
        out.append(f"forward FLOPs total (template {self.template_size}, "
                   f"search {self.search_size}): {self.flops_total:,}")
        out += [f"  {k}: {v:,}" for k, v in self.flops_by_kind.items()]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["section", "name", "value"])
        writer.writerow(["params", "total", self.params_total])
        for k, v in self.params_by_module.items():
            writer.writerow(["params", k, v])
        writer.writerow(["flops", "total", self.flops_total])
        for k, v in self.flops_by_kind.items():
            writer.writerow(["flops", k, v])
        return buf.getvalue()


def _block_param_count(ch: int, heads: int, ratio: int, window: int | None) -> int:
    p = 2 * ch + 2 * ch                               # two layer norms
    p += 3 * (ch * ch + ch) + ch * ch + ch            # q/k/v + output projections
    p += ch * ratio * ch + ratio * ch                 # MLP expand
    p += ratio * ch * ch + ch                         # MLP contract
    if window is not None:
        p += heads * (2 * window - 1) ** 2            # relative bias table
    return p


def _params_breakdown(cfg: ModelConfig) -> dict[str, int]:
    C, p, r = cfg.embed_dim, cfg.patch_size, cfg.mlp_ratio
    chans, heads = cfg.stage_channels, cfg.stage_heads()
    by = {}
    by["embed"] = 3 * p * p * C + C
    by["lab"] = sum(d * _block_param_count(ch, nh, r, cfg.window)
                    for d, ch, nh in zip(cfg.lab_depths, chans, heads))
    by["merge"] = sum(4 * chans[i] * 2 * chans[i] + 2 * chans[i] for i in (0, 1))
    D, fh = cfg.feature_dim, cfg.heads_fusion()
    gt, gs = cfg.out_grid(cfg.template_size), cfg.out_grid(cfg.search_size)
    by["pos"] = (gt * gt + gs * gs) * D
    by["gab"] = cfg.gab_depth * _block_param_count(D, fh, r, None) \
        * (1 if cfg.gab_shared else 2)
    by["cab"] = cfg.cab_depth * 2 * _block_param_count(D, fh, r, None)
    hh, in_dim = cfg.head_hidden, cfg.out_dim
    by["head"] = sum(in_dim * hh + hh + hh * hh + hh + hh * out + out
                     for out in (1, 4))
    return by


def _mlp_flops(tokens: int, ch: int, ratio: int) -> int:
    return 4 * ratio * tokens * ch * ch  # two linears, 2 FLOPs per MAC


def _flops_breakdown(cfg: ModelConfig, template_size: int, search_size: int
                     ) -> dict[str, int]:
    C, p, r, M = cfg.embed_dim, cfg.patch_size, cfg.mlp_ratio, cfg.window
    chans = cfg.stage_channels
    by = {"embed": 0, "local": 0, "merge": 0, "global": 0, "cross": 0, "head": 0}
    for size in (template_size, search_size):
        t0 = (size // p) ** 2
        by["embed"] += 2 * t0 * 3 * p * p * C
        for i, depth in enumerate(cfg.lab_depths):
            if depth == 0:
                continue
            t, ch = t0 // 4 ** i, chans[i]
            by["local"] += depth * (2 * flops_attention(t, M, ch, "local")
                                    + _mlp_flops(t, ch, r))
        for i in (0, 1):
            t, ch = t0 // 4 ** i, chans[i]
            by["merge"] += 2 * (2 * t * ch * ch)  # (t/4, 4ch) @ (4ch, 2ch)
    D = cfg.feature_dim
    ts = cfg.out_grid(search_size) ** 2
    tt = cfg.out_grid(template_size) ** 2
    for t in (ts, tt):
        by["global"] += cfg.gab_depth * (2 * flops_attention(t, M, D, "global")
                                         + _mlp_flops(t, D, r))
    for t, s in ((ts, tt), (tt, ts)):  # per stream: own queries, other's kv
        by["cross"] += cfg.cab_depth * (2 * ((2 * t + 2 * s) * D * D + 2 * t * s * D)
                                        + _mlp_flops(t, D, r))
    hh, in_dim = cfg.head_hidden, cfg.out_dim
    by["head"] = sum(2 * ts * (in_dim * hh + hh * hh + hh * out) for out in (1, 4))
    return by


def _report(cfg: ModelConfig, template_size: int, search_size: int) -> CostReport:
    cfg.validate()
    params = _params_breakdown(cfg)
    flops = _flops_breakdown(cfg, template_size, search_size)
    return CostReport(
        params_total=sum(params.values()), params_by_module=params,
        flops_total=sum(flops.values()), flops_by_kind=flops,
        template_size=template_size, search_size=search_size,
        config=cfg.to_dict(),
    )


def count_params(config: ModelConfig) -> CostReport:
    """Closed-form parameter count; matches model enumeration exactly."""
    return _report(config, config.template_size, config.search_size)


def count_flops(config: ModelConfig, template_size: int | None = None,
                search_size: int | None = None) -> CostReport:
    """Closed-form forward FLOPs for one (template, search) pair, optionally
    at overridden crop sizes. Agrees with FlopCounter instrumentation."""
    return _report(config,
                   template_size if template_size is not None else config.template_size,
                   search_size if search_size is not None else config.search_size)
