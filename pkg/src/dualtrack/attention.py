"""Multi-head attention in three flavours.

local_attention  - windowed self-attention on a rectangular token map,
                   optionally with a cyclic half-window shift and wrap
                   masking, plus a learned relative position bias.
global_attention - full self-attention over every token of a map.
cross_attention  - each stream queries the other stream's keys/values;
                   both streams update in parallel.

All three are built on one batched multi-head core: softmax(q k^T / sqrt(d))
per head, heads concatenated and mixed by an output projection.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigError, MASK_FILL, ShapeError, Tensor, linear, matmul, reshape,
    roll2d, softmax, take_last, transpose, trunc_normal,
)

__all__ = [
    "TokenMap", "AttentionWeights", "relative_position_index", "mha",
    "window_partition", "window_reverse", "cyclic_shift",
    "shifted_window_mask", "local_attention", "global_attention",
    "cross_attention",
]


@dataclass
class TokenMap:
    """A rectangular token grid: tokens has shape (H', W', C)."""

    tokens: Tensor

    def __post_init__(self):
        if self.tokens.data.ndim != 3:
            raise ShapeError(f"TokenMap tokens must be rank 3 (H, W, C), got {self.tokens.data.shape}")

    @property
    def h(self) -> int:
        return self.tokens.data.shape[0]

    @property
    def w(self) -> int:
        return self.tokens.data.shape[1]

    @property
    def c(self) -> int:
        return self.tokens.data.shape[2]

    def flat(self) -> Tensor:
        return reshape(self.tokens, (self.h * self.w, self.c))


@dataclass
class AttentionWeights:
    """Projection set for one attention op.

    wq/wk/wv/wo are (d_m, d_m); head i uses the contiguous column block
    [i*d_k, (i+1)*d_k), which is the concatenated form of per-head
    projection matrices. bias_table, when present, holds a learned
    relative-position bias per head, indexed by rel_index.
    """

    n_heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    bias_table: Tensor | None = None  # (n_heads, (2M-1)^2)
    window: int | None = None

    def __post_init__(self):
        d_m = self.wq.data.shape[0]
        if d_m % self.n_heads != 0:
            raise ConfigError(f"n_heads={self.n_heads} does not divide model dim {d_m}")
        if self.bias_table is not None:
            if self.window is None:
                raise ConfigError("bias_table requires the window size it was built for")
            expect = (self.n_heads, (2 * self.window - 1) ** 2)
            if self.bias_table.data.shape != expect:
                raise ShapeError(
                    f"bias_table shape {self.bias_table.data.shape} != expected {expect}")

    @property
    def d_m(self) -> int:
        return self.wq.data.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d_m // self.n_heads

    @classmethod
    def create(cls, d_m: int, n_heads: int, window: int | None = None,
               rng: np.random.Generator | None = None) -> "AttentionWeights":
        """Standalone weight set with trunc-normal projections and zero
        biases/bias table (models register Parameters themselves)."""
        rng = rng or np.random.default_rng(0)

        def proj():
            return Tensor(trunc_normal(rng, (d_m, d_m)), requires_grad=True)

        def bias():
            return Tensor(np.zeros(d_m), requires_grad=True)

        table = None
        if window is not None:
            table = Tensor(np.zeros((n_heads, (2 * window - 1) ** 2)), requires_grad=True)
        return cls(n_heads, proj(), bias(), proj(), bias(), proj(), bias(),
                   proj(), bias(), table, window)


@functools.lru_cache(maxsize=64)
def relative_position_index(window: int) -> np.ndarray:
    """(M^2, M^2) index into a (2M-1)^2 bias table: entry [i, j] encodes the
    2-D offset between window positions i and j, shifted to start at 0."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 2)  # (M^2, 2) as (row, col)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    idx = rel[..., 0] * (2 * window - 1) + rel[..., 1]
    idx.setflags(write=False)
    return idx


def _mha_batched(q: Tensor, kv: Tensor, w: AttentionWeights,
                 bias: Tensor | None = None, mask: np.ndarray | None = None,
                 collect: dict | None = None) -> Tensor:
    """Core attention on batched token sets: q (B, n, C), kv (B, m, C)."""
    B, n, C = q.data.shape
    m = kv.data.shape[1]
    if kv.data.shape[2] != C:
        raise ShapeError(f"query/key channel mismatch: {q.data.shape} vs {kv.data.shape}")
    if C != w.d_m:
        raise ShapeError(f"token width {C} does not match weights d_m {w.d_m}")
    h, d = w.n_heads, w.head_dim

    def heads(tokens: Tensor, count: int, wp: Tensor, bp: Tensor) -> Tensor:
        p = linear(reshape(tokens, (B * count, C)), wp, bp)
        p = reshape(p, (B, count, h, d))
        return reshape(transpose(p, (0, 2, 1, 3)), (B * h, count, d))

    qh = heads(q, n, w.wq, w.bq)
    kh = heads(kv, m, w.wk, w.bk)
    vh = heads(kv, m, w.wv, w.bv)
    scores = matmul(qh * (1.0 / math.sqrt(d)), transpose(kh, (0, 2, 1)))
    scores = reshape(scores, (B, h, n, m))
    if bias is not None:
        scores = scores + bias  # (h, n, m) broadcast over batch
    if mask is not None:
        scores = scores + Tensor(mask.reshape(B, 1, n, m))
    attn = softmax(scores, axis=-1)
    if collect is not None:
        collect["attn"] = attn.data.copy()
    out = matmul(reshape(attn, (B * h, n, m)), vh)
    out = reshape(transpose(reshape(out, (B, h, n, d)), (0, 2, 1, 3)), (B * n, C))
    out = linear(out, w.wo, w.bo)
    return reshape(out, (B, n, C))


def mha(q_tokens: Tensor, kv_tokens: Tensor, w: AttentionWeights,
        bias: Tensor | None = None, collect: dict | None = None) -> Tensor:
    """Multi-head attention on flat token sets: q (n, C), kv (m, C) -> (n, C)."""
    if q_tokens.data.ndim != 2 or kv_tokens.data.ndim != 2:
        raise ShapeError(
            f"mha expects rank-2 token sets, got {q_tokens.data.shape} and {kv_tokens.data.shape}")
    n, C = q_tokens.data.shape
    m = kv_tokens.data.shape[0]
    out = _mha_batched(reshape(q_tokens, (1, n, C)), reshape(kv_tokens, (1, m, C)),
                       w, bias=bias, collect=collect)
    return reshape(out, (n, C))


def window_partition(tmap: TokenMap, window: int) -> Tensor:
    """Split a token map into its N = (H/M)*(W/M) non-overlapping M x M
    windows, stacked as (N, M, M, C). Row-major window order."""
    H, W, C = tmap.h, tmap.w, tmap.c
    if H % window or W % window:
        raise ShapeError(f"token map {H}x{W} is not divisible by window {window}")
    x = reshape(tmap.tokens, (H // window, window, W // window, window, C))
    x = transpose(x, (0, 2, 1, 3, 4))
    return reshape(x, ((H // window) * (W // window), window, window, C))


def window_reverse(windows: Tensor, height: int, width: int) -> TokenMap:
    """Inverse of window_partition; reconstructs the (H, W, C) map exactly."""
    if windows.data.ndim != 4 or windows.data.shape[1] != windows.data.shape[2]:
        raise ShapeError(f"windows must be (N, M, M, C), got {windows.data.shape}")
    M = windows.data.shape[1]
    C = windows.data.shape[3]
    if height % M or width % M:
        raise ShapeError(f"target map {height}x{width} is not divisible by window {M}")
    n_expected = (height // M) * (width // M)
    if windows.data.shape[0] != n_expected:
        raise ShapeError(f"got {windows.data.shape[0]} windows, expected {n_expected}")
    x = reshape(windows, (height // M, width // M, M, M, C))
    x = transpose(x, (0, 2, 1, 3, 4))
    return TokenMap(reshape(x, (height, width, C)))


def cyclic_shift(tmap: TokenMap, dy: int, dx: int) -> TokenMap:
    """Roll the token grid by (dy, dx) with wraparound."""
    return TokenMap(roll2d(tmap.tokens, dy, dx))


@functools.lru_cache(maxsize=64)
def shifted_window_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Additive (N, M^2, M^2) mask for shifted windows.

    After rolling the map by (-shift, -shift), border windows mix tokens
    wrapped from opposite edges. Tokens are labeled by the contiguous
    region they came from (three bands per axis); pairs from different
    regions get MASK_FILL so their attention weight underflows to exactly
    zero. Read-only, cached per geometry.
    """
    ids = np.zeros((height, width))
    cnt = 0
    for hs in (slice(0, height - window), slice(height - window, height - shift),
               slice(height - shift, height)):
        for ws in (slice(0, width - window), slice(width - window, width - shift),
                   slice(width - shift, width)):
            ids[hs, ws] = cnt
            cnt += 1
    wins = ids.reshape(height // window, window, width // window, window)
    wins = wins.transpose(0, 2, 1, 3).reshape(-1, window * window)
    mask = np.where(wins[:, :, None] != wins[:, None, :], MASK_FILL, 0.0)
    mask.setflags(write=False)
    return mask


def _window_bias(w: AttentionWeights, window: int) -> Tensor | None:
    if w.bias_table is None:
        return None
    if w.window != window:
        raise ConfigError(f"weights carry a bias table for window {w.window}, asked for {window}")
    idx = relative_position_index(window)
    return take_last(w.bias_table, idx)  # (h, M^2, M^2)


def local_attention(tmap: TokenMap, w: AttentionWeights, window: int,
                    shifted: bool = False, collect: dict | None = None) -> TokenMap:
    """Windowed self-attention over non-overlapping M x M windows.

    shifted=True first rolls the grid by -floor(M/2) on both axes, masks
    pairs wrapped from opposite borders, and rolls back afterwards. The
    shift is suppressed when the grid equals the window (a single window
    sees everything already; shifting would only isolate wrapped bands).
    """
    H, W, C = tmap.h, tmap.w, tmap.c
    if H % window or W % window:
        raise ShapeError(f"token map {H}x{W} is not divisible by window {window}")
    shift = window // 2 if shifted else 0
    if shift and H == window and W == window:
        shift = 0
    x = tmap.tokens
    if shift:
        x = roll2d(x, -shift, -shift)
    n_win = (H // window) * (W // window)
    wins = window_partition(TokenMap(x), window)
    wins = reshape(wins, (n_win, window * window, C))
    bias = _window_bias(w, window)
    mask = shifted_window_mask(H, W, window, shift) if shift else None
    if collect is not None:
        coords = np.stack(np.meshgrid(np.arange(H), np.arange(W), indexing="ij"), axis=-1)
        if shift:
            coords = np.roll(coords, (-shift, -shift), axis=(0, 1))
        coords = coords.reshape(H // window, window, W // window, window, 2)
        collect["pre_shift_coords"] = coords.transpose(0, 2, 1, 3, 4).reshape(n_win, window * window, 2)
        collect["shift"] = shift
    out = _mha_batched(wins, wins, w, bias=bias, mask=mask, collect=collect)
    out = window_reverse(reshape(out, (n_win, window, window, C)), H, W).tokens
    if shift:
        out = roll2d(out, shift, shift)
    return TokenMap(out)


def global_attention(tmap: TokenMap, w: AttentionWeights,
                     collect: dict | None = None) -> TokenMap:
    """Full self-attention over all tokens of the map. No positional term
    lives inside this op, so it is permutation equivariant."""
    H, W, C = tmap.h, tmap.w, tmap.c
    out = _mha_batched(reshape(tmap.tokens, (1, H * W, C)),
                       reshape(tmap.tokens, (1, H * W, C)), w, collect=collect)
    return TokenMap(reshape(out, (H, W, C)))


def cross_attention(template: TokenMap, search: TokenMap,
                    weights_t: AttentionWeights, weights_s: AttentionWeights
                    ) -> tuple[TokenMap, TokenMap]:
    """Cross attention between the two streams.

    The template stream queries the search stream's keys/values (with its
    own weight set) and vice versa; both outputs are computed from the
    pre-update inputs, and each keeps its own token count and shape.
    """
    if template.c != search.c:
        raise ShapeError(f"stream channels differ: {template.c} vs {search.c}")
    t_flat, s_flat = template.flat(), search.flat()
    t_out = mha(t_flat, s_flat, weights_t)
    s_out = mha(s_flat, t_flat, weights_s)
    return (TokenMap(reshape(t_out, (template.h, template.w, template.c))),
            TokenMap(reshape(s_out, (search.h, search.w, search.c))))
