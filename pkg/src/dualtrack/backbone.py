"""Dual-branch hierarchical transformer backbone.

Both crops (template and search) run through a shared three-stage stack of
windowed local-attention blocks with patch merging between stages, then
through global self-attention blocks per branch, and finally through cross
attention blocks that exchange information between the branches. The
search-stream outputs of the last two fusion blocks are concatenated
channel-wise into the prediction feature map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .attention import (
    AttentionWeights, TokenMap, global_attention, local_attention, mha,
)
from .heads import HeadParams, PredictionMaps, build_head_params, mlp_head
from .tensor import (
    ConfigError, Parameter, ShapeError, Tensor, activation, concat,
    layer_norm, linear, load_checkpoint, reshape, save_checkpoint,
    transpose, trunc_normal,
)

__all__ = [
    "ModelConfig", "BlockParams", "TrackerModel", "patch_embed",
    "patch_merge", "transformer_block",
]

_N_STAGES = 3  # local stages; channels C, 2C, 4C with merges in between


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    Defaults build the full-size tracker: 4x4 patches embedded to 128
    channels, window 7, local depths (2, 2, 6) shared between branches,
    4 global blocks (one weight set applied to both branches) and 4 cross
    blocks at 512 channels, template crop 112, search crop 224.
    """

    patch_size: int = 4
    embed_dim: int = 128
    window: int = 7
    lab_depths: tuple[int, int, int] = (2, 2, 6)
    gab_depth: int = 4
    cab_depth: int = 4
    lab_heads: tuple[int, int, int] | None = None  # default: channels/32, min 1
    fusion_heads: int | None = None                # heads for global/cross blocks
    mlp_ratio: int = 2
    template_size: int = 112
    search_size: int = 224
    gab_shared: bool = True   # one global-block weight set serving both branches
    head_hidden: int = 256
    init_std: float | None = 0.02   # None: per-tensor 1/sqrt(fan_in)

    def __post_init__(self):
        self.lab_depths = tuple(int(d) for d in self.lab_depths)
        if self.lab_heads is not None:
            self.lab_heads = tuple(int(h) for h in self.lab_heads)

    # -- derived geometry ---------------------------------------------------

    @property
    def stage_channels(self) -> tuple[int, int, int]:
        return tuple(self.embed_dim * 2 ** i for i in range(_N_STAGES))

    @property
    def feature_dim(self) -> int:
        """Channel width after the local stages (4C)."""
        return self.embed_dim * 4

    @property
    def out_dim(self) -> int:
        """Width of the fused prediction features (two 4C maps concatenated)."""
        return self.feature_dim * 2

    def stage_heads(self) -> tuple[int, int, int]:
        if self.lab_heads is not None:
            return self.lab_heads
        return tuple(max(1, c // 32) for c in self.stage_channels)

    def heads_fusion(self) -> int:
        if self.fusion_heads is not None:
            return self.fusion_heads
        return max(1, self.feature_dim // 32)

    def grids(self, size: int) -> tuple[int, int, int]:
        g = size // self.patch_size
        return (g, g // 2, g // 4)

    def out_grid(self, size: int) -> int:
        """Token grid side at the output stride (patch * 4)."""
        return size // (self.patch_size * 4)

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        if self.patch_size < 1 or self.embed_dim < 1 or self.window < 1:
            raise ConfigError("patch_size, embed_dim, and window must be positive")
        if len(self.lab_depths) != _N_STAGES:
            raise ConfigError(f"lab_depths must have {_N_STAGES} entries, got {self.lab_depths}")
        if any(d < 0 for d in self.lab_depths) or self.gab_depth < 0 or self.cab_depth < 0:
            raise ConfigError("block depths must be >= 0")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        stride = self.patch_size * 2 ** (_N_STAGES - 1)
        for label, size in (("template_size", self.template_size),
                            ("search_size", self.search_size)):
            if size % stride:
                raise ConfigError(
                    f"{label}={size} must be divisible by patch_size * 4 = {stride}")
            for stage, grid in enumerate(self.grids(size)):
                if self.lab_depths[stage] and grid % self.window:
                    raise ConfigError(
                        f"{label}: stage {stage} grid {grid} is not divisible by window {self.window}")
        for ch, nh in zip(self.stage_channels, self.stage_heads()):
            if ch % nh:
                raise ConfigError(f"heads {nh} do not divide stage channels {ch}")
        if self.feature_dim % self.heads_fusion():
            raise ConfigError(
                f"fusion heads {self.heads_fusion()} do not divide feature dim {self.feature_dim}")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden must be positive")
        if self.init_std is not None and self.init_std <= 0:
            raise ConfigError("init_std must be positive (or None for fan-in scaling)")

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("lab_depths", "lab_heads"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Desk-scale preset used by the toy training and tracking tests."""
        return cls(patch_size=4, embed_dim=16, window=4, lab_depths=(1, 1, 2),
                   gab_depth=1, cab_depth=2, lab_heads=(1, 2, 4), fusion_heads=4,
                   mlp_ratio=2, template_size=64, search_size=128, head_hidden=64,
                   init_std=None)


@dataclass
class BlockParams:
    """One pre-norm transformer block: LN -> attention -> residual,
    LN -> 2-layer MLP -> residual."""

    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionWeights
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


def patch_embed(image, w: Tensor, b: Tensor, patch: int) -> TokenMap:
    """Flatten each patch x patch x 3 block (row-major y, x, channel) and
    linearly project it to the embedding width."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if img.data.ndim != 3 or img.data.shape[2] != 3:
        raise ShapeError(f"patch_embed expects an (H, W, 3) image, got {img.data.shape}")
    H, W, _ = img.data.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {patch}")
    raw = 3 * patch * patch
    if w.data.shape[0] != raw:
        raise ShapeError(f"embed weight expects {w.data.shape[0]} raw values, patches give {raw}")
    gh, gw = H // patch, W // patch
    x = reshape(img, (gh, patch, gw, patch, 3))
    x = transpose(x, (0, 2, 1, 3, 4))
    x = reshape(x, (gh * gw, raw))
    tokens = linear(x, w, b)
    return TokenMap(reshape(tokens, (gh, gw, w.data.shape[1])))


def patch_merge(tmap: TokenMap, w: Tensor, b: Tensor) -> TokenMap:
    """Group each 2x2 token neighborhood (row-major order, 4C' values) and
    linearly project to 2C'. Halves the grid, doubles the channels."""
    H, W, C = tmap.h, tmap.w, tmap.c
    if H % 2 or W % 2:
        raise ShapeError(f"patch_merge requires even grid dims, got {H}x{W}")
    if w.data.shape != (4 * C, 2 * C):
        raise ShapeError(f"merge weight {w.data.shape} does not match channels {C} (want {(4 * C, 2 * C)})")
    x = reshape(tmap.tokens, (H // 2, 2, W // 2, 2, C))
    x = transpose(x, (0, 2, 1, 3, 4))
    x = reshape(x, ((H // 2) * (W // 2), 4 * C))
    out = linear(x, w, b)
    return TokenMap(reshape(out, (H // 2, W // 2, 2 * C)))


def _mlp(x: Tensor, p: BlockParams) -> Tensor:
    return linear(activation(linear(x, p.mlp_w1, p.mlp_b1), "gelu"), p.mlp_w2, p.mlp_b2)


def transformer_block(tmap: TokenMap, p: BlockParams, attn_kind: str,
                      window: int | None = None) -> TokenMap:
    """Pre-norm block on a token map. attn_kind selects the mixer:
    'local', 'local_shifted', or 'global'."""
    if attn_kind not in ("local", "local_shifted", "global"):
        raise ConfigError(f"unknown attention kind: {attn_kind!r}")
    x = tmap.tokens
    normed = layer_norm(x, p.ln1_g, p.ln1_b)
    if attn_kind == "global":
        att = global_attention(TokenMap(normed), p.attn).tokens
    else:
        win = window if window is not None else p.attn.window
        if win is None:
            raise ConfigError("local attention needs a window size")
        att = local_attention(TokenMap(normed), p.attn, win,
                              shifted=(attn_kind == "local_shifted")).tokens
    y = att + x
    z = _mlp(layer_norm(y, p.ln2_g, p.ln2_b), p) + y
    return TokenMap(z)


def _flat_self_block(x: Tensor, p: BlockParams) -> Tensor:
    """Pre-norm block with full self-attention on a flat (n, C) token set."""
    normed = layer_norm(x, p.ln1_g, p.ln1_b)
    y = mha(normed, normed, p.attn) + x
    return _mlp(layer_norm(y, p.ln2_g, p.ln2_b), p) + y


def _flat_cross_block(t: Tensor, s: Tensor, pt: BlockParams, ps: BlockParams
                      ) -> tuple[Tensor, Tensor]:
    """Cross block: each stream attends to the other's pre-update tokens,
    then runs its own MLP sub-block."""
    t_n = layer_norm(t, pt.ln1_g, pt.ln1_b)
    s_n = layer_norm(s, ps.ln1_g, ps.ln1_b)
    t2 = mha(t_n, s_n, pt.attn) + t
    s2 = mha(s_n, t_n, ps.attn) + s
    t3 = _mlp(layer_norm(t2, pt.ln2_g, pt.ln2_b), pt) + t2
    s3 = _mlp(layer_norm(s2, ps.ln2_g, ps.ln2_b), ps) + s2
    return t3, s3


class TrackerModel:
    """The dual-branch tracker: backbone plus classification/regression heads.

    All parameters live in self.params (flat name -> Parameter); structure
    objects hold references into it. Construction order is fixed, so a
    given seed always produces bit-identical weights.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        C = config.embed_dim
        p = config.patch_size

        self.embed_w = self._param("embed.w", self._init(rng, (3 * p * p, C)))
        self.embed_b = self._param("embed.b", np.zeros(C))

        chans, heads = config.stage_channels, config.stage_heads()
        self.lab: list[list[BlockParams]] = []
        self.merges: list[tuple[Parameter, Parameter]] = []
        for si in range(_N_STAGES):
            blocks = [self._block(f"lab.s{si}.b{bi}", rng, chans[si], heads[si],
                                  window=config.window)
                      for bi in range(config.lab_depths[si])]
            self.lab.append(blocks)
            if si < _N_STAGES - 1:
                w = self._param(f"merge{si}.w", self._init(rng, (4 * chans[si], 2 * chans[si])))
                b = self._param(f"merge{si}.b", np.zeros(2 * chans[si]))
                self.merges.append((w, b))

        D = config.feature_dim
        fh = config.heads_fusion()
        gt = config.out_grid(config.template_size)
        gs = config.out_grid(config.search_size)
        # positional tables are additive embeddings, not projections, so they
        # keep the small documented scale even under fan-in initialization
        self.pos_template = self._param("pos.template", trunc_normal(rng, (gt * gt, D)))
        self.pos_search = self._param("pos.search", trunc_normal(rng, (gs * gs, D)))

        if config.gab_shared:
            shared = [self._block(f"gab.b{j}", rng, D, fh) for j in range(config.gab_depth)]
            self.gab_t = self.gab_s = shared
        else:
            self.gab_t = [self._block(f"gab_t.b{j}", rng, D, fh) for j in range(config.gab_depth)]
            self.gab_s = [self._block(f"gab_s.b{j}", rng, D, fh) for j in range(config.gab_depth)]

        self.cab: list[tuple[BlockParams, BlockParams]] = [
            (self._block(f"cab.b{j}.t", rng, D, fh), self._block(f"cab.b{j}.s", rng, D, fh))
            for j in range(config.cab_depth)
        ]

        self.head: HeadParams = build_head_params(self._param, config.out_dim,
                                                  config.head_hidden,
                                                  init_std=config.init_std)

    # -- parameter registry ---------------------------------------------------

    def _init(self, rng, shape) -> np.ndarray:
        std = self.config.init_std
        if std is None:
            std = shape[0] ** -0.5
        return trunc_normal(rng, shape, std)

    def _param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name: {name}")
        par = Parameter(name, data)
        self.params[name] = par
        return par

    def _block(self, prefix: str, rng, ch: int, n_heads: int,
               window: int | None = None) -> BlockParams:
        r = self.config.mlp_ratio
        table = None
        if window is not None:
            table = self._param(f"{prefix}.attn.bias_table",
                                np.zeros((n_heads, (2 * window - 1) ** 2)))
        attn = AttentionWeights(
            n_heads,
            self._param(f"{prefix}.attn.wq", self._init(rng, (ch, ch))),
            self._param(f"{prefix}.attn.bq", np.zeros(ch)),
            self._param(f"{prefix}.attn.wk", self._init(rng, (ch, ch))),
            self._param(f"{prefix}.attn.bk", np.zeros(ch)),
            self._param(f"{prefix}.attn.wv", self._init(rng, (ch, ch))),
            self._param(f"{prefix}.attn.bv", np.zeros(ch)),
            self._param(f"{prefix}.attn.wo", self._init(rng, (ch, ch))),
            self._param(f"{prefix}.attn.bo", np.zeros(ch)),
            table, window,
        )
        return BlockParams(
            self._param(f"{prefix}.ln1.g", np.ones(ch)),
            self._param(f"{prefix}.ln1.b", np.zeros(ch)),
            attn,
            self._param(f"{prefix}.ln2.g", np.ones(ch)),
            self._param(f"{prefix}.ln2.b", np.zeros(ch)),
            self._param(f"{prefix}.mlp.w1", self._init(rng, (ch, r * ch))),
            self._param(f"{prefix}.mlp.b1", np.zeros(r * ch)),
            self._param(f"{prefix}.mlp.w2", self._init(rng, (r * ch, ch))),
            self._param(f"{prefix}.mlp.b2", np.zeros(ch)),
        )

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward ---------------------------------------------------------------

    def _lab_branch(self, image) -> TokenMap:
        tmap = patch_embed(image, self.embed_w, self.embed_b, self.config.patch_size)
        for si, blocks in enumerate(self.lab):
            for bi, bp in enumerate(blocks):
                kind = "local" if bi % 2 == 0 else "local_shifted"
                tmap = transformer_block(tmap, bp, kind, self.config.window)
            if si < _N_STAGES - 1:
                w, b = self.merges[si]
                tmap = patch_merge(tmap, w, b)
        return tmap

    def branch_tokens(self, image, branch: str) -> Tensor:
        """Local stages + positional table for one branch; flat (T, 4C)."""
        tmap = self._lab_branch(image)
        pos = self.pos_template if branch == "template" else self.pos_search
        flat = reshape(tmap.tokens, (tmap.h * tmap.w, tmap.c))
        if flat.data.shape != pos.data.shape:
            raise ShapeError(
                f"{branch} tokens {flat.data.shape} do not match positional table {pos.data.shape}")
        return flat + pos

    def _fuse(self, t: Tensor, s: Tensor) -> tuple[Tensor, dict]:
        """Global and cross stages from post-positional tokens.

        Tracks the search-stream output of every fusion block; the final
        features concatenate the last two (the last two cross blocks in
        the default layout).
        """
        outs = [s]
        for bt, bs in zip(self.gab_t, self.gab_s):
            t = _flat_self_block(t, bt)
            s = _flat_self_block(s, bs)
            outs.append(s)
        extras = {"template_pre_cab": t, "search_pre_cab": s}
        for pt, ps in self.cab:
            t, s = _flat_cross_block(t, s, pt, ps)
            outs.append(s)
        extras["search_final"] = s
        f_out = concat(outs[-2:], axis=1)
        return f_out, extras

    def forward_features(self, template, search, st_vec=None) -> Tensor:
        """Run both branches; returns fused search features (T_s, 8C)."""
        f_out, _ = self._features(template, search, st_vec)
        return f_out

    def _features(self, template, search, st_vec=None) -> tuple[Tensor, dict]:
        t = self.branch_tokens(template, "template")
        s = self.branch_tokens(search, "search")
        if st_vec is not None:
            ctx = np.asarray(st_vec, dtype=np.float64).reshape(1, -1)
            if ctx.shape[1] != self.config.feature_dim:
                raise ShapeError(
                    f"context token width {ctx.shape[1]} != feature dim {self.config.feature_dim}")
            t = concat([t, Tensor(ctx)], axis=0)
        return self._fuse(t, s)

    def forward(self, template, search, st_vec=None, want_extras: bool = False):
        """Full model: images in, prediction maps out."""
        f_out, extras = self._features(template, search, st_vec)
        maps = mlp_head(f_out, self.head)
        if want_extras:
            return maps, extras
        return maps

    # -- checkpoints -------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    def load(self, path) -> None:
        state = load_checkpoint(path)
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(
                f"checkpoint does not match model (missing {sorted(missing)[:3]}..., "
                f"extra {sorted(extra)[:3]}...)" if (len(missing) > 3 or len(extra) > 3)
                else f"checkpoint does not match model (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, par in self.params.items():
            arr = state[name]
            if arr.shape != par.data.shape:
                raise ShapeError(f"checkpoint entry {name} has shape {arr.shape}, model wants {par.data.shape}")
            par.data[...] = arr
