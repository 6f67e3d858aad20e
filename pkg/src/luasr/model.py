"""The latent upscaler: input adapter, shared backbone, per-scale heads.

A 1×1 convolution adapts the codec's channel width to the embedding dim,
a stack of residual groups of windowed-attention blocks (pre-norm,
GELU MLP with expansion 2, no relative position bias, no window shift)
extracts features, and one 3×3 conv + pixel-shuffle head per supported
scale emits the enlarged latent.  The backbone runs once per input; only
the requested head is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from luasr.tensor import (
    ShapeError, Tensor, add, conv2d, gelu, layer_norm, pixel_shuffle,
    window_attention,
)

SUPPORTED_SCALES = (2, 4)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    embed_dim: int = 32
    num_groups: int = 2
    blocks_per_group: int = 2
    window: int = 4
    heads: int = 4
    scales: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be ≥ 1, got {self.in_channels}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        scales = tuple(sorted(set(self.scales)))
        if not scales:
            raise ValueError("scales must be non-empty")
        if any(s not in SUPPORTED_SCALES for s in scales):
            raise ValueError(f"scales must be a subset of {SUPPORTED_SCALES}, got {scales}")
        object.__setattr__(self, "scales", scales)
        for name in ("num_groups", "blocks_per_group", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be ≥ 1")


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within ±2 std (deterministic given rng)."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2.0 * std, 2.0 * std).astype(np.float32)


def _param(rng, shape, std=0.02) -> Tensor:
    return Tensor(_trunc_normal(rng, shape, std), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


class _Block:
    """Pre-norm window-attention block: x + attn(LN(x)); x + mlp(LN(x))."""

    def __init__(self, rng, dim: int):
        self.n1_gamma = _ones(dim)
        self.n1_beta = _zeros(dim)
        self.wq = _param(rng, (dim, dim))
        self.bq = _zeros(dim)
        self.wk = _param(rng, (dim, dim))
        self.bk = _zeros(dim)
        self.wv = _param(rng, (dim, dim))
        self.bv = _zeros(dim)
        self.wo = _param(rng, (dim, dim))
        self.bo = _zeros(dim)
        self.n2_gamma = _ones(dim)
        self.n2_beta = _zeros(dim)
        self.fc1_w = _param(rng, (2 * dim, dim, 1, 1))
        self.fc1_b = _zeros(2 * dim)
        self.fc2_w = _param(rng, (dim, 2 * dim, 1, 1))
        self.fc2_b = _zeros(dim)

    def named_params(self, prefix: str):
        yield f"{prefix}.norm1.gamma", self.n1_gamma
        yield f"{prefix}.norm1.beta", self.n1_beta
        for nm in ("q", "k", "v", "o"):
            yield f"{prefix}.attn.w{nm}", getattr(self, f"w{nm}")
            yield f"{prefix}.attn.b{nm}", getattr(self, f"b{nm}")
        yield f"{prefix}.norm2.gamma", self.n2_gamma
        yield f"{prefix}.norm2.beta", self.n2_beta
        yield f"{prefix}.mlp.fc1.weight", self.fc1_w
        yield f"{prefix}.mlp.fc1.bias", self.fc1_b
        yield f"{prefix}.mlp.fc2.weight", self.fc2_w
        yield f"{prefix}.mlp.fc2.bias", self.fc2_b

    def forward(self, x: Tensor, window: int, heads: int) -> Tensor:
        h = layer_norm(x, self.n1_gamma, self.n1_beta)
        h = window_attention(h, self.wq, self.wk, self.wv, self.wo,
                             self.bq, self.bk, self.bv, self.bo, window, heads)
        x = add(x, h)
        h = layer_norm(x, self.n2_gamma, self.n2_beta)
        h = conv2d(h, self.fc1_w, self.fc1_b)
        h = gelu(h)
        h = conv2d(h, self.fc2_w, self.fc2_b)
        return add(x, h)


@dataclass
class CostReport:
    """Spatial-position and multiply-accumulate accounting for one forward."""
    latent_positions: int
    pixel_positions: int
    ratio: int
    macs_per_layer: dict[str, int]

    @property
    def macs_total(self) -> int:
        return sum(self.macs_per_layer.values())


class LuaModel:
    """Multi-scale latent upscaler; construct via `build`."""

    def __init__(self, config: ModelConfig, adapter_w: Tensor, adapter_b: Tensor,
                 groups: list[list[_Block]], heads: dict[int, tuple[Tensor, Tensor]]):
        self.config = config
        self.adapter_w = adapter_w
        self.adapter_b = adapter_b
        self.groups = groups
        self.heads = heads

    # -- parameters -----------------------------------------------------

    def named_params(self):
        yield "adapter.weight", self.adapter_w
        yield "adapter.bias", self.adapter_b
        for gi, blocks in enumerate(self.groups):
            for bi, blk in enumerate(blocks):
                yield from blk.named_params(f"backbone.g{gi}.b{bi}")
        for scale in self.config.scales:
            w, b = self.heads[scale]
            yield f"head.x{scale}.weight", w
            yield f"head.x{scale}.bias", b

    def backbone_named_params(self):
        for name, p in self.named_params():
            if name.startswith("backbone."):
                yield name, p

    def head_named_params(self, scale: int):
        w, b = self.heads[scale]
        yield f"head.x{scale}.weight", w
        yield f"head.x{scale}.bias", b

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- forward ----------------------------------------------------------

    def features(self, z: Tensor) -> Tensor:
        """Adapter + shared backbone (residual over groups)."""
        if z.shape[-3] != self.config.in_channels:
            raise ShapeError(
                f"expected {self.config.in_channels} input channels, got {z.shape[-3]}")
        h, w = z.shape[-2], z.shape[-1]
        if h % self.config.window or w % self.config.window:
            raise ShapeError(
                f"latent extents {(h, w)} not divisible by window {self.config.window}")
        x0 = conv2d(z, self.adapter_w, self.adapter_b)
        return self._backbone(x0)

    def _backbone(self, x0: Tensor) -> Tensor:
        x = x0
        for blocks in self.groups:
            gin = x
            for blk in blocks:
                x = blk.forward(x, self.config.window, self.config.heads)
            x = add(gin, x)
        return add(x0, x)

    def apply_head(self, feats: Tensor, alpha: int) -> Tensor:
        if alpha not in self.config.scales:
            raise ValueError(f"scale {alpha} not in model scales {self.config.scales}")
        w, b = self.heads[alpha]
        return pixel_shuffle(conv2d(feats, w, b, pad=1), alpha)

    def upscale(self, z: Tensor, alpha: int, capture: dict | None = None) -> Tensor:
        """ẑ = head_α(backbone(adapter(z))); (C,h,w) -> (C, α·h, α·w)."""
        feats = self.features(z)
        if capture is not None:
            capture["features"] = feats.numpy().copy()
        return self.apply_head(feats, alpha)

    def upscale_multi(self, z: Tensor, alphas) -> dict[int, Tensor]:
        """All requested heads from a single backbone pass."""
        feats = self.features(z)
        return {a: self.apply_head(feats, a) for a in alphas}

    # -- cost model -------------------------------------------------------

    def spatial_cost(self, h: int, w: int, alpha: int, stride_s: int) -> CostReport:
        """Spatial-position counts of latent- vs pixel-space operation plus
        exact per-layer MACs for an (h, w) input at scale alpha.

        MAC convention: multiplies inside convolutions and attention
        matmuls; normalization, GELU, bias adds, and rearrangements
        count zero.
        """
        if min(h, w, alpha, stride_s) <= 0:
            raise ValueError("spatial_cost: all dimensions must be positive")
        cfg = self.config
        pos = h * w
        dim = cfg.embed_dim
        m2 = cfg.window * cfg.window
        macs: dict[str, int] = {}
        macs["adapter"] = pos * cfg.in_channels * dim
        per_block = (
            4 * pos * dim * dim       # q, k, v, proj projections
            + 2 * pos * m2 * dim      # scores and weighted values
            + 4 * pos * dim * dim     # MLP with expansion 2 (two 1×1 convs)
        )
        macs["backbone"] = per_block * cfg.num_groups * cfg.blocks_per_group
        macs[f"head.x{alpha}"] = pos * dim * (cfg.in_channels * alpha * alpha) * 9
        return CostReport(
            latent_positions=pos,
            pixel_positions=(stride_s * h) * (stride_s * w),
            ratio=stride_s * stride_s,
            macs_per_layer=macs,
        )


def build(config: ModelConfig, seed: int) -> LuaModel:
    """Deterministically initialize a model.

    All weights are truncated-normal (std 0.02); all biases, including the
    head convolutions', start at zero.  Two builds from the same seed are
    bit-identical.
    """
    rng = np.random.default_rng(seed)
    adapter_w = _param(rng, (config.embed_dim, config.in_channels, 1, 1))
    adapter_b = _zeros(config.embed_dim)
    groups = [[_Block(rng, config.embed_dim) for _ in range(config.blocks_per_group)]
              for _ in range(config.num_groups)]
    heads = {}
    for scale in config.scales:
        cout = config.in_channels * scale * scale
        heads[scale] = (_param(rng, (cout, config.embed_dim, 3, 3)), _zeros(cout))
    return LuaModel(config, adapter_w, adapter_b, groups, heads)


def swap_input_adapter(model: LuaModel, new_c: int, seed: int) -> LuaModel:
    """Re-target the model to a codec with `new_c` channels.

    The returned model shares every backbone parameter tensor with the
    original (same objects); the 1×1 adapter is freshly initialized for
    the new width and the per-scale head convolutions are rebuilt to emit
    new_c·α² channels.
    """
    if new_c < 1:
        raise ValueError(f"new_c must be ≥ 1, got {new_c}")
    cfg = replace(model.config, in_channels=new_c)
    rng = np.random.default_rng(seed)
    adapter_w = _param(rng, (cfg.embed_dim, new_c, 1, 1))
    adapter_b = _zeros(cfg.embed_dim)
    heads = {}
    for scale in cfg.scales:
        cout = new_c * scale * scale
        heads[scale] = (_param(rng, (cout, cfg.embed_dim, 3, 3)), _zeros(cout))
    return LuaModel(cfg, adapter_w, adapter_b, model.groups, heads)
