"""Desk-scale plain vision transformer with attention-map capture."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


INPUT_NORMS = ("image", "none")
STANDARDIZE_EPS = 1e-4


class ConfigError(ValueError):
    pass


class NonFiniteActivationError(ad.NonFiniteError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    num_classes: int = 4
    use_class_token: bool = False
    attention_block: int | None = None  # 1-based; None means the last block
    mlp_ratio: int = 4
    ln_eps: float = 1e-6
    input_norm: str = "image"  # "image": per-image, per-channel standardisation; "none": raw pixels

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.input_norm not in INPUT_NORMS:
            raise ConfigError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        if not 1 <= self.attn_block <= self.depth:
            raise ConfigError(f"attention_block {self.attention_block} outside [1, {self.depth}]")

    @property
    def attn_block(self) -> int:
        return self.depth if self.attention_block is None else self.attention_block

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def num_tokens(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def seq_len(self) -> int:
        return self.num_tokens + int(self.use_class_token)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; this is the checkpoint naming contract."""
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
    }
    if cfg.use_class_token:
        shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (cfg.seq_len, d)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "norm1.weight": (d,), p + "norm1.bias": (d,),
            p + "attn.qkv.weight": (d, 3 * d), p + "attn.qv.bias": (2 * d,),
            p + "attn.proj.weight": (d, d), p + "attn.proj.bias": (d,),
            p + "norm2.weight": (d,), p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (d, hidden), p + "mlp.fc1.bias": (hidden,),
            p + "mlp.fc2.weight": (hidden, d), p + "mlp.fc2.bias": (d,),
        })
    shapes.update({
        "norm.weight": (d,), "norm.bias": (d,),
        "head.weight": (d, cfg.num_classes), "head.bias": (cfg.num_classes,),
    })
    return shapes


def parameter_tensor_count(cfg: ModelConfig) -> int:
    # patch embed (2) + pos (1) + cls (0/1) + 12 per block + final norm (2) + head (2)
    return 7 + int(cfg.use_class_token) + 12 * cfg.depth


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form scalar parameter count.

    Per block: two norms 4d, qkv 3d² plus 2d query/value bias, proj d²+d,
    fc1 r·d²+r·d, fc2 r·d²+d, i.e. (4 + 2r)·d² + (8 + r)·d with r the MLP
    ratio. Outside the blocks:
    patch projection P²C·d + d, positional table L·d (L = N or N+1), the class
    token d, the final norm 2d and the head d·C + C.
    """
    d, r = cfg.embed_dim, cfg.mlp_ratio
    total = cfg.patch_dim * d + d + cfg.seq_len * d + (d if cfg.use_class_token else 0)
    total += cfg.depth * ((4 + 2 * r) * d * d + (8 + r) * d)
    total += 2 * d + d * cfg.num_classes + cfg.num_classes
    return total


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32,
                std: float | None = None, zero_head: bool = True) -> dict[str, Tensor]:
    """Zero biases and head, unit norm gains, truncated-normal (std 0.02)
    positional embedding and class token, Xavier-uniform weight matrices.

    Passing ``std`` draws every weight matrix from a truncated normal with
    that std instead.
    """
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("head.") and zero_head or leaf == "bias":
            value = np.zeros(shape)
        elif "norm" in name and leaf == "weight":
            value = np.ones(shape)
        elif name in ("pos_embed", "cls_token"):
            value = _trunc_normal(rng, shape, 0.02 if std is None else std)
        elif std is not None:
            value = _trunc_normal(rng, shape, std)
        elif name.endswith("qkv.weight"):
            # three d x d projections stored side by side
            value = _xavier_uniform(rng, shape, shape[0], shape[1] // 3)
        else:
            value = _xavier_uniform(rng, shape, shape[0], shape[1])
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


# -- patches -----------------------------------------------------------

def standardize_images(images: np.ndarray, eps: float = STANDARDIZE_EPS) -> np.ndarray:
    """Zero mean, unit variance per image and channel; constant channels map to 0.

    Shape colours are random, so raw intensities say nothing about the class;
    removing each image's own colour statistics leaves the outline to learn.
    """
    mean = images.mean(axis=(-2, -1), keepdims=True)
    var = images.var(axis=(-2, -1), keepdims=True)
    return ((images - mean) / np.sqrt(var + eps)).astype(images.dtype, copy=False)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(..., C, H, W) -> (..., N, P*P*C), row-major over the patch grid.

    Each row is the patch flattened channel-last (p_row, p_col, channel).
    """
    *lead, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ad.ShapeError(f"image {h}x{w} not divisible into {p}x{p} patches")
    x = images.reshape(*lead, c, h // p, p, w // p, p)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n + 2, n + 4, n)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int, rows: int, cols: int) -> np.ndarray:
    *lead, _, _ = tokens.shape
    p, n = patch_size, len(lead)
    x = tokens.reshape(*lead, rows, cols, p, p, channels)
    x = x.transpose(*range(n), n + 4, n, n + 2, n + 1, n + 3)
    return x.reshape(*lead, channels, rows * p, cols * p)


# -- model -------------------------------------------------------------

@dataclass
class ForwardOutput:
    tokens: Tensor  # (B, N, d) image tokens after the final norm
    class_token: Tensor | None  # (B, d)
    logits: Tensor  # (B, C)
    attention: dict[int, np.ndarray]  # 1-based block -> (B, heads, N', N')

    @property
    def probs(self) -> np.ndarray:
        return ad._softmax_np(self.logits.data.astype(np.float64))


class VisionTransformer:
    """Pre-norm ViT; prediction from the class token or from mean pooling."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(cfg)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise ConfigError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = params
        self.forward_calls = 0

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32, **kw) -> "VisionTransformer":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), dtype=dtype, **kw))

    @property
    def dtype(self):
        return self.params["patch_embed.weight"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def classify(self, features: Tensor) -> Tensor:
        """The shared classifier head F: (..., d) -> (..., C) logits."""
        return ad.linear(features, self.params["head.weight"], self.params["head.bias"])

    def _block(self, x: Tensor, i: int, keep_attention: bool):
        cfg, p = self.cfg, self.params
        pre = f"blocks.{i}."
        b, n, d = x.shape
        heads, hd = cfg.num_heads, cfg.head_dim

        h = ad.layer_norm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"], cfg.ln_eps)
        # no key bias: it shifts each query's scores by a constant that softmax cancels
        qv = p[pre + "attn.qv.bias"]
        bias = ad.concat([qv[:d], Tensor(np.zeros(d, dtype=qv.dtype)), qv[d:]])
        qkv = ad.linear(h, p[pre + "attn.qkv.weight"], bias)
        qkv = qkv.reshape(b, n, 3, heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores)
        o = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = x + ad.linear(o, p[pre + "attn.proj.weight"], p[pre + "attn.proj.bias"])

        h = ad.layer_norm(x, p[pre + "norm2.weight"], p[pre + "norm2.bias"], cfg.ln_eps)
        h = ad.gelu(ad.linear(h, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"]))
        x = x + ad.linear(h, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"])
        return x, (attn.data if keep_attention else None)

    def forward(self, images, record_blocks: Iterable[int] | None = None) -> ForwardOutput:
        """Run a batch (B, C, H, W). Attention maps are kept for ``record_blocks``
        (1-based) plus the configured attention-score block."""
        cfg, p = self.cfg, self.params
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ad.ShapeError(f"expected batch of shape (B, {expected}), got {images.shape}")
        self.forward_calls += 1
        keep = {cfg.attn_block} | set(record_blocks or ())
        bsz = images.shape[0]

        images = images.astype(self.dtype, copy=False)
        if cfg.input_norm == "image":
            images = standardize_images(images)
        patches = Tensor(patchify(images, cfg.patch_size))
        x = ad.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
        if cfg.use_class_token:
            cls = Tensor(np.zeros((bsz, 1, cfg.embed_dim), dtype=self.dtype)) + p["cls_token"]
            x = ad.concat([cls, x], axis=1)
        x = x + p["pos_embed"]

        attention: dict[int, np.ndarray] = {}
        for i in range(cfg.depth):
            x, attn = self._block(x, i, (i + 1) in keep)
            if attn is not None:
                attention[i + 1] = attn
            if not ad._all_finite(x.data):
                raise NonFiniteActivationError(f"non-finite activation after block {i + 1}")

        x = ad.layer_norm(x, p["norm.weight"], p["norm.bias"], cfg.ln_eps)
        if cfg.use_class_token:
            cls_out = x[:, 0, :]
            tokens = x[:, 1:, :]
            pooled = cls_out
        else:
            cls_out = None
            tokens = x
            pooled = tokens.mean(axis=1)
        return ForwardOutput(tokens, cls_out, self.classify(pooled), attention)

    __call__ = forward


# -- image attention score --------------------------------------------

@dataclass
class AttentionScoreGrid:
    alpha: np.ndarray  # (rows, cols)
    source_block: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape


def image_attention_scores(attention: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Batched scores: (B, heads, N', N') -> (B, rows, cols).

    Heads are averaged, then query rows. With a class token the class row and
    column are dropped first and the result is not renormalised.
    """
    a = np.asarray(attention, dtype=np.float64)
    if cfg.use_class_token:
        a = a[..., 1:, 1:]
    rows, cols = cfg.grid
    if a.shape[-1] != rows * cols:
        raise ad.ShapeError(f"attention has {a.shape[-1]} image tokens, grid needs {rows * cols}")
    alpha = a.mean(axis=-3).mean(axis=-2)
    return alpha.reshape(*alpha.shape[:-1], rows, cols)


def image_attention_score(attention: dict[int, np.ndarray] | np.ndarray, cfg: ModelConfig,
                          block: int | None = None) -> AttentionScoreGrid:
    """Score grid for one image from its per-block record {block: (heads, N', N')}."""
    block = cfg.attn_block if block is None else block
    if isinstance(attention, dict):
        if block not in attention:
            raise KeyError(f"attention record has no block {block} (have {sorted(attention)})")
        attention = attention[block]
    return AttentionScoreGrid(image_attention_scores(attention, cfg), block)
