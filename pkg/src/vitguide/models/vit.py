"""DeiT-style Vision Transformer student with per-block feature and attention taps."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..autodiff import Tensor, ops


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 12
    heads: int = 3
    embed_dim: int = 96
    mlp_ratio: float = 4.0
    num_classes: int = 10
    use_class_token: bool = True
    in_chans: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid(self) -> tuple:
        n = self.image_size // self.patch_size
        return (n, n)

    @property
    def num_tokens(self) -> int:
        h, w = self.grid
        return h * w + int(self.use_class_token)

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenFeature:
    """Token sequence after one block: ``tokens`` is (B, L, C)."""

    tokens: Tensor
    grid: tuple
    block_index: int
    has_class_token: bool

    def __post_init__(self):
        expected = self.grid[0] * self.grid[1] + int(self.has_class_token)
        if self.tokens.shape[1] != expected:
            raise ValueError(f"{self.tokens.shape[1]} tokens do not fit grid {self.grid} (class token: {self.has_class_token})")


@dataclass
class AttentionRecord:
    """Softmaxed attention of one block, shape (B, heads, L, L)."""

    block_index: int
    attn: np.ndarray

    @property
    def head_mean(self) -> np.ndarray:
        return self.attn.mean(axis=1)


@dataclass
class VitOutput:
    logits: Tensor
    taps: list
    attn: list


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std).astype(dtype)


def init_vit(config: VitConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Fresh student parameters keyed by dotted names."""
    c, hid = config.embed_dim, config.hidden_dim
    p = config.patch_size
    params: dict = {}

    def add(name, value):
        params[name] = Tensor(value, requires_grad=True, name=name)

    add("patch_embed.weight", _trunc_normal(rng, (p * p * config.in_chans, c), 0.02, dtype))
    add("patch_embed.bias", np.zeros(c, dtype))
    if config.use_class_token:
        add("cls_token", _trunc_normal(rng, (1, 1, c), 0.02, dtype))
    add("pos_embed", _trunc_normal(rng, (1, config.num_tokens, c), 0.02, dtype))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        add(pre + "norm1.weight", np.ones(c, dtype))
        add(pre + "norm1.bias", np.zeros(c, dtype))
        add(pre + "attn.qkv.weight", _trunc_normal(rng, (c, 3 * c), 0.02, dtype))
        add(pre + "attn.qkv.bias", np.zeros(3 * c, dtype))
        add(pre + "attn.proj.weight", _trunc_normal(rng, (c, c), 0.02, dtype))
        add(pre + "attn.proj.bias", np.zeros(c, dtype))
        add(pre + "norm2.weight", np.ones(c, dtype))
        add(pre + "norm2.bias", np.zeros(c, dtype))
        add(pre + "mlp.fc1.weight", _trunc_normal(rng, (c, hid), 0.02, dtype))
        add(pre + "mlp.fc1.bias", np.zeros(hid, dtype))
        add(pre + "mlp.fc2.weight", _trunc_normal(rng, (hid, c), 0.02, dtype))
        add(pre + "mlp.fc2.bias", np.zeros(c, dtype))
    add("norm.weight", np.ones(c, dtype))
    add("norm.bias", np.zeros(c, dtype))
    add("head.weight", _trunc_normal(rng, (c, config.num_classes), 0.02, dtype))
    add("head.bias", np.zeros(config.num_classes, dtype))
    return params


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return ops.add(ops.matmul(x, params[name + ".weight"]), params[name + ".bias"])


def _attention(x: Tensor, params: dict, pre: str, heads: int):
    out, attn = ops.multi_head_attention(_linear(x, params, pre + "qkv"), heads)
    return _linear(out, params, pre + "proj"), attn


def patchify(images: Tensor, patch: int) -> Tensor:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), row-major over the patch grid."""
    b, h, w, ch = images.shape
    x = ops.reshape(images, (b, h // patch, patch, w // patch, patch, ch))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, (h // patch) * (w // patch), patch * patch * ch))


def vit_forward(config: VitConfig, params: dict, images, record_attention: bool = True) -> VitOutput:
    """Run the student on (B, H, W, 3) images.

    Returns logits, the token sequence after every block (``taps[i-1]`` is the
    output of block ``i``), and the per-block attention matrices.
    """
    images = images if isinstance(images, Tensor) else Tensor(images)
    if images.ndim != 4 or images.shape[1:] != (config.image_size, config.image_size, config.in_chans):
        raise ValueError(
            f"student expects (B, {config.image_size}, {config.image_size}, {config.in_chans}) images, got {images.shape}"
        )
    b = images.shape[0]
    c = config.embed_dim
    x = _linear(patchify(images, config.patch_size), params, "patch_embed")
    if config.use_class_token:
        cls = ops.add(Tensor(np.zeros((b, 1, c), dtype=x.dtype)), params["cls_token"])
        x = ops.concat([cls, x], axis=1)
    x = ops.add(x, params["pos_embed"])

    taps, records = [], []
    for i in range(config.depth):
        pre = f"blocks.{i}."
        h = ops.layernorm(x, params[pre + "norm1.weight"], params[pre + "norm1.bias"])
        attn_out, attn = _attention(h, params, pre + "attn.", config.heads)
        x = ops.add(x, attn_out)
        h = ops.layernorm(x, params[pre + "norm2.weight"], params[pre + "norm2.bias"])
        h = _linear(ops.gelu(_linear(h, params, pre + "mlp.fc1")), params, pre + "mlp.fc2")
        x = ops.add(x, h)
        taps.append(TokenFeature(x, config.grid, i + 1, config.use_class_token))
        if record_attention:
            records.append(AttentionRecord(i + 1, attn))

    x = ops.layernorm(x, params["norm.weight"], params["norm.bias"])
    pooled = x[:, 0, :] if config.use_class_token else ops.mean(x, axis=1)
    logits = _linear(pooled, params, "head")
    return VitOutput(logits, taps, records)


def student_parameters(params: dict, names: Optional[list] = None) -> list:
    return [params[k] for k in (names or params)]
