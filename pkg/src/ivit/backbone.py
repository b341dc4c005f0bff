"""Transformer encoder backbone.

Patch embedding, a learnable CLS token, learnable positional embeddings for
CLS + patches only, and a stack of pre-norm blocks (LN -> attention ->
residual, LN -> MLP -> residual) with a final layer norm. Width and depth
are configurable; dim 768 / depth 12 / heads 12 is the ViT-B point.

Prompt tokens appended after the patches never receive positional
embeddings, which is what makes the encoder permutation-equivariant over
the prompt segment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int
    patch_size: int
    channels: int
    dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0
    attn_dropout: float = 0.0  # applied to attention rows in training mode only

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads != 0:
            raise ShapeError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not 0.0 <= self.attn_dropout < 1.0:
            raise ShapeError(f"attn_dropout must be in [0, 1), got {self.attn_dropout}")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class TokenSequence:
    """[CLS | patches | prompts] token block plus its segment layout."""

    tokens: Tensor  # [B, T, dim]
    n_patches: int
    n_prompts: int

    def __post_init__(self):
        if self.tokens.ndim != 3 or self.tokens.shape[1] != 1 + self.n_patches + self.n_prompts:
            raise ShapeError(
                f"token sequence shape {self.tokens.shape} does not match layout "
                f"(1 cls + {self.n_patches} patches + {self.n_prompts} prompts)"
            )

    @property
    def length(self) -> int:
        return 1 + self.n_patches + self.n_prompts


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype, std: float = INIT_STD):
        self.weight = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        yield "bias", self.bias


class LayerNorm:
    def __init__(self, dim: int, dtype):
        self.gain = Tensor(np.ones(dim), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(dim), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "gain", self.gain
        yield "bias", self.bias


class MultiHeadAttention:
    """Full bidirectional self-attention over every token (no masking)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype,
                 dropout: float = 0.0):
        self.heads = heads
        self.head_dim = dim // heads
        self.dropout = dropout
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        # filled with the [B, H, T, T] attention rows of the last forward
        # when capture is on; tests use it, eval workers leave it off
        self.capture_attn = False
        self.last_attn: np.ndarray | None = None

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        x = T.reshape(x, (b, t, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))  # [B, H, T, hd]

    def __call__(self, x: Tensor, dropout_rng: np.random.Generator | None = None) -> Tensor:
        b, t, d = x.shape
        q = self._split_heads(self.wq(x), b, t)
        k = self._split_heads(self.wk(x), b, t)
        v = self._split_heads(self.wv(x), b, t)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        if self.capture_attn:
            self.last_attn = attn.data
        if self.dropout > 0.0 and dropout_rng is not None:
            keep = (dropout_rng.random(attn.shape) >= self.dropout) / (1.0 - self.dropout)
            attn = T.mul_const(attn, keep.astype(attn.dtype))
        out = T.matmul(attn, v)  # [B, H, T, hd]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.wo(out)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for name, p in layer.named_parameters():
                yield f"{prefix}.{name}", p


class Block:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype):
        hidden = int(cfg.dim * cfg.mlp_ratio)
        self.ln1 = LayerNorm(cfg.dim, dtype)
        self.attn = MultiHeadAttention(cfg.dim, cfg.heads, rng, dtype, dropout=cfg.attn_dropout)
        self.ln2 = LayerNorm(cfg.dim, dtype)
        self.fc1 = Linear(cfg.dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, cfg.dim, rng, dtype)

    def __call__(self, x: Tensor, dropout_rng: np.random.Generator | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), dropout_rng=dropout_rng))
        x = T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))
        return x

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, part in (("ln1", self.ln1), ("attn", self.attn), ("ln2", self.ln2),
                             ("fc1", self.fc1), ("fc2", self.fc2)):
            for name, p in part.named_parameters():
                yield f"{prefix}.{name}", p


class Backbone:
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.patch_proj = Linear(cfg.patch_dim, cfg.dim, rng, dtype)
        self.cls_token = Tensor(rng.normal(0.0, INIT_STD, size=(1, cfg.dim)), requires_grad=True, dtype=dtype)
        self.pos_embed = Tensor(
            rng.normal(0.0, INIT_STD, size=(1 + cfg.n_patches, cfg.dim)), requires_grad=True, dtype=dtype
        )
        self.blocks = [Block(cfg, rng, dtype) for _ in range(cfg.depth)]
        self.final_ln = LayerNorm(cfg.dim, dtype)
        # only consulted when attn_dropout > 0 and a training rng is supplied
        self.training = False
        self.dropout_rng: np.random.Generator | None = None

    def patch_embed(self, images: Tensor) -> Tensor:
        """[B, C, H, W] -> [B, N, dim]: non-overlapping patches, flattened and projected."""
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"images shape {images.shape} does not match configured "
                f"[B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}]"
            )
        b = images.shape[0]
        side = cfg.image_size // cfg.patch_size
        x = T.reshape(images, (b, cfg.channels, side, cfg.patch_size, side, cfg.patch_size))
        x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # [B, hp, wp, C, ps, ps]
        x = T.reshape(x, (b, cfg.n_patches, cfg.patch_dim))
        return self.patch_proj(x)

    def add_positional(self, cls: Tensor, patches: Tensor) -> Tensor:
        """Concat [CLS | patches] and add the positional table. Prompts never come here."""
        if patches.shape[1] != self.cfg.n_patches:
            raise ShapeError(
                f"got {patches.shape[1]} patch tokens, positional table expects {self.cfg.n_patches}"
            )
        seq = T.concat([cls, patches], axis=1)
        return T.add_bias(seq, self.pos_embed)

    def encoder_forward(self, seq: TokenSequence) -> TokenSequence:
        if seq.tokens.shape[2] != self.cfg.dim:
            raise ShapeError(f"token dim {seq.tokens.shape[2]} != configured dim {self.cfg.dim}")
        rng = self.dropout_rng if self.training else None
        x = seq.tokens
        for block in self.blocks:
            x = block(x, dropout_rng=rng)
        x = self.final_ln(x)
        return TokenSequence(x, seq.n_patches, seq.n_prompts)

    def expand_cls(self, batch: int) -> Tensor:
        return broadcast_cls(self.cls_token, batch)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for name, p in self.patch_proj.named_parameters():
            yield f"patch_embed.{name}", p
        for i, block in enumerate(self.blocks):
            for name, p in block.named_parameters():
                yield f"blocks.{i}.{name}", p
        for name, p in self.final_ln.named_parameters():
            yield f"final_ln.{name}", p


def broadcast_cls(cls_token: Tensor, batch: int) -> Tensor:
    """[1, dim] CLS parameter -> [B, 1, dim]."""
    return T.broadcast_batch(cls_token, batch)
