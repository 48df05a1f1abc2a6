"""Frozen plain-ViT backbone with trainable meta tokens and LayerNorm tuning.

The sequence layout per block is [meta tokens | (cls) | patch tokens].
Meta tokens are free trainable vectors prepended outside the positional-
embedding path, mirroring class-token treatment. Every block's residual
output is split into its meta and patch parts and harvested as a tap for
the feature bridge; the cls token (when present) belongs to neither part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParamSet, trunc_normal
from .tensor import Tensor, ops


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 8
    num_heads: int = 4
    mlp_ratio: float = 4.0
    use_cls_token: bool = False
    num_meta_tokens: int = 1
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.depth % 4 != 0:
            raise ConfigError(f"depth must be divisible by 4, got {self.depth}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_meta_tokens < 0:
            raise ConfigError("num_meta_tokens must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_meta_tokens + int(self.use_cls_token) + self.num_patches


class IntermediateTap(NamedTuple):
    """Per-block output split: meta [B,N,d] and patch [B,g*g,d] parts."""

    meta: Tensor
    patch: Tensor


class Backbone:
    def __init__(self, config: ViTConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.params = ParamSet()
        c = config
        std = c.init_std
        d = c.embed_dim
        hidden = int(d * c.mlp_ratio)

        def frozen(name, shape):
            return self.params.add(name, trunc_normal(rng, shape, std, dtype), trainable=False)

        frozen("backbone.patch_embed.weight", (3 * c.patch_size**2, d))
        self.params.add(
            "backbone.patch_embed.bias", np.zeros(d, dtype=dtype), trainable=False
        )
        pos_len = c.num_patches + int(c.use_cls_token)
        frozen("backbone.pos_embed", (pos_len, d))
        if c.use_cls_token:
            frozen("backbone.cls_token", (1, d))
        for i in range(c.depth):
            blk = f"backbone.blocks.{i:02d}"
            for ln in ("ln1", "ln2"):
                self.params.add(f"{blk}.{ln}.gamma", np.ones(d, dtype=dtype), trainable=True)
                self.params.add(f"{blk}.{ln}.beta", np.zeros(d, dtype=dtype), trainable=True)
            frozen(f"{blk}.attn.qkv.weight", (d, 3 * d))
            self.params.add(f"{blk}.attn.qkv.bias", np.zeros(3 * d, dtype=dtype), trainable=False)
            frozen(f"{blk}.attn.proj.weight", (d, d))
            self.params.add(f"{blk}.attn.proj.bias", np.zeros(d, dtype=dtype), trainable=False)
            frozen(f"{blk}.mlp.fc1.weight", (d, hidden))
            self.params.add(f"{blk}.mlp.fc1.bias", np.zeros(hidden, dtype=dtype), trainable=False)
            frozen(f"{blk}.mlp.fc2.weight", (hidden, d))
            self.params.add(f"{blk}.mlp.fc2.bias", np.zeros(d, dtype=dtype), trainable=False)
        self.params.add("backbone.ln_final.gamma", np.ones(d, dtype=dtype), trainable=True)
        self.params.add("backbone.ln_final.beta", np.zeros(d, dtype=dtype), trainable=True)
        if c.num_meta_tokens > 0:
            self.params.add(
                "backbone.meta_tokens",
                trunc_normal(rng, (c.num_meta_tokens, d), std, dtype),
                trainable=True,
            )

    # -- freeze policy ------------------------------------------------------

    def ln_param_names(self) -> list[str]:
        names = [n for n in self.params.names() if ".ln1." in n or ".ln2." in n]
        names += ["backbone.ln_final.gamma", "backbone.ln_final.beta"]
        return sorted(names)

    def set_freeze_policy(self, ln_tuning: bool = True) -> list[str]:
        """Mark exactly {LN gamma/beta, meta tokens} trainable; freeze the rest.

        With ln_tuning off the LN parameters freeze too. Returns the sorted
        manifest of trainable names for audit.
        """
        ln_names = set(self.ln_param_names())
        for name, p in self.params.items():
            if name == "backbone.meta_tokens":
                p.set_trainable(True)
            elif name in ln_names:
                p.set_trainable(ln_tuning)
            else:
                p.set_trainable(False)
        return self.params.trainable_names()

    # -- forward ------------------------------------------------------------

    def patch_embed(self, images: Tensor) -> Tensor:
        """[B,3,H,W] -> [B, g*g, d] patch projection plus positional embedding."""
        c = self.config
        b = images.shape[0]
        if images.shape[1:] != (3, c.image_size, c.image_size):
            raise ShapeError(
                f"expected images [B,3,{c.image_size},{c.image_size}], got {images.shape}"
            )
        g, p = c.grid, c.patch_size
        x = ops.reshape(images, (b, 3, g, p, g, p))
        x = ops.transpose(x, (0, 2, 4, 1, 3, 5))  # [B,g,g,3,p,p]
        x = ops.reshape(x, (b, g * g, 3 * p * p))
        tokens = ops.linear(
            x,
            self.params["backbone.patch_embed.weight"].value,
            self.params["backbone.patch_embed.bias"].value,
        )
        pos = self.params["backbone.pos_embed"].value
        if c.use_cls_token:
            pos = ops.slice_axis(pos, 0, 1, pos.shape[0])
        return ops.add(tokens, pos)

    def _attention(self, x: Tensor, block: str) -> Tensor:
        c = self.config
        b, t, d = x.shape
        h = c.num_heads
        dh = d // h
        qkv = ops.linear(
            x,
            self.params[f"{block}.attn.qkv.weight"].value,
            self.params[f"{block}.attn.qkv.bias"].value,
        )
        qkv = ops.reshape(qkv, (b, t, 3, h, dh))
        parts = []
        for i in range(3):
            part = ops.slice_axis(qkv, 2, i, i + 1)
            part = ops.reshape(part, (b, t, h, dh))
            parts.append(ops.transpose(part, (0, 2, 1, 3)))  # [B,h,T,dh]
        q, k, v = parts
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2)))
        scores = ops.mul(scores, 1.0 / math.sqrt(dh))
        attn = ops.softmax(scores, axis=-1)
        ctx = ops.matmul(attn, v)  # [B,h,T,dh]
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return ops.linear(
            ctx,
            self.params[f"{block}.attn.proj.weight"].value,
            self.params[f"{block}.attn.proj.bias"].value,
        )

    def _mlp(self, x: Tensor, block: str) -> Tensor:
        h = ops.linear(
            x,
            self.params[f"{block}.mlp.fc1.weight"].value,
            self.params[f"{block}.mlp.fc1.bias"].value,
        )
        h = ops.gelu(h)
        return ops.linear(
            h,
            self.params[f"{block}.mlp.fc2.weight"].value,
            self.params[f"{block}.mlp.fc2.bias"].value,
        )

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return ops.layer_norm(
            x,
            self.params[f"{name}.gamma"].value,
            self.params[f"{name}.beta"].value,
            self.config.ln_eps,
        )

    def forward(self, images: Tensor) -> tuple[list[IntermediateTap], Tensor]:
        """Run all blocks; return per-block taps and the final-LN token sequence."""
        c = self.config
        b = images.shape[0]
        n = c.num_meta_tokens
        cls_off = int(c.use_cls_token)
        tokens = self.patch_embed(images)
        seq = [tokens]
        if c.use_cls_token:
            cls = ops.add(
                self.params["backbone.cls_token"].value,
                ops.slice_axis(self.params["backbone.pos_embed"].value, 0, 0, 1),
            )
            seq.insert(0, ops.broadcast_to(ops.reshape(cls, (1, 1, c.embed_dim)), (b, 1, c.embed_dim)))
        if n > 0:
            meta = self.params["backbone.meta_tokens"].value
            meta = ops.broadcast_to(ops.reshape(meta, (1, n, c.embed_dim)), (b, n, c.embed_dim))
            seq.insert(0, meta)
        x = seq[0] if len(seq) == 1 else ops.concat(seq, axis=1)
        taps: list[IntermediateTap] = []
        for i in range(c.depth):
            blk = f"backbone.blocks.{i:02d}"
            x = ops.add(x, self._attention(self._ln(x, f"{blk}.ln1"), blk))
            x = ops.add(x, self._mlp(self._ln(x, f"{blk}.ln2"), blk))
            meta_out = ops.slice_axis(x, 1, 0, n)
            patch_out = ops.slice_axis(x, 1, n + cls_off, x.shape[1])
            taps.append(IntermediateTap(meta=meta_out, patch=patch_out))
        final = self._ln(x, "backbone.ln_final")
        return taps, final

    def patch_tokens_of(self, sequence: Tensor) -> Tensor:
        """Strip meta (and cls) tokens from a full sequence."""
        start = self.config.num_meta_tokens + int(self.config.use_cls_token)
        return ops.slice_axis(sequence, 1, start, sequence.shape[1])


def load_backbone_weights(backbone: Backbone, arrays: dict[str, np.ndarray]) -> list[str]:
    """Import externally saved backbone tensors (checkpoint-format entries).

    Only names starting with ``backbone.`` are considered; shapes must match.
    Returns the imported names.
    """
    subset = {k: v for k, v in arrays.items() if k.startswith("backbone.")}
    if not subset:
        raise ConfigError("no backbone.* entries found in the provided weight file")
    return backbone.params.load(subset)
