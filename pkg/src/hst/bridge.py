"""Adaptive feature bridge: per-stage linear projection + dual-branch split.

Each backbone tap is projected from the backbone width to its stage width,
then separated into (a) meta-global tokens, the projected meta tokens
concatenated with the mean of the projected patch tokens, and (b) a
fine-grained spatial map, the projected patch tokens reshaped to the token
grid and bilinearly resized to the stage resolution. With weight sharing
on, the bridge owns one projection per stage and every block in that stage
references the same object; with sharing off each block owns its own.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .backbone import IntermediateTap
from .errors import ConfigError, ShapeError
from .params import ParamSet, trunc_normal
from .tensor import Tensor, ops

NUM_STAGES = 4
STAGE_STRIDES = (4, 8, 16, 32)


class BridgeOutput(NamedTuple):
    meta_global: Tensor  # [B, M, d_j]
    fine_grained: Tensor | None  # [B, d_j, H_j, W_j]


def stage_of_block(block_index: int, depth: int) -> int:
    """Stage (0-based) owning a given backbone block; blocks split evenly."""
    return block_index // (depth // NUM_STAGES)


class Bridge:
    def __init__(
        self,
        embed_dim: int,
        stage_dims: list[int],
        depth: int,
        image_size: int,
        rng: np.random.Generator,
        weight_sharing: bool = True,
        global_token: bool = True,
        init_std: float = 0.02,
        dtype=np.float32,
    ):
        if len(stage_dims) != NUM_STAGES:
            raise ConfigError(f"expected {NUM_STAGES} stage dims, got {len(stage_dims)}")
        if depth % NUM_STAGES != 0:
            raise ConfigError(f"depth {depth} not divisible by {NUM_STAGES} stages")
        self.embed_dim = embed_dim
        self.stage_dims = list(stage_dims)
        self.depth = depth
        self.image_size = image_size
        self.weight_sharing = weight_sharing
        self.global_token = global_token
        self.params = ParamSet()
        if weight_sharing:
            for j, dj in enumerate(stage_dims):
                self.params.add(
                    f"bridge.stages.{j}.weight",
                    trunc_normal(rng, (embed_dim, dj), init_std, dtype),
                    trainable=True,
                )
                self.params.add(f"bridge.stages.{j}.bias", np.zeros(dj, dtype=dtype), trainable=True)
        else:
            for i in range(depth):
                dj = stage_dims[stage_of_block(i, depth)]
                self.params.add(
                    f"bridge.blocks.{i:02d}.weight",
                    trunc_normal(rng, (embed_dim, dj), init_std, dtype),
                    trainable=True,
                )
                self.params.add(
                    f"bridge.blocks.{i:02d}.bias", np.zeros(dj, dtype=dtype), trainable=True
                )

    def shared_projection_count(self) -> int:
        """Number of distinct projection maps: 4 shared, or one per block."""
        return NUM_STAGES if self.weight_sharing else self.depth

    def projection_for_block(self, block_index: int) -> tuple[Tensor, Tensor]:
        if self.weight_sharing:
            j = stage_of_block(block_index, self.depth)
            return (
                self.params[f"bridge.stages.{j}.weight"].value,
                self.params[f"bridge.stages.{j}.bias"].value,
            )
        return (
            self.params[f"bridge.blocks.{block_index:02d}.weight"].value,
            self.params[f"bridge.blocks.{block_index:02d}.bias"].value,
        )

    def stage_resolution(self, stage: int) -> tuple[int, int]:
        side = self.image_size // STAGE_STRIDES[stage]
        return side, side

    def afb(self, tap: IntermediateTap, block_index: int, fine_grained: bool = True) -> BridgeOutput:
        """Project one tap and separate it into the two injection branches."""
        w, b = self.projection_for_block(block_index)
        stage = stage_of_block(block_index, self.depth)
        batch, num_patch, _ = tap.patch.shape
        grid = math.isqrt(num_patch)
        if grid * grid != num_patch:
            raise ShapeError(f"patch token count {num_patch} is not a perfect square")

        projected_patch = ops.linear(tap.patch, w, b)  # [B, g*g, d_j]
        branches = []
        if tap.meta.shape[1] > 0:
            branches.append(ops.linear(tap.meta, w, b))
        if self.global_token:
            branches.append(ops.mean(projected_patch, axis=1, keepdims=True))
        if not branches:
            raise ConfigError(
                "meta-global branch is empty: need num_meta_tokens >= 1 or the global token"
            )
        meta_global = branches[0] if len(branches) == 1 else ops.concat(branches, axis=1)

        fg = None
        if fine_grained:
            dj = self.stage_dims[stage]
            grid_map = ops.reshape(projected_patch, (batch, grid, grid, dj))
            grid_map = ops.transpose(grid_map, (0, 3, 1, 2))  # [B, d_j, g, g]
            h, w_out = self.stage_resolution(stage)
            fg = ops.bilinear_resize(grid_map, h, w_out)
        return BridgeOutput(meta_global=meta_global, fine_grained=fg)
