"""Hierarchical side network: conv stem, side blocks, stride-{4,8,16,32} pyramid.

Side blocks live in four stages of depth/4 blocks each. A block applies
residual cross-attention of its flattened stage feature map (queries)
against the meta-global tokens (keys/values), adds the fine-grained
injection, and finishes with a pre-normed FFN, so each block computes

    F_hat = F + CrossAttn(LN(F), F_mg)
    F_out = (F_hat + F_fg) + FFN(LN(F_hat + F_fg))

Attention cost is Theta(Lq * d * M): the score matrix is [Lq, M] and M is
tiny, which is what keeps the side network linear in query length.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import flops
from .bridge import NUM_STAGES, STAGE_STRIDES, BridgeOutput
from .errors import ConfigError, ShapeError, WiringError
from .params import ParamSet, trunc_normal
from .tensor import Tensor, ops


@dataclass
class HSNConfig:
    stage_dims: list[int] = field(default_factory=lambda: [8, 12, 16, 24])
    ffn_ratio: float = 4.0
    attn_heads: int = 1
    attn_softmax: bool = True
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if len(self.stage_dims) != NUM_STAGES:
            raise ConfigError(f"stage_dims must have {NUM_STAGES} entries, got {self.stage_dims}")
        for dim in self.stage_dims:
            if dim % self.attn_heads != 0:
                raise ConfigError(
                    f"stage dim {dim} not divisible by attn_heads {self.attn_heads}"
                )


class FeaturePyramid(NamedTuple):
    p4: Tensor
    p8: Tensor
    p16: Tensor
    p32: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.p4, self.p8, self.p16, self.p32]


def map_to_tokens(x: Tensor) -> Tensor:
    b, d, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, h * w, d))


def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    b, n, d = x.shape
    if n != h * w:
        raise ShapeError(f"cannot reshape {n} tokens into a {h}x{w} map")
    return ops.transpose(ops.reshape(x, (b, h, w, d)), (0, 3, 1, 2))


class SideBlock:
    """One side block: residual cross-attention + fine-grained injection + FFN."""

    def __init__(
        self,
        prefix: str,
        dim: int,
        config: HSNConfig,
        params: ParamSet,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.prefix = prefix
        self.dim = dim
        self.heads = config.attn_heads
        self.softmax = config.attn_softmax
        self.eps = config.ln_eps
        self.params = params
        hidden = int(dim * config.ffn_ratio)
        self.hidden = hidden
        std = config.init_std

        def weight(name, shape):
            params.add(f"{prefix}.{name}.weight", trunc_normal(rng, shape, std, dtype), trainable=True)
            params.add(f"{prefix}.{name}.bias", np.zeros(shape[-1], dtype=dtype), trainable=True)

        for ln in ("ln_attn", "ln_ffn"):
            params.add(f"{prefix}.{ln}.gamma", np.ones(dim, dtype=dtype), trainable=True)
            params.add(f"{prefix}.{ln}.beta", np.zeros(dim, dtype=dtype), trainable=True)
        for name in ("wq", "wk", "wv", "wo"):
            weight(f"attn.{name}", (dim, dim))
        weight("ffn.fc1", (dim, hidden))
        weight("ffn.fc2", (hidden, dim))

    def _p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"].value

    def _ln(self, x: Tensor, which: str) -> Tensor:
        return ops.layer_norm(x, self._p(f"{which}.gamma"), self._p(f"{which}.beta"), self.eps)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        x = ops.reshape(x, (b, t, self.heads, d // self.heads))
        return ops.transpose(x, (0, 2, 1, 3))  # [B, h, T, dh]

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, t, dh = x.shape
        return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))

    def cross_attention(self, f_hsn: Tensor, f_mg: Tensor) -> Tensor:
        """Attend the stage tokens over the meta-global tokens; residual inside."""
        if f_mg.shape[1] == 0:
            raise ConfigError(
                "cross-attention needs at least one meta-global token "
                "(enable the global token or set num_meta_tokens >= 1)"
            )
        if f_mg.shape[-1] != self.dim or f_hsn.shape[-1] != self.dim:
            raise ShapeError(
                f"feature width mismatch: queries {f_hsn.shape}, keys {f_mg.shape}, "
                f"block dim {self.dim}"
            )
        q = self._split_heads(ops.linear(self._ln(f_hsn, "ln_attn"), self._p("attn.wq.weight"), self._p("attn.wq.bias")))
        k = self._split_heads(ops.linear(f_mg, self._p("attn.wk.weight"), self._p("attn.wk.bias")))
        v = self._split_heads(ops.linear(f_mg, self._p("attn.wv.weight"), self._p("attn.wv.bias")))
        scale = 1.0 / math.sqrt(self.dim // self.heads)
        if self.softmax:
            scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), scale)
            ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
        else:
            # Softmax-free bilinear form: associate (K^T V) first, the
            # genuinely low-rank evaluation order.
            ctx = ops.mul(ops.matmul(q, ops.matmul(ops.transpose(k, (0, 1, 3, 2)), v)), scale)
        out = ops.linear(self._merge_heads(ctx), self._p("attn.wo.weight"), self._p("attn.wo.bias"))
        return ops.add(f_hsn, out)

    def _ffn(self, x: Tensor) -> Tensor:
        h = ops.gelu(ops.linear(x, self._p("ffn.fc1.weight"), self._p("ffn.fc1.bias")))
        return ops.linear(h, self._p("ffn.fc2.weight"), self._p("ffn.fc2.bias"))

    def forward(self, f_hsn: Tensor, f_mg: Tensor, f_fg: Tensor | None) -> Tensor:
        if f_fg is not None and f_fg.shape != f_hsn.shape:
            raise ShapeError(
                f"fine-grained injection shape {f_fg.shape} does not match stage tokens {f_hsn.shape}"
            )
        f_hat = self.cross_attention(f_hsn, f_mg)
        mixed = ops.add(f_hat, f_fg) if f_fg is not None else f_hat
        return ops.add(mixed, self._ffn(self._ln(mixed, "ln_ffn")))


class SideNetwork:
    def __init__(
        self,
        config: HSNConfig,
        depth: int,
        image_size: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        if depth % NUM_STAGES != 0:
            raise ConfigError(f"side-block count {depth} not divisible by {NUM_STAGES} stages")
        if image_size % STAGE_STRIDES[-1] != 0:
            raise ConfigError(
                f"image_size {image_size} must be divisible by {STAGE_STRIDES[-1]} "
                "to form the four-stage pyramid"
            )
        self.config = config
        self.depth = depth
        self.image_size = image_size
        self.blocks_per_stage = depth // NUM_STAGES
        self.params = ParamSet()
        dims = config.stage_dims
        std = config.init_std

        def conv(name, c_in, c_out, k):
            self.params.add(
                f"{name}.weight", trunc_normal(rng, (c_out, c_in, k, k), std, dtype), trainable=True
            )
            self.params.add(f"{name}.bias", np.zeros(c_out, dtype=dtype), trainable=True)

        conv("hsn.stem.conv1", 3, dims[0], 3)
        conv("hsn.stem.conv2", dims[0], dims[0], 3)
        self.stages: list[list[SideBlock]] = []
        for j in range(NUM_STAGES):
            blocks = [
                SideBlock(f"hsn.stages.{j}.blocks.{k}", dims[j], config, self.params, rng, dtype)
                for k in range(self.blocks_per_stage)
            ]
            self.stages.append(blocks)
        for j in range(NUM_STAGES - 1):
            conv(f"hsn.transitions.{j}", dims[j], dims[j + 1], 2)

    def conv_stem(self, images: Tensor) -> Tensor:
        """[B,3,H,W] -> [B,d1,H/4,W/4] local-context stem (two stride-2 convs)."""
        if images.shape[2] % 4 or images.shape[3] % 4:
            raise ShapeError(f"stem needs spatial size divisible by 4, got {images.shape}")
        x = ops.conv2d(
            images,
            self.params["hsn.stem.conv1.weight"].value,
            self.params["hsn.stem.conv1.bias"].value,
            stride=2,
            padding=1,
        )
        x = ops.gelu(x)
        return ops.conv2d(
            x,
            self.params["hsn.stem.conv2.weight"].value,
            self.params["hsn.stem.conv2.bias"].value,
            stride=2,
            padding=1,
        )

    def stage_transition(self, x: Tensor, stage: int) -> Tensor:
        """2x2 stride-2 projection into the next stage width."""
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"stage transition needs even spatial dims, got {x.shape}")
        return ops.conv2d(
            x,
            self.params[f"hsn.transitions.{stage}.weight"].value,
            self.params[f"hsn.transitions.{stage}.bias"].value,
            stride=2,
            padding=0,
        )

    def forward(self, images: Tensor, bridge_outputs: list[BridgeOutput]) -> FeaturePyramid:
        if len(bridge_outputs) != self.depth:
            raise WiringError(
                f"expected {self.depth} bridge outputs (one per backbone block), "
                f"got {len(bridge_outputs)}"
            )
        x = self.conv_stem(images)
        outputs: list[Tensor] = []
        index = 0
        for j in range(NUM_STAGES):
            b, d, h, w = x.shape
            tokens = map_to_tokens(x)
            for block in self.stages[j]:
                injected = bridge_outputs[index]
                fg_tokens = (
                    map_to_tokens(injected.fine_grained)
                    if injected.fine_grained is not None
                    else None
                )
                tokens = block.forward(tokens, injected.meta_global, fg_tokens)
                index += 1
            x = tokens_to_map(tokens, h, w)
            outputs.append(x)
            if j < NUM_STAGES - 1:
                x = self.stage_transition(x, j)
        return FeaturePyramid(*outputs)


# ---------------------------------------------------------------------------
# complexity measurement


def fit_loglog_slope(lengths, seconds) -> float:
    """Least-squares slope of log(time) against log(length)."""
    return float(np.polyfit(np.log(np.asarray(lengths, dtype=np.float64)), np.log(np.asarray(seconds, dtype=np.float64)), 1)[0])


def _timed(fn, trials: int) -> float:
    fn()  # warm-up, excluded
    start = time.perf_counter()
    for _ in range(trials):
        fn()
    return (time.perf_counter() - start) / trials


def attention_complexity_profile(
    seq_lengths,
    d: int = 64,
    m: int = 9,
    heads: int = 1,
    batch: int = 8,
    trials: int = 10,
    seed: int = 0,
) -> list[dict]:
    """Analytic FLOPs and measured wall time of side-block cross-attention
    as the query length grows with d and M held fixed.
    """
    rng = np.random.default_rng(seed)
    config = HSNConfig(stage_dims=[d, d, d, d], attn_heads=heads)
    params = ParamSet()
    block = SideBlock("profile.block", d, config, params, rng)
    mg = Tensor(rng.normal(size=(batch, m, d)).astype(np.float32))
    rows = []
    for length in seq_lengths:
        f = Tensor(rng.normal(size=(batch, int(length), d)).astype(np.float32))
        seconds = _timed(lambda: block.cross_attention(f, mg), trials)
        rows.append(
            {
                "length": int(length),
                "flops": batch * flops.cross_attention_flops(int(length), m, d),
                "seconds": seconds,
            }
        )
    return rows


def naive_attention_profile(seq_lengths, d: int = 64, trials: int = 5, seed: int = 0) -> list[dict]:
    """Wall time of materialized full self-attention over the same feature
    width: the quadratic baseline the side block's linear attention avoids.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for length in seq_lengths:
        length = int(length)
        x = rng.normal(size=(length, d)).astype(np.float32)
        scale = np.float32(1.0 / math.sqrt(d))

        def run():
            scores = (x @ x.T) * scale
            scores -= scores.max(axis=-1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=-1, keepdims=True)
            return scores @ x

        seconds = _timed(run, trials)
        rows.append(
            {
                "length": length,
                "flops": flops.naive_self_attention_flops(length, d),
                "seconds": seconds,
            }
        )
    return rows
