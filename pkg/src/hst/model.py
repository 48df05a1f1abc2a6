"""Full model: frozen backbone + bridge + side network + classification head.

The classification head global-average-pools the final stage map (stride
32) and applies a linear layer; all task signal flows through the side
network. A degenerate configuration with the side network disabled
reduces the model to linear probing of the pooled backbone tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, IntermediateTap, ViTConfig
from .bridge import Bridge, BridgeOutput
from .config import RunConfig
from .errors import ConfigError
from .params import ParamSet, trunc_normal
from .sidenet import FeaturePyramid, HSNConfig, SideNetwork
from .tensor import Tensor, ops


@dataclass
class ParamReport:
    trainable_by_component: dict[str, int]
    trainable_total: int
    frozen_total: int

    @property
    def total(self) -> int:
        return self.trainable_total + self.frozen_total

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_total / self.total

    def lines(self) -> list[str]:
        out = ["component            trainable"]
        for name, count in sorted(self.trainable_by_component.items()):
            out.append(f"{name:<20} {count}")
        out.append(f"{'total trainable':<20} {self.trainable_total}")
        out.append(f"{'total frozen':<20} {self.frozen_total}")
        out.append(f"{'trainable fraction':<20} {self.trainable_fraction:.4f}")
        return out


def _component_of(name: str, ln_names: set[str]) -> str:
    if name == "backbone.meta_tokens":
        return "meta_tokens"
    if name in ln_names:
        return "backbone_ln"
    if name.startswith("backbone."):
        return "backbone_frozen"
    return name.split(".", 1)[0]


class HSTModel:
    def __init__(self, config: RunConfig, seed: int | None = None, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        seed = config.train.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        b = config.backbone
        self.vit_config = ViTConfig(
            image_size=b.image_size,
            patch_size=b.patch_size,
            embed_dim=b.embed_dim,
            depth=b.depth,
            num_heads=b.num_heads,
            mlp_ratio=b.mlp_ratio,
            use_cls_token=b.use_cls_token,
            num_meta_tokens=b.num_meta_tokens,
            ln_eps=b.ln_eps,
            init_std=b.init_std,
        )
        self.backbone = Backbone(self.vit_config, rng, dtype=dtype)
        self.hsn_enabled = config.toggles.hsn_enabled
        self.fg_injection = config.toggles.fg_injection
        self.bridge: Bridge | None = None
        self.sidenet: SideNetwork | None = None
        if self.hsn_enabled:
            self.bridge = Bridge(
                embed_dim=b.embed_dim,
                stage_dims=config.hsn.stage_dims,
                depth=b.depth,
                image_size=b.image_size,
                rng=rng,
                weight_sharing=config.toggles.weight_sharing,
                global_token=config.toggles.global_t,
                init_std=b.init_std,
                dtype=dtype,
            )
            self.sidenet = SideNetwork(
                HSNConfig(
                    stage_dims=list(config.hsn.stage_dims),
                    ffn_ratio=config.hsn.ffn_ratio,
                    attn_heads=config.hsn.attn_heads,
                    attn_softmax=config.hsn.attn_softmax,
                    ln_eps=b.ln_eps,
                    init_std=b.init_std,
                ),
                depth=b.depth,
                image_size=b.image_size,
                rng=rng,
                dtype=dtype,
            )
            head_in = config.hsn.stage_dims[-1]
        else:
            head_in = b.embed_dim
        self.head = ParamSet()
        self.head.add(
            "head.weight",
            trunc_normal(rng, (head_in, config.data.num_classes), b.init_std, dtype),
            trainable=True,
        )
        self.head.add(
            "head.bias", np.zeros(config.data.num_classes, dtype=dtype), trainable=True
        )
        self.params = ParamSet()
        self.params.merge(self.backbone.params)
        if self.bridge is not None:
            self.params.merge(self.bridge.params)
        if self.sidenet is not None:
            self.params.merge(self.sidenet.params)
        self.params.merge(self.head)
        mean = np.asarray(config.data.normalize_mean, dtype=dtype).reshape(1, 3, 1, 1)
        std = np.asarray(config.data.normalize_std, dtype=dtype).reshape(1, 3, 1, 1)
        self._norm_mean = mean
        self._norm_inv_std = (1.0 / std).astype(dtype)
        self.apply_freeze_policy()

    # -- policy & accounting --------------------------------------------------

    def apply_freeze_policy(self) -> list[str]:
        """Re-assert the trainable/frozen split; returns the trainable manifest."""
        self.backbone.set_freeze_policy(ln_tuning=self.config.toggles.ln_tuning)
        return self.trainable_manifest()

    def trainable_manifest(self) -> list[str]:
        return self.params.trainable_names()

    def param_report(self) -> ParamReport:
        ln_names = set(self.backbone.ln_param_names())
        by_component: dict[str, int] = {}
        trainable = frozen = 0
        for name, p in self.params.items():
            if p.trainable:
                trainable += p.num_scalars()
                key = _component_of(name, ln_names)
                by_component[key] = by_component.get(key, 0) + p.num_scalars()
            else:
                frozen += p.num_scalars()
        return ParamReport(by_component, trainable, frozen)

    def to_dtype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        self.params.to_dtype(dtype)
        self._norm_mean = self._norm_mean.astype(dtype)
        self._norm_inv_std = self._norm_inv_std.astype(dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.params.snapshot()

    def load_state(self, arrays: dict[str, np.ndarray]) -> list[str]:
        missing = [n for n in self.params.names() if n not in arrays]
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {missing[:5]} ...")
        return self.params.load(arrays)

    # -- forward ---------------------------------------------------------------

    def normalize(self, images: Tensor) -> Tensor:
        centered = ops.sub(images, Tensor(self._norm_mean))
        return ops.mul(centered, Tensor(self._norm_inv_std))

    def forward_features(self, images: Tensor) -> tuple[list[IntermediateTap], Tensor, Tensor]:
        """Normalized input -> per-block taps, final tokens, normalized image."""
        x = self.normalize(images)
        taps, final = self.backbone.forward(x)
        return taps, final, x

    def forward_pyramid(self, images: Tensor) -> FeaturePyramid:
        if not self.hsn_enabled:
            raise ConfigError("forward_pyramid requires toggles.hsn_enabled=true")
        taps, _, x = self.forward_features(images)
        injected = self._bridge_all(taps)
        return self.sidenet.forward(x, injected)

    def _bridge_all(self, taps: list[IntermediateTap]) -> list[BridgeOutput]:
        return [
            self.bridge.afb(tap, i, fine_grained=self.fg_injection)
            for i, tap in enumerate(taps)
        ]

    def forward_classify(self, images: Tensor) -> Tensor:
        if self.hsn_enabled:
            pyramid = self.forward_pyramid(images)
            pooled = ops.global_avg_pool(pyramid.p32)
        else:
            _, final, _ = self.forward_features(images)
            pooled = ops.global_avg_pool(self.backbone.patch_tokens_of(final))
        return ops.linear(pooled, self.head["head.weight"].value, self.head["head.bias"].value)
