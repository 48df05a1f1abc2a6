"""Backbone: patch embedding, meta-token taps, freeze policy."""

import numpy as np
import pytest
from scipy.special import erf

from hst.backbone import Backbone, ViTConfig, load_backbone_weights
from hst.errors import ConfigError, ShapeError
from hst.tensor import Tensor


def build(config: ViTConfig, seed=0) -> Backbone:
    return Backbone(config, np.random.default_rng(seed), dtype=np.float64)


def small_config(**kw) -> ViTConfig:
    base = dict(image_size=32, patch_size=4, embed_dim=32, depth=4, num_heads=2, num_meta_tokens=1)
    base.update(kw)
    return ViTConfig(**base)


def plain_vit_forward(backbone: Backbone, images: np.ndarray) -> list[np.ndarray]:
    """Independent numpy re-implementation of a plain ViT (no meta tokens),
    returning each block's patch-token output."""
    c = backbone.config
    P = {name: p.data for name, p in backbone.params.items()}
    b = images.shape[0]
    g, p = c.grid, c.patch_size
    x = images.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    x = np.ascontiguousarray(x).reshape(b, g * g, 3 * p * p)
    x = x @ P["backbone.patch_embed.weight"] + P["backbone.patch_embed.bias"]
    x = x + P["backbone.pos_embed"]

    def ln(t, name):
        # reciprocal-multiply form, matching the op's documented convention
        mu = t.mean(axis=-1, keepdims=True)
        var = ((t - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (t - mu) * (1.0 / np.sqrt(var + t.dtype.type(c.ln_eps)))
        return xhat * P[f"{name}.gamma"] + P[f"{name}.beta"]

    outs = []
    for i in range(c.depth):
        blk = f"backbone.blocks.{i:02d}"
        t = x.shape[1]
        h = c.num_heads
        dh = c.embed_dim // h
        y = ln(x, f"{blk}.ln1")
        qkv = y @ P[f"{blk}.attn.qkv.weight"] + P[f"{blk}.attn.qkv.bias"]
        qkv = qkv.reshape(b, t, 3, h, dh)
        q = qkv[:, :, 0].transpose(0, 2, 1, 3)
        k = qkv[:, :, 1].transpose(0, 2, 1, 3)
        v = qkv[:, :, 2].transpose(0, 2, 1, 3)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, c.embed_dim)
        x = x + (ctx @ P[f"{blk}.attn.proj.weight"] + P[f"{blk}.attn.proj.bias"])
        y = ln(x, f"{blk}.ln2")
        hdn = y @ P[f"{blk}.mlp.fc1.weight"] + P[f"{blk}.mlp.fc1.bias"]
        hdn = 0.5 * hdn * (1 + erf(hdn * hdn.dtype.type(1 / np.sqrt(2))))
        x = x + (hdn @ P[f"{blk}.mlp.fc2.weight"] + P[f"{blk}.mlp.fc2.bias"])
        outs.append(x.copy())
    return outs


class TestPatchEmbed:
    def test_shape(self, rng):
        bb = build(small_config(embed_dim=48, num_heads=2))
        images = Tensor(rng.uniform(size=(2, 3, 32, 32)))
        tokens = bb.patch_embed(images)
        assert tokens.shape == (2, 64, 48)

    def test_zero_image_zero_pos_gives_zero_tokens(self):
        bb = build(small_config())
        bb.params["backbone.pos_embed"].value.data[:] = 0.0
        tokens = bb.patch_embed(Tensor(np.zeros((1, 3, 32, 32))))
        np.testing.assert_array_equal(tokens.data, np.zeros_like(tokens.data))

    def test_one_hot_pixel_matches_direct_projection(self):
        bb = build(small_config())
        bb.params["backbone.pos_embed"].value.data[:] = 0.0
        bb.params["backbone.patch_embed.bias"].value.data[:] = 0.0
        images = np.zeros((1, 3, 32, 32))
        images[0, 1, 9, 6] = 1.0  # patch row 2, col 1; within-patch (1, 2)
        tokens = bb.patch_embed(Tensor(images))
        w = bb.params["backbone.patch_embed.weight"].data
        patch_index = (9 // 4) * 8 + (6 // 4)
        # patch vector layout is (channel, row, col) flattened
        feature_index = 1 * 16 + (9 % 4) * 4 + (6 % 4)
        expected = np.zeros_like(tokens.data)
        expected[0, patch_index] = w[feature_index]
        np.testing.assert_allclose(tokens.data, expected, atol=1e-12)

    def test_wrong_spatial_size_rejected(self):
        bb = build(small_config())
        with pytest.raises(ShapeError):
            bb.patch_embed(Tensor(np.zeros((1, 3, 16, 16))))


class TestForward:
    def test_tap_count_and_meta_shape(self, rng):
        bb = build(small_config(depth=8, num_meta_tokens=1))
        taps, final = bb.forward(Tensor(rng.uniform(size=(2, 3, 32, 32))))
        assert len(taps) == 8
        for tap in taps:
            assert tap.meta.shape == (2, 1, 32)
            assert tap.patch.shape == (2, 64, 32)
        assert final.shape == (2, 65, 32)

    def test_prompt_transparency_with_zero_meta_tokens(self, rng):
        config = small_config(num_meta_tokens=0)
        bb = build(config)
        images = rng.uniform(size=(2, 3, 32, 32))
        taps, _ = bb.forward(Tensor(images))
        reference = plain_vit_forward(bb, images)
        for tap, ref in zip(taps, reference):
            assert tap.meta.shape == (2, 0, 32)
            np.testing.assert_array_equal(tap.patch.data, ref)

    def test_cls_token_excluded_from_taps(self, rng):
        bb = build(small_config(use_cls_token=True))
        taps, _ = bb.forward(Tensor(rng.uniform(size=(2, 3, 32, 32))))
        assert taps[0].meta.shape == (2, 1, 32)
        assert taps[0].patch.shape == (2, 64, 32)

    def test_fixed_seed_taps_bit_identical(self, rng):
        images = rng.uniform(size=(2, 3, 32, 32))
        results = []
        for _ in range(2):
            bb = build(small_config(), seed=3)
            taps, _ = bb.forward(Tensor(images))
            results.append([(t.meta.data.copy(), t.patch.data.copy()) for t in taps])
        for (m1, p1), (m2, p2) in zip(*results):
            np.testing.assert_array_equal(m1, m2)
            np.testing.assert_array_equal(p1, p2)

    def test_meta_token_influences_every_block(self, rng):
        bb = build(small_config())
        images = Tensor(rng.uniform(size=(1, 3, 32, 32)))
        base = [t.patch.data.copy() for t in bb.forward(images)[0]]
        bb.params["backbone.meta_tokens"].value.data[:] += 0.5
        bumped = [t.patch.data.copy() for t in bb.forward(images)[0]]
        for i, (a, b) in enumerate(zip(base, bumped)):
            assert np.abs(a - b).max() > 0, f"block {i} ignored the meta tokens"


class TestFreezePolicy:
    def test_vit_b_like_ln_scalar_count(self):
        config = ViTConfig(image_size=32, patch_size=4, embed_dim=768, depth=12, num_heads=12)
        bb = Backbone(config, np.random.default_rng(0))
        manifest = bb.set_freeze_policy()
        ln_scalars = sum(
            bb.params[n].num_scalars() for n in manifest if n != "backbone.meta_tokens"
        )
        assert ln_scalars == (2 * 12 + 1) * 2 * 768 == 38400
        assert bb.params["backbone.meta_tokens"].num_scalars() == 768

    def test_manifest_is_exactly_ln_plus_meta(self):
        bb = build(small_config())
        manifest = bb.set_freeze_policy()
        expected = sorted(bb.ln_param_names() + ["backbone.meta_tokens"])
        assert manifest == expected

    def test_ln_tuning_off_leaves_only_meta(self):
        bb = build(small_config())
        manifest = bb.set_freeze_policy(ln_tuning=False)
        assert manifest == ["backbone.meta_tokens"]

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, patch_size=4)
        with pytest.raises(ConfigError):
            ViTConfig(depth=6)
        with pytest.raises(ConfigError):
            ViTConfig(embed_dim=30, num_heads=4)


class TestWeightImport:
    def test_roundtrip_through_external_arrays(self, rng):
        donor = build(small_config(), seed=1)
        receiver = build(small_config(), seed=2)
        before = receiver.params["backbone.blocks.00.attn.qkv.weight"].data.copy()
        imported = load_backbone_weights(receiver, donor.params.snapshot())
        assert "backbone.blocks.00.attn.qkv.weight" in imported
        after = receiver.params["backbone.blocks.00.attn.qkv.weight"].data
        assert np.abs(after - before).max() > 0
        np.testing.assert_array_equal(
            after, donor.params["backbone.blocks.00.attn.qkv.weight"].data
        )

    def test_missing_backbone_entries_rejected(self):
        bb = build(small_config())
        with pytest.raises(ConfigError):
            load_backbone_weights(bb, {"unrelated.weight": np.zeros(3)})
