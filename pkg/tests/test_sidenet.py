"""Side network: stem, cross-attention, side blocks, pyramid assembly."""

import numpy as np
import pytest

from hst.bridge import BridgeOutput
from hst.errors import ConfigError, ShapeError, WiringError
from hst.params import ParamSet
from hst.sidenet import (
    HSNConfig,
    SideBlock,
    SideNetwork,
    attention_complexity_profile,
    map_to_tokens,
    tokens_to_map,
)
from hst.tensor import Tensor, backward, ops, record

from conftest import central_difference, relative_error


def make_block(dim=16, heads=1, softmax=True, seed=0, hidden_ratio=4.0) -> SideBlock:
    config = HSNConfig(stage_dims=[dim] * 4, attn_heads=heads, attn_softmax=softmax, ffn_ratio=hidden_ratio)
    params = ParamSet()
    return SideBlock("blk", dim, config, params, np.random.default_rng(seed), dtype=np.float64)


def make_network(stage_dims=(8, 12, 16, 24), depth=8, image_size=32, seed=0) -> SideNetwork:
    return SideNetwork(
        HSNConfig(stage_dims=list(stage_dims)),
        depth=depth,
        image_size=image_size,
        rng=np.random.default_rng(seed),
        dtype=np.float64,
    )


def naive_reference(block: SideBlock, f: np.ndarray, mg: np.ndarray) -> np.ndarray:
    """Per-query loop with an explicitly materialized attention matrix."""
    P = {n: p.data for n, p in block.params.items()}
    eps = block.eps
    mu = f.mean(axis=-1, keepdims=True)
    var = ((f - mu) ** 2).mean(axis=-1, keepdims=True)
    normed = ((f - mu) * (1.0 / np.sqrt(var + eps))) * P["blk.ln_attn.gamma"] + P["blk.ln_attn.beta"]
    B, L, d = f.shape
    M = mg.shape[1]
    h = block.heads
    dh = d // h
    out = np.zeros_like(f)
    scale = 1.0 / np.sqrt(dh)
    q_all = normed @ P["blk.attn.wq.weight"] + P["blk.attn.wq.bias"]
    k_all = mg @ P["blk.attn.wk.weight"] + P["blk.attn.wk.bias"]
    v_all = mg @ P["blk.attn.wv.weight"] + P["blk.attn.wv.bias"]
    for b in range(B):
        ctx = np.zeros((L, d))
        for head in range(h):
            q = q_all[b, :, head * dh : (head + 1) * dh]
            k = k_all[b, :, head * dh : (head + 1) * dh]
            v = v_all[b, :, head * dh : (head + 1) * dh]
            attn = np.zeros((L, M))
            for i in range(L):
                scores = np.array([float(q[i] @ k[j]) * scale for j in range(M)])
                scores -= scores.max()
                e = np.exp(scores)
                attn[i] = e / e.sum()
            ctx[:, head * dh : (head + 1) * dh] = attn @ v
        out[b] = ctx @ P["blk.attn.wo.weight"] + P["blk.attn.wo.bias"]
    return f + out


class TestLayoutHelpers:
    def test_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 4, 6)))
        tokens = map_to_tokens(x)
        assert tokens.shape == (2, 24, 5)
        back = tokens_to_map(tokens, 4, 6)
        np.testing.assert_array_equal(back.data, x.data)

    def test_bad_token_count_rejected(self, rng):
        with pytest.raises(ShapeError):
            tokens_to_map(Tensor(rng.normal(size=(1, 10, 4))), 3, 4)


class TestCrossAttention:
    def test_single_key_closed_form(self, rng):
        # softmax over one key is identically 1: out = Wo(Wv k + bv) + bo
        block = make_block(dim=8)
        f = Tensor(rng.normal(size=(2, 12, 8)))
        mg = Tensor(rng.normal(size=(2, 1, 8)))
        out = block.cross_attention(f, mg)
        P = {n: p.data for n, p in block.params.items()}
        value = mg.data @ P["blk.attn.wv.weight"] + P["blk.attn.wv.bias"]
        expected = f.data + (value @ P["blk.attn.wo.weight"] + P["blk.attn.wo.bias"])
        np.testing.assert_allclose(out.data, expected, atol=1e-10)

    def test_zero_value_projection_is_identity(self, rng):
        block = make_block(dim=8)
        block.params["blk.attn.wv.weight"].value.data[:] = 0.0
        block.params["blk.attn.wv.bias"].value.data[:] = 0.0
        block.params["blk.attn.wo.bias"].value.data[:] = 0.0
        f = Tensor(rng.normal(size=(2, 9, 8)))
        mg = Tensor(rng.normal(size=(2, 3, 8)))
        out = block.cross_attention(f, mg)
        np.testing.assert_array_equal(out.data, f.data)

    @pytest.mark.parametrize("heads", [1, 2])
    @pytest.mark.parametrize("m", [1, 2, 9])
    def test_matches_naive_materialized_attention(self, heads, m, rng):
        block = make_block(dim=16, heads=heads)
        f = Tensor(rng.normal(size=(2, 33, 16)))
        mg = Tensor(rng.normal(size=(2, m, 16)))
        out = block.cross_attention(f, mg)
        expected = naive_reference(block, f.data, mg.data)
        assert np.abs(out.data - expected).max() < 1e-6

    def test_softmax_free_orderings_agree(self, rng):
        # (Q K^T) V computed via K^T V first must equal the materialized order
        block = make_block(dim=16, softmax=False)
        f = Tensor(rng.normal(size=(1, 50, 16)))
        mg = Tensor(rng.normal(size=(1, 4, 16)))
        out = block.cross_attention(f, mg)
        P = {n: p.data for n, p in block.params.items()}
        eps = block.eps
        x = f.data
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        normed = ((x - mu) * (1.0 / np.sqrt(var + eps))) * P["blk.ln_attn.gamma"] + P["blk.ln_attn.beta"]
        q = normed @ P["blk.attn.wq.weight"] + P["blk.attn.wq.bias"]
        k = mg.data @ P["blk.attn.wk.weight"] + P["blk.attn.wk.bias"]
        v = mg.data @ P["blk.attn.wv.weight"] + P["blk.attn.wv.bias"]
        materialized = ((q @ k.transpose(0, 2, 1)) @ v) / np.sqrt(16)
        expected = x + (materialized @ P["blk.attn.wo.weight"] + P["blk.attn.wo.bias"])
        assert np.abs(out.data - expected).max() < 1e-6

    def test_empty_meta_global_rejected(self, rng):
        block = make_block(dim=8)
        with pytest.raises(ConfigError):
            block.cross_attention(
                Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 0, 8)))
            )

    def test_width_mismatch_rejected(self, rng):
        block = make_block(dim=8)
        with pytest.raises(ShapeError):
            block.cross_attention(
                Tensor(rng.normal(size=(1, 4, 8))), Tensor(rng.normal(size=(1, 2, 12)))
            )


class TestSideBlock:
    def test_zeroed_submodules_reduce_to_injection_sum(self, rng):
        block = make_block(dim=8)
        for name in ("attn.wv.weight", "attn.wv.bias", "attn.wo.bias", "ffn.fc2.weight", "ffn.fc2.bias"):
            block.params[f"blk.{name}"].value.data[:] = 0.0
        f = Tensor(rng.normal(size=(2, 9, 8)))
        mg = Tensor(rng.normal(size=(2, 2, 8)))
        fg = Tensor(rng.normal(size=(2, 9, 8)))
        out = block.forward(f, mg, fg)
        np.testing.assert_array_equal(out.data, f.data + fg.data)

    def test_disabled_injection_is_bitwise_independent_of_fg(self, rng):
        block = make_block(dim=8)
        f = Tensor(rng.normal(size=(2, 9, 8)))
        mg = Tensor(rng.normal(size=(2, 2, 8)))
        out_none = block.forward(f, mg, None).data
        out_again = block.forward(f, mg, None).data
        np.testing.assert_array_equal(out_none, out_again)

    def test_fg_shape_mismatch_rejected(self, rng):
        block = make_block(dim=8)
        with pytest.raises(ShapeError):
            block.forward(
                Tensor(rng.normal(size=(2, 9, 8))),
                Tensor(rng.normal(size=(2, 2, 8))),
                Tensor(rng.normal(size=(2, 4, 8))),
            )

    def test_full_block_gradients_vs_finite_differences(self, rng):
        block = make_block(dim=6, hidden_ratio=2.0)
        f = rng.normal(size=(1, 5, 6))
        mg = rng.normal(size=(1, 2, 6))
        fg = rng.normal(size=(1, 5, 6))
        names = [n for n, _ in block.params.items()]
        with record():
            out = block.forward(Tensor(f), Tensor(mg), Tensor(fg))
            loss = ops.mean(ops.mul(out, out))
        backward(loss)
        for name in names:
            p = block.params[name]

            def scalar_loss(values, name=name, p=p):
                keep = p.value.data.copy()
                p.value.data[:] = values.reshape(p.value.shape)
                o = block.forward(Tensor(f), Tensor(mg), Tensor(fg)).data
                p.value.data[:] = keep
                return float((o * o).mean())

            fd = central_difference(scalar_loss, p.data.copy().reshape(-1), h=1e-6)
            assert p.grad is not None, name
            assert relative_error(p.grad.data.reshape(-1), fd, floor=1e-6) < 1e-3, name


class TestStemAndTransitions:
    def test_stem_shape(self, rng):
        net = make_network(stage_dims=(16, 32, 64, 128))
        out = net.conv_stem(Tensor(rng.normal(size=(2, 3, 32, 32))))
        assert out.shape == (2, 16, 8, 8)

    def test_zero_image_zero_bias_gives_zero(self):
        net = make_network()
        out = net.conv_stem(Tensor(np.zeros((1, 3, 32, 32))))
        np.testing.assert_array_equal(out.data, np.zeros_like(out.data))

    def test_stem_gradient(self, rng):
        net = make_network(stage_dims=(4, 8, 12, 16))
        x = rng.normal(size=(1, 3, 8, 8))
        name = "hsn.stem.conv1.weight"
        p = net.params[name]
        with record():
            out = net.conv_stem(Tensor(x))
            loss = ops.mean(ops.mul(out, out))
        backward(loss)

        def scalar_loss(values):
            keep = p.value.data.copy()
            p.value.data[:] = values.reshape(p.value.shape)
            o = net.conv_stem(Tensor(x)).data
            p.value.data[:] = keep
            return float((o * o).mean())

        fd = central_difference(scalar_loss, p.data.copy().reshape(-1), h=1e-6)
        assert relative_error(p.grad.data.reshape(-1), fd, floor=1e-6) < 1e-3

    def test_transition_shape(self, rng):
        net = make_network(stage_dims=(16, 32, 64, 128))
        out = net.stage_transition(Tensor(rng.normal(size=(2, 16, 8, 8))), 0)
        assert out.shape == (2, 32, 4, 4)

    def test_transition_corner_kernel_subsamples(self, rng):
        net = make_network(stage_dims=(4, 4, 4, 4))
        w = net.params["hsn.transitions.0.weight"]
        w.value.data[:] = 0.0
        for c in range(4):
            w.value.data[c, c, 0, 0] = 1.0
        net.params["hsn.transitions.0.bias"].value.data[:] = 0.0
        x = rng.normal(size=(1, 4, 6, 6))
        out = net.stage_transition(Tensor(x), 0)
        np.testing.assert_allclose(out.data, x[:, :, ::2, ::2], rtol=1e-12)

    def test_odd_spatial_dims_rejected(self, rng):
        net = make_network()
        with pytest.raises(ShapeError):
            net.stage_transition(Tensor(rng.normal(size=(1, 8, 5, 5))), 0)


class TestForward:
    def bridge_outputs(self, rng, net: SideNetwork, batch=2, m=2):
        outs = []
        dims = net.config.stage_dims
        for i in range(net.depth):
            j = i // net.blocks_per_stage
            side = net.image_size // (4 * 2**j)
            outs.append(
                BridgeOutput(
                    meta_global=Tensor(rng.normal(size=(batch, m, dims[j]))),
                    fine_grained=Tensor(rng.normal(size=(batch, dims[j], side, side))),
                )
            )
        return outs

    def test_pyramid_shapes_and_strides(self, rng):
        net = make_network(stage_dims=(8, 12, 16, 24), depth=8, image_size=64)
        outs = self.bridge_outputs(rng, net)
        pyramid = net.forward(Tensor(rng.normal(size=(2, 3, 64, 64))), outs)
        assert pyramid.p4.shape == (2, 8, 16, 16)
        assert pyramid.p8.shape == (2, 12, 8, 8)
        assert pyramid.p16.shape == (2, 16, 4, 4)
        assert pyramid.p32.shape == (2, 24, 2, 2)
        for p in pyramid.as_list():
            assert np.all(np.isfinite(p.data))

    def test_wrong_tap_count_rejected(self, rng):
        net = make_network()
        outs = self.bridge_outputs(rng, net)[:-1]
        with pytest.raises(WiringError):
            net.forward(Tensor(rng.normal(size=(2, 3, 32, 32))), outs)

    def test_deterministic_across_runs(self, rng):
        images = rng.normal(size=(1, 3, 32, 32))
        results = []
        for _ in range(2):
            net = make_network(seed=5)
            outs_rng = np.random.default_rng(11)
            outs = self.bridge_outputs(outs_rng, net, batch=1)
            pyramid = net.forward(Tensor(images), outs)
            results.append([p.data.copy() for p in pyramid.as_list()])
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)


class TestComplexityProfile:
    def test_flops_double_exactly_with_length(self):
        rows = attention_complexity_profile([64, 128, 256], trials=1)
        assert rows[1]["flops"] / rows[0]["flops"] == 2.0
        assert rows[2]["flops"] / rows[1]["flops"] == 2.0

    def test_rows_carry_measured_time(self):
        rows = attention_complexity_profile([32, 64], trials=2)
        for row in rows:
            assert row["seconds"] > 0
