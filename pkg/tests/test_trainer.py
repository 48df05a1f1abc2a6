"""Optimizer, freeze audit, and gradient-check harness."""

import numpy as np
import pytest

import hst.tensor.ops as tensor_ops
from hst.data import SyntheticSpec, generate
from hst.errors import AuditError, ConfigError, TrainingAborted
from hst.model import HSTModel
from hst.trainer import (
    AdamW,
    audit_freeze,
    evaluate,
    grad_check,
    snapshot_model,
    train_step,
)
from hst.tensor import Tensor, backward, ops, record

from conftest import make_config


def tiny_model(seed=0, **kw) -> HSTModel:
    return HSTModel(make_config(**kw), seed=seed)


def fixed_batch(model: HSTModel, batch=8, seed=0):
    rng = np.random.default_rng(seed)
    size = model.config.backbone.image_size
    images = rng.uniform(0, 1, size=(batch, 3, size, size)).astype(np.float32)
    labels = rng.integers(0, model.config.data.num_classes, size=batch)
    return images, labels


class TestAdamW:
    def test_single_step_closed_form(self):
        # fresh moments: m^=g, v^=g^2, so the update is lr * g/(|g|+eps) + lr*wd*w
        model = tiny_model()
        opt = AdamW(model, learning_rate=0.01, weight_decay=0.1)
        name = "head.weight"
        p = model.params[name]
        theta = p.data.copy()
        g = np.random.default_rng(0).normal(size=p.data.shape).astype(np.float32)
        p.value.grad = Tensor(g)
        opt.step()
        expected = theta - 0.01 * (g / (np.abs(g) + 1e-8) + 0.1 * theta)
        np.testing.assert_allclose(p.data, expected, atol=1e-6)

    def test_no_decay_on_ln_bias_meta(self):
        # zero gradient => zero Adam update, so only weight decay can move a
        # parameter; the exempt groups must come out bit-identical
        model = tiny_model()
        opt = AdamW(model, learning_rate=0.01, weight_decay=0.5)
        exempt = ("backbone.blocks.00.ln1.gamma", "head.bias", "backbone.meta_tokens")
        decayed = "head.weight"
        for name in exempt + (decayed,):
            p = model.params[name]
            p.value.grad = Tensor(np.zeros_like(p.data))
        before = {name: model.params[name].data.copy() for name in exempt + (decayed,)}
        opt.step()
        for name in exempt:
            np.testing.assert_array_equal(model.params[name].data, before[name])
        assert np.abs(model.params[decayed].data - before[decayed]).max() > 0

    def test_managed_names_equal_trainable_manifest(self):
        model = tiny_model()
        opt = AdamW(model, learning_rate=1e-3)
        assert opt.managed_names() == model.trainable_manifest()

    def test_zero_lr_leaves_params_bit_unchanged(self):
        model = tiny_model()
        opt = AdamW(model, learning_rate=0.0, weight_decay=0.05)
        before = snapshot_model(model)
        images, labels = fixed_batch(model)
        train_step(model, opt, images, labels)
        after = snapshot_model(model)
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])


class TestTrainStep:
    def test_loss_decreases_on_repeated_batch(self):
        model = tiny_model()
        opt = AdamW(model, learning_rate=3e-3, weight_decay=0.0)
        images, labels = fixed_batch(model, batch=16)
        losses = [train_step(model, opt, images, labels).loss for _ in range(200)]
        window = 50
        for i in range(len(losses) - window):
            assert losses[i + window] < losses[i], f"no decrease across steps {i}..{i + window}"

    def test_identical_seeds_identical_trajectories(self):
        trajectories = []
        for _ in range(2):
            model = tiny_model(seed=5)
            opt = AdamW(model, learning_rate=1e-3, weight_decay=0.05)
            images, labels = fixed_batch(model)
            trajectories.append([train_step(model, opt, images, labels).loss for _ in range(5)])
        assert trajectories[0] == trajectories[1]

    def test_frozen_params_bit_identical_after_steps(self):
        model = tiny_model()
        opt = AdamW(model, learning_rate=1e-2, weight_decay=0.05)
        before = snapshot_model(model)
        images, labels = fixed_batch(model)
        for _ in range(3):
            train_step(model, opt, images, labels)
        report = audit_freeze(model, before, snapshot_model(model))
        assert report.violations == []
        assert "backbone.blocks.00.ln1.gamma" in report.changed_trainable

    def test_nan_input_aborts_with_names(self):
        model = tiny_model()
        opt = AdamW(model, learning_rate=1e-3)
        images, labels = fixed_batch(model)
        images = images.copy()
        images[0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingAborted) as excinfo:
            train_step(model, opt, images, labels)
        assert "loss" in str(excinfo.value)

    def test_loss_invariant_under_batch_permutation(self):
        model = tiny_model()
        images, labels = fixed_batch(model, batch=12)
        perm = np.random.default_rng(3).permutation(12)
        with record():
            a = ops.cross_entropy(model.forward_classify(Tensor(images)), labels)
        with record():
            b = ops.cross_entropy(
                model.forward_classify(Tensor(images[perm])), labels[perm]
            )
        assert a.item() == pytest.approx(b.item(), rel=1e-6)


class TestFreezeAudit:
    def test_clean_run_reports_empty(self):
        model = tiny_model()
        before = snapshot_model(model)
        report = audit_freeze(model, before, snapshot_model(model))
        assert report.clean
        assert report.changed_trainable == []

    def test_leaked_write_into_frozen_weight_flagged(self):
        model = tiny_model()
        before = snapshot_model(model)
        model.params["backbone.blocks.01.attn.qkv.weight"].value.data[0, 0] += 1e-3
        report = audit_freeze(model, before, snapshot_model(model))
        assert report.violations == ["backbone.blocks.01.attn.qkv.weight"]

    def test_mismatched_manifests_rejected(self):
        model = tiny_model()
        before = snapshot_model(model)
        after = snapshot_model(model)
        after.pop("head.bias")
        with pytest.raises(AuditError):
            audit_freeze(model, before, after)


class TestGradientIsolation:
    def test_frozen_have_no_grad_trainable_reachable_do(self):
        model = tiny_model()
        images, labels = fixed_batch(model)
        with record():
            loss = ops.cross_entropy(model.forward_classify(Tensor(images)), labels)
        backward(loss)
        for name, p in model.params.items():
            if not p.trainable:
                assert p.grad is None, f"frozen {name} got a gradient"
        # everything on the loss path must have one (final LN is off-path)
        on_path = [n for n in model.trainable_manifest() if not n.startswith("backbone.ln_final")]
        for name in on_path:
            assert model.params[name].grad is not None, f"trainable {name} missing gradient"


class TestGradCheck:
    def test_tiny_model_passes(self):
        model = tiny_model()
        model.to_dtype(np.float64)
        images, labels = fixed_batch(model, batch=4)
        report = grad_check(model, images.astype(np.float64), labels, subset_size=60, seed=1)
        assert report.max_relative_error < 1e-3

    def test_requires_float64(self):
        model = tiny_model()
        images, labels = fixed_batch(model, batch=2)
        with pytest.raises(ConfigError):
            grad_check(model, images, labels, subset_size=4)

    def test_frozen_entry_reports_no_gradient(self):
        model = tiny_model()
        model.to_dtype(np.float64)
        images, labels = fixed_batch(model, batch=2)
        report = grad_check(
            model,
            images.astype(np.float64),
            labels,
            entries=[("backbone.blocks.00.attn.qkv.weight", 0)],
        )
        assert report.entries[0].status == "no gradient"
        assert report.entries[0].relative_error is None

    def test_corrupted_backward_rule_is_caught(self, monkeypatch):
        # scaling the gelu derivative must blow past the tolerance
        original = tensor_ops.gelu_grad
        monkeypatch.setattr(tensor_ops, "gelu_grad", lambda x, cdf: 1.5 * original(x, cdf))
        model = tiny_model()
        model.to_dtype(np.float64)
        images, labels = fixed_batch(model, batch=4)
        report = grad_check(model, images.astype(np.float64), labels, subset_size=80, seed=2)
        assert report.max_relative_error > 1e-1


class TestEvaluate:
    def test_matches_manual_accuracy(self):
        model = tiny_model()
        spec = SyntheticSpec(num_classes=10, samples_per_class=6, image_size=32, seed=1)
        ds = generate(spec)
        acc = evaluate(model, [(ds.images, ds.labels)])
        logits = model.forward_classify(Tensor(ds.images)).data
        assert acc == pytest.approx(float((logits.argmax(1) == ds.labels).mean()))
