"""Training loop, AdamW, freeze audit, and the gradient-verification harness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import AuditError, ConfigError, TrainingAborted
from .model import HSTModel
from .tensor import Tensor, backward, ops, record


def _is_no_decay(name: str) -> bool:
    """Weight decay skips LN affines, biases, and the meta tokens."""
    return (
        name.endswith(".gamma")
        or name.endswith(".beta")
        or name.endswith(".bias")
        or name == "backbone.meta_tokens"
    )


class AdamW:
    """Decoupled weight decay Adam over the model's trainable parameters."""

    def __init__(
        self,
        model: HSTModel,
        learning_rate: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        self.model = model
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, p in model.params.items():
            if p.trainable:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def managed_names(self) -> list[str]:
        return sorted(self.m)

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name in self.managed_names():
            p = self.model.params[name]
            if p.grad is None:
                continue  # trainable but not reached by this loss
            g = p.grad.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and not _is_no_decay(name):
                update = update + self.weight_decay * p.data
            p.value.data -= (self.learning_rate * update).astype(p.data.dtype)

    def clear_grads(self) -> None:
        for name in self.managed_names():
            self.model.params[name].clear_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.managed_names():
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.managed_names():
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"optim.{slot}.{name}"
                if key not in arrays:
                    raise ConfigError(f"optimizer state missing entry {key!r}")
                incoming = np.asarray(arrays[key])
                if incoming.shape != store[name].shape:
                    raise ConfigError(f"optimizer state shape mismatch for {key!r}")
                store[name] = incoming.astype(store[name].dtype)
        self.step_count = step_count


@dataclass
class StepStats:
    step: int
    loss: float
    accuracy: float
    learning_rate: float


def _nonfinite_names(model: HSTModel) -> list[str]:
    names = []
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            names.append(name)
        elif p.grad is not None and not np.all(np.isfinite(p.grad.data)):
            names.append(f"{name}.grad")
    return names


def train_step(model: HSTModel, optimizer: AdamW, images: np.ndarray, labels: np.ndarray) -> StepStats:
    """One forward/backward/update cycle over a batch."""
    x = Tensor(images, dtype=model.dtype)
    with record():
        logits = model.forward_classify(x)
        loss = ops.cross_entropy(logits, labels)
    loss_value = loss.item()
    if not math.isfinite(loss_value):
        offenders = ["loss"] + _nonfinite_names(model)
        raise TrainingAborted("non-finite loss encountered", offenders)
    backward(loss)
    optimizer.step()
    optimizer.clear_grads()
    accuracy = float((logits.data.argmax(axis=1) == labels).mean())
    return StepStats(optimizer.step_count, loss_value, accuracy, optimizer.learning_rate)


def evaluate(model: HSTModel, batches: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Classification accuracy over an iterable of batches (no tape, no grads)."""
    correct = 0
    total = 0
    for images, labels in batches:
        logits = model.forward_classify(Tensor(images, dtype=model.dtype))
        correct += int((logits.data.argmax(axis=1) == labels).sum())
        total += len(labels)
    return correct / total if total else float("nan")


def train(
    model: HSTModel,
    optimizer: AdamW,
    epochs: int,
    batch_fn: Callable[[int], Iterable[tuple[np.ndarray, np.ndarray]]],
    on_step: Callable[[StepStats], None] | None = None,
    on_epoch_end: Callable[[int], None] | None = None,
    start_step: int = 0,
) -> list[StepStats]:
    """Drive train_step over per-epoch batch iterators.

    ``batch_fn(epoch)`` must yield the same deterministic batch sequence for
    a given epoch index, which is what makes resume-from-checkpoint land on
    the exact batch order of an uninterrupted run. ``start_step`` skips
    already-consumed batches when resuming mid-epoch.
    """
    history: list[StepStats] = []
    seen = 0
    for epoch in range(epochs):
        for images, labels in batch_fn(epoch):
            seen += 1
            if seen <= start_step:
                continue
            stats = train_step(model, optimizer, images, labels)
            history.append(stats)
            if on_step is not None:
                on_step(stats)
        if on_epoch_end is not None and seen > start_step:
            on_epoch_end(epoch)
    return history


# ---------------------------------------------------------------------------
# freeze audit


@dataclass
class FreezeAuditReport:
    violations: list[str]
    changed_trainable: list[str]

    @property
    def clean(self) -> bool:
        return not self.violations


def snapshot_model(model: HSTModel) -> dict[str, np.ndarray]:
    return model.snapshot()


def audit_freeze(
    model: HSTModel,
    before: dict[str, np.ndarray],
    after: dict[str, np.ndarray],
) -> FreezeAuditReport:
    """Compare two snapshots: any frozen parameter whose bytes differ is a
    violation; trainable parameters that moved are reported informationally.
    """
    if set(before) != set(after):
        raise AuditError(
            f"snapshot manifests differ: {sorted(set(before) ^ set(after))[:5]}"
        )
    model_names = set(model.params.names())
    if set(before) != model_names:
        raise AuditError("snapshot manifest does not match the model's parameters")
    violations = []
    changed_trainable = []
    for name, p in model.params.items():
        identical = (
            before[name].shape == after[name].shape
            and before[name].tobytes() == after[name].tobytes()
        )
        if identical:
            continue
        if p.trainable:
            changed_trainable.append(name)
        else:
            violations.append(name)
    return FreezeAuditReport(violations, changed_trainable)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float | None
    numeric: float | None
    relative_error: float | None

    @property
    def status(self) -> str:
        return "ok" if self.relative_error is not None else "no gradient"


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        errors = [e.relative_error for e in self.entries if e.relative_error is not None]
        return max(errors) if errors else 0.0

    def lines(self) -> list[str]:
        out = [f"checked {len(self.entries)} scalars, max rel err {self.max_relative_error:.3e}"]
        worst = sorted(
            (e for e in self.entries if e.relative_error is not None),
            key=lambda e: -(e.relative_error or 0),
        )[:5]
        for e in worst:
            out.append(
                f"  {e.name}[{e.index}] analytic={e.analytic:+.6e} "
                f"numeric={e.numeric:+.6e} rel={e.relative_error:.3e}"
            )
        return out


def _loss_of(model: HSTModel, images: np.ndarray, labels: np.ndarray) -> float:
    logits = model.forward_classify(Tensor(images, dtype=model.dtype))
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def grad_check(
    model: HSTModel,
    images: np.ndarray,
    labels: np.ndarray,
    subset_size: int = 200,
    seed: int = 0,
    step: float = 1e-4,
    entries: list[tuple[str, int]] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Samples ``subset_size`` scalars uniformly over all trainable parameters
    (or checks the explicit (name, flat index) pairs given). The model must
    be in float64; central differences use the given step. Scalars without a
    gradient (frozen, or off the loss path) are reported as "no gradient".
    """
    if model.dtype != np.float64:
        raise ConfigError("grad_check requires the model in float64 (model.to_dtype)")
    x = Tensor(images, dtype=np.float64)
    with record():
        logits = model.forward_classify(x)
        loss = ops.cross_entropy(logits, labels)
    backward(loss)

    if entries is None:
        rng = np.random.default_rng(seed)
        trainable = model.trainable_manifest()
        sizes = np.array([model.params[n].num_scalars() for n in trainable])
        bounds = np.cumsum(sizes)
        picks = rng.integers(0, bounds[-1], size=subset_size)
        entries = []
        for pick in picks:
            slot = int(np.searchsorted(bounds, pick, side="right"))
            offset = int(pick - (bounds[slot - 1] if slot else 0))
            entries.append((trainable[slot], offset))

    report = GradCheckReport()
    for name, index in entries:
        p = model.params[name]
        grad = p.grad.data.reshape(-1)[index] if p.grad is not None else None
        if not p.trainable or grad is None:
            report.entries.append(GradCheckEntry(name, index, None, None, None))
            continue
        flat = p.value.data.reshape(-1)
        keep = flat[index]
        flat[index] = keep + step
        hi = _loss_of(model, images, labels)
        flat[index] = keep - step
        lo = _loss_of(model, images, labels)
        flat[index] = keep
        numeric = (hi - lo) / (2.0 * step)
        denom = max(abs(grad) + abs(numeric), 1e-6)
        rel = abs(grad - numeric) / denom
        report.entries.append(GradCheckEntry(name, index, float(grad), float(numeric), float(rel)))
    for name in model.params.names():
        model.params[name].clear_grad()
    return report
