"""Parameter registry and weight initialization."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Parameter, Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std (deterministic given rng)."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    for _ in range(16):
        mask = np.abs(out) > bound
        if not mask.any():
            break
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
    return np.clip(out, -bound, bound).astype(dtype)


class ParamSet:
    """Ordered name -> Parameter mapping with hierarchical unique names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, array: np.ndarray, trainable: bool) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(array), trainable)
        self._params[name] = p
        return p

    def merge(self, other: "ParamSet") -> None:
        for name, p in other._params.items():
            if name in self._params:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self._params[name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Parameter]]:
        return [(n, self._params[n]) for n in self.names()]

    def values(self) -> list[Parameter]:
        return [self._params[n] for n in self.names()]

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.items() if p.trainable]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self.items() if not p.trainable]

    def num_scalars(self, names=None) -> int:
        selected = self.names() if names is None else names
        return int(sum(self._params[n].num_scalars() for n in selected))

    def snapshot(self) -> dict[str, np.ndarray]:
        """Bit-exact copies of every value, keyed by name."""
        return {n: p.data.copy() for n, p in self.items()}

    def load(self, arrays: dict[str, np.ndarray], prefix: str = "") -> list[str]:
        """Assign matching entries in place; returns the names written."""
        written = []
        for name, p in self.items():
            key = prefix + name
            if key not in arrays:
                continue
            incoming = np.asarray(arrays[key])
            if incoming.shape != p.data.shape:
                raise ConfigError(
                    f"shape mismatch for {name!r}: checkpoint {incoming.shape}, model {p.data.shape}"
                )
            p.value = Tensor(incoming, dtype=p.data.dtype, requires_grad=p.trainable)
            written.append(name)
        return written

    def to_dtype(self, dtype) -> None:
        dtype = np.dtype(dtype)
        for p in self._params.values():
            p.value = Tensor(p.value.data, dtype=dtype, requires_grad=p.trainable)
