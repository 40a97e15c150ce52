"""Named parameter storage, initialisation and finite-difference checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import Tape, Tensor


class ParamStore:
    """Hierarchically named trainable tensors plus their momentum buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        t.zero_grad()
        self._params[name] = t
        self._momentum[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def momentum(self, name: str) -> np.ndarray:
        return self._momentum[name]

    def set_momentum(self, name: str, value: np.ndarray) -> None:
        if value.shape != self._params[name].shape:
            raise ValueError(f"momentum for {name!r} has shape {value.shape}")
        self._momentum[name] = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._params.items()}

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(values)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for n, v in values.items():
            if v.shape != self._params[n].shape:
                raise ValueError(f"{n}: expected shape {self._params[n].shape}, got {v.shape}")
            self._params[n].data = np.array(v, dtype=np.float64)


def glorot_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tol]

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def __str__(self) -> str:
        lines = [f"{n}: {e:.3e}{'' if e < self.tol else '  FAIL'}" for n, e in self.errors.items()]
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    names=None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    The error for one entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from turning finite-difference
    round-off into a huge relative error.  ``f`` must be deterministic.
    """
    names = params.names() if names is None else list(names)
    params.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = {n: params[n].grad.copy() for n in names}

    report = GradCheckReport(tol=tol)
    for n in names:
        p = params[n]
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * step)
        a = analytic[n].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report.errors[n] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return report
