"""Named parameter store with AdamW (decoupled weight decay)."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor


class ParamStore:
    """Insertion-ordered named parameters plus per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}", field="name")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise ValidationError(f"missing parameter {name!r} in state", field=name)
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValidationError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}",
                    field=name,
                )
            p.data = arr.copy()


def adamw_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update over every parameter with a grad.

    The whole step aborts, updating nothing, if any gradient is non-finite.
    """
    b1, b2 = betas
    for name, p in store.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise ValidationError(
                f"non-finite gradient for parameter {name!r}; step aborted", field=name
            )
    store.step_count += 1
    t = store.step_count
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = store._m[name]
        v = store._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
