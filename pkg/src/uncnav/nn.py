"""Parameter containers on top of the tensor core."""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    """Anything that owns named parameters, directly or through child modules."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, T.Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[T.Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 2.0):
        self.w = T.parameter(rng.normal(0.0, np.sqrt(gain / n_in), size=(n_in, n_out)))
        self.b = T.parameter(np.zeros(n_out))

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, gain=2.0):
        self.w = T.parameter(rng.normal(0.0, np.sqrt(gain / (c_in * kernel)), size=(c_out, c_in, kernel)))
        self.b = T.parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv1d(x, self.w, self.b, stride=self.stride, padding=self.padding)
