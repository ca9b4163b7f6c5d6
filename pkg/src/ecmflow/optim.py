"""Trainable parameter storage and the Adam update rule."""

from __future__ import annotations

import numpy as np

from ecmflow.tensor import Tensor, TensorError, _wrap


class ParamStore:
    """Named trainable tensors in a stable creation order.

    Values are replaced wholesale on update (tensors stay immutable), so a
    forward pass always closes over a consistent snapshot.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise TensorError(f"duplicate parameter name: {name}")
        arr = np.asarray(array)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        t = _wrap(arr, f"param:{name}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def replace(self, name: str, array: np.ndarray) -> None:
        if name not in self._params:
            raise TensorError(f"unknown parameter: {name}")
        old = self._params[name]
        self._params[name] = _wrap(
            np.asarray(array, dtype=old.data.dtype), f"param:{name}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise TensorError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != tuple(self._params[name].shape):
                raise TensorError(
                    f"shape mismatch for {name}: "
                    f"{arr.shape} vs {self._params[name].shape}")
            self.replace(name, arr)


def he_conv_init(rng: np.random.Generator, out_ch: int, in_ch: int,
                 kh: int, kw: int) -> np.ndarray:
    """Kaiming-normal weights for a conv layer, std = sqrt(2 / fan_in)."""
    fan_in = in_ch * kh * kw
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw)).astype(np.float32)


class Adam:
    """Adam with bias correction; state arrays keyed by parameter name."""

    def __init__(self, params: ParamStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
            self.params.replace(name, p.data - update)
