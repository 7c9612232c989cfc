"""Parameterized layers with explicit forward/backward.

Each layer caches what its backward needs during ``forward`` and, in
``backward(dy)``, accumulates parameter gradients into ``self.grads`` and
returns the gradient w.r.t. its input. A layer instance must be used at most
once per forward pass.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._children: list[tuple[str, "Module"]] = []

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        self._children.append((name, module))
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self._children:
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, g in self.grads.items():
            yield prefix + name, g
        for cname, child in self._children:
            yield from child.named_grads(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self._slots())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, (mod, key) in own.items():
            arr = np.asarray(state[name])
            if arr.shape != mod.params[key].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {mod.params[key].shape}")
            mod.params[key] = arr.astype(mod.params[key].dtype, copy=True)
            mod.grads[key] = np.zeros_like(mod.params[key])

    def _slots(self, prefix: str = ""):
        for name in self.params:
            yield prefix + name, (self, name)
        for cname, child in self._children:
            yield from child._slots(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, g in self.named_grads():
            g[...] = 0

    def astype(self, dtype) -> "Module":
        for _, (mod, key) in self._slots():
            mod.params[key] = mod.params[key].astype(dtype)
            mod.grads[key] = np.zeros_like(mod.params[key])
        return self

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.dtype(np.float32)

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(np.float32)


class Linear(Module):
    """Channel-mixing map over the last axis (a 1x1 convolution on maps)."""

    def __init__(self, c_in: int, c_out: int, rng, bias: bool = True, std: float = 0.02):
        super().__init__()
        self.add_param("weight", trunc_normal(rng, (c_in, c_out), std))
        if bias:
            self.add_param("bias", np.zeros(c_out, np.float32))

    def forward(self, x):
        self._x = x
        y = T.matmul(x, self.params["weight"])
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        w = self.params["weight"]
        x2 = self._x.reshape(-1, w.shape[0])
        dy2 = dy.reshape(-1, w.shape[1])
        self.grads["weight"] += x2.T @ dy2
        if "bias" in self.params:
            self.grads["bias"] += dy2.sum(axis=0)
        return dy @ w.T


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("weight", np.ones(c, np.float32))
        self.add_param("bias", np.zeros(c, np.float32))

    def forward(self, x):
        y, self._cache = T.layer_norm(x, self.params["weight"], self.params["bias"], self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = T.layer_norm_backward(dy, self._cache)
        self.grads["weight"] += dg
        self.grads["bias"] += db
        return dx


class GELU(Module):
    def forward(self, x):
        self._x = x
        y, self._th = T.gelu(x, return_tanh=True)
        return y

    def backward(self, dy):
        return T.gelu_backward(self._x, dy, self._th)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, stride: int = 1):
        super().__init__()
        self.stride = stride
        std = np.sqrt(2.0 / (k * k * c_in))
        self.add_param("weight", rng.normal(0, std, (k, k, c_in, c_out)).astype(np.float32))
        self.add_param("bias", np.zeros(c_out, np.float32))
        self.input_grad = True

    def forward(self, x):
        self._x = x
        return T.conv2d(x, self.params["weight"], self.params["bias"], self.stride)

    def backward(self, dy):
        dx, dw, db = T.conv2d_backward(
            self._x, self.params["weight"], dy, self.stride, need_dx=self.input_grad
        )
        self.grads["weight"] += dw
        self.grads["bias"] += db
        return dx


class DepthwiseConv2d(Module):
    def __init__(self, c: int, k: int, rng, stride: int = 1, std: float | None = None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.stride = stride
        std = np.sqrt(2.0 / (k * k)) if std is None else std
        self.add_param("weight", trunc_normal(rng, (k, k, c), std))
        self.add_param("bias", np.zeros(c, np.float32))

    def forward(self, x):
        self._x = x
        return T.depthwise_conv2d(x, self.params["weight"], self.stride, self.params["bias"])

    def backward(self, dy):
        dx, dk, db = T.depthwise_conv2d_backward(self._x, self.params["weight"], dy, self.stride)
        self.grads["weight"] += dk
        self.grads["bias"] += db
        return dx


class FFN(Module):
    """Pointwise C -> ratio*C -> C with GELU."""

    def __init__(self, c: int, ratio: int, rng):
        super().__init__()
        self.add_child("fc1", Linear(c, ratio * c, rng))
        self.add_child("act", GELU())
        self.add_child("fc2", Linear(ratio * c, c, rng))

    def forward(self, x):
        return self.fc2.forward(self.act.forward(self.fc1.forward(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class ResidualFFN(Module):
    """``x + FFN(LN(x))``."""

    def __init__(self, c: int, ratio: int, rng):
        super().__init__()
        self.add_child("norm", LayerNorm(c))
        self.add_child("ffn", FFN(c, ratio, rng))

    def forward(self, x):
        return x + self.ffn.forward(self.norm.forward(x))

    def backward(self, dy):
        return dy + self.norm.backward(self.ffn.backward(dy))
