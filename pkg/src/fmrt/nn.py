"""Parameter containers built on the autodiff ops."""

from __future__ import annotations

from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np

from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal module: parameters are `Tensor` attributes with ``requires_grad``.

    Child modules and lists of modules are discovered by attribute traversal,
    in attribute-definition order, so parameter names are stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def zero_(self) -> "Module":
        """Set every parameter to zero (used by identity/residual checks)."""
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(_uniform(rng, (dout, din), din))
        self.bias = parameter(_uniform(rng, (dout,), din)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class DWConv(Module):
    """Depth-wise k x k convolution without bias."""

    def __init__(self, channels: int, k: int, rng: np.random.Generator):
        self.k = k
        self.kernels = parameter(_uniform(rng, (channels, k, k), k * k))

    def forward(self, x: Tensor) -> Tensor:
        return ops.dw_conv2d(x, self.kernels)


class PWConv(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.weight = parameter(_uniform(rng, (cout, cin), cin))
        self.bias = parameter(_uniform(rng, (cout,), cin))

    def forward(self, x: Tensor) -> Tensor:
        return ops.pw_conv2d(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1):
        self.stride = stride
        self.padding = (k - 1) // 2
        # He-style scale keeps ReLU stacks from collapsing at init.
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = parameter((rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32))
        self.bias = parameter(np.zeros(cout, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = parameter(np.ones(dim, dtype=np.float32))
        self.beta = parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
