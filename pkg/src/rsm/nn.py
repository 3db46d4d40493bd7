"""Parameter containers shared by all network blocks.

A Module owns named parameter Tensors and child Modules; ``named_parameters``
walks the tree in attribute order, which fixes the parameter ordering used
by the optimizer and the checkpoint writer.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _collect(key, value, out):
    if isinstance(value, Tensor):
        if value.requires_grad:
            out.append((key, value))
    elif isinstance(value, Module):
        out.extend(value.named_parameters(key))
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _collect(f"{key}.{i}", item, out)


class Module:
    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}.{name}" if prefix else name
            _collect(key, value, out)
        return out

    def num_params(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def uniform_init(rng, shape, bound, dtype):
    """U(-bound, bound), the stock fan-in init for linear/conv weights."""
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def full_init(shape, value, dtype):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)
