"""Minimal layer system on top of the operator core.

Modules discover parameters and child modules by scanning instance
attributes in construction order, so state naming and iteration are
deterministic. Buffers (batch-norm running statistics) are declared per
class via ``buffer_names``.
"""

from __future__ import annotations

import numpy as np

from .diffops import ConvSpec, Tensor, batch_norm, convolve, relu


class Module:
    training: bool = True
    buffer_names: tuple = ()

    def _attr_children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._attr_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._attr_children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for _, child in self._attr_children():
            yield from child.modules()

    def train(self):
        for m in self.modules():
            m.training = True
        return self

    def eval(self):
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict:
        """Named parameter and buffer arrays, in a stable order."""
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state(self, state: dict) -> None:
        own = self.state()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(extra)}")
        for name, p in self.named_parameters():
            arr = state[name]
            if arr.shape != p.data.shape:
                raise ValueError(f"state tensor {name}: shape {arr.shape} "
                                 f"vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
            p.grad = None
        for m, prefix in self._modules_with_prefix():
            for bname in m.buffer_names:
                arr = state[prefix + bname]
                setattr(m, bname, arr.astype(getattr(m, bname).dtype, copy=True))

    def _modules_with_prefix(self, prefix: str = ""):
        yield self, prefix
        for name, child in self._attr_children():
            yield from child._modules_with_prefix(prefix + name + ".")

    def cast(self, dtype):
        """Convert every parameter and buffer to ``dtype`` in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for bname in m.buffer_names:
                setattr(m, bname, getattr(m, bname).astype(dtype))
        return self

    def parameter_total(self) -> int:
        return sum(int(p.data.size) for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1,
                 padding=None, rng=None):
        k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        s = (stride, stride) if isinstance(stride, int) else tuple(stride)
        p = None if padding is None else (
            (padding, padding) if isinstance(padding, int) else tuple(padding))
        self.spec = ConvSpec.initialized(in_channels, out_channels, k, rng,
                                         stride=s, padding=p)
        self.weight = self.spec.weight
        self.bias = self.spec.bias

    def forward(self, x):
        return convolve(x, self.spec)


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, padding=None,
                 rng=None):
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        p = None if padding is None else (
            (padding,) * 3 if isinstance(padding, int) else tuple(padding))
        self.spec = ConvSpec.initialized(in_channels, out_channels, k, rng,
                                         padding=p)
        self.weight = self.spec.weight
        self.bias = self.spec.bias

    def forward(self, x):
        return convolve(x, self.spec)


class BatchNorm(Module):
    """Affine batch normalization; gamma starts at 1, beta at 0."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels, dtype=np.float32),
                            requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32),
                           requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, self.training, self.eps,
                          self.momentum)


class ConvBlock2d(Module):
    """conv -> batch norm -> optional ReLU."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1,
                 rng=None, activate=True):
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, rng=rng)
        self.bn = BatchNorm(out_channels)
        self.activate = activate

    def forward(self, x):
        y = self.bn(self.conv(x))
        return relu(y) if self.activate else y


class ConvBlock3d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, rng=None,
                 activate=True):
        self.conv = Conv3d(in_channels, out_channels, kernel, rng=rng)
        self.bn = BatchNorm(out_channels)
        self.activate = activate

    def forward(self, x):
        y = self.bn(self.conv(x))
        return relu(y) if self.activate else y
