"""Differentiable operator core.

A small reverse-mode engine over float32/float64 numpy arrays in fixed
NC(D)HW layout. Every operator validates shapes eagerly, runs its heavy
lifting through the selected kernel backend (see ``semstereo._kernels``)
and registers a backward closure on the output tensor.

Conventions, fixed once and relied on by the whole package:

* bilinear upsampling samples at ``(i + 0.5)/factor - 0.5`` (align
  corners off), clamped at the edges;
* horizontal warping clamps out-of-range samples to the border;
* width shifting zero-fills vacated columns;
* batch norm uses eps 1e-5, running-stat momentum 0.1 and biased
  variance everywhere;
* reductions run in a fixed sequential order, so identical inputs give
  bitwise-identical outputs.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """An operator contract on tensor shapes was violated."""


_FLOAT_DTYPES = (np.float32, np.float64)

_GRAD_ENABLED = [True]

# op invocation and analytic FLOP counters keyed by the innermost active
# scope label; the anytime-inference tests use them to prove stages did
# not run, the profiler to attribute work per stage
_SCOPE_STACK: list[str] = []
_OP_COUNTS: dict[str, dict[str, int]] = {}
_FLOP_COUNTS: dict[str, int] = {}


def _bump(name: str, flops: int) -> None:
    scope = _SCOPE_STACK[-1] if _SCOPE_STACK else ""
    per = _OP_COUNTS.setdefault(scope, {})
    per[name] = per.get(name, 0) + 1
    _FLOP_COUNTS[scope] = _FLOP_COUNTS.get(scope, 0) + int(flops)


@contextlib.contextmanager
def op_scope(label: str):
    """Attribute operator invocations to ``label`` while active."""
    _SCOPE_STACK.append(label)
    try:
        yield
    finally:
        _SCOPE_STACK.pop()


def reset_op_counts() -> None:
    _OP_COUNTS.clear()
    _FLOP_COUNTS.clear()


def op_counts() -> dict[str, dict[str, int]]:
    """Snapshot of per-scope operator invocation counts."""
    return {scope: dict(per) for scope, per in _OP_COUNTS.items()}


def flop_counts() -> dict[str, int]:
    """Per-scope analytic forward FLOPs (2 per multiply-add; fixed
    per-element conventions for the cheap elementwise operators)."""
    return dict(_FLOP_COUNTS)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference mode)."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    """Dense N-dimensional array of reals with an optional gradient.

    Layout convention is batch x channels x [depth x] height x width.
    ``grad`` accumulates and always matches ``data`` in shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor through its graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return (f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


def _result(data, parents, backward, name, flops: int = 0) -> Tensor:
    _bump(name, flops)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# elementwise / structural operators

def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape,
             f"add: shapes differ, {a.shape} vs {b.shape}")

    def bwd(g):
        a._accum(g)
        b._accum(g)

    return _result(a.data + b.data, (a, b), bwd, "add", a.data.size)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        a._accum(g * s)

    return _result(a.data * a.dtype.type(s), (a,), bwd, "scale", a.data.size)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        a._accum(g * mask)

    return _result(np.where(mask, a.data, a.dtype.type(0)), (a,), bwd, "relu",
                   a.data.size)


def softmax(a: Tensor, axis: int) -> Tensor:
    _require(-a.ndim <= axis < a.ndim,
             f"softmax: axis {axis} invalid for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        a._accum((g - (g * y).sum(axis=axis, keepdims=True)) * y)

    return _result(y, (a,), bwd, "softmax", 5 * a.data.size)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), bwd, "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    _require(len(tensors) > 0, "concat: no inputs")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tensors, bwd, "concat")


def expectation(probs: Tensor, values, axis: int) -> Tensor:
    """Weighted sum of ``values`` under ``probs`` along ``axis``.

    ``values`` is a constant 1-D vector matching the reduced extent; the
    reduced axis is kept with extent 1. This is the reduction step of
    soft-argmin.
    """
    values = np.asarray(values, dtype=probs.dtype)
    _require(values.ndim == 1 and values.shape[0] == probs.shape[axis],
             f"expectation: {values.shape[0]} values for axis extent "
             f"{probs.shape[axis]}")
    vshape = [1] * probs.ndim
    vshape[axis] = values.shape[0]
    v = values.reshape(vshape)

    def bwd(g):
        probs._accum(g * v)

    return _result((probs.data * v).sum(axis=axis, keepdims=True),
                   (probs,), bwd, "expectation", 2 * probs.data.size)


# ---------------------------------------------------------------------------
# convolution

class ConvSpec:
    """Parameters of one convolution: geometry plus weight/bias tensors.

    ``kernel``, ``stride`` and ``padding`` have one entry per spatial
    axis (2 entries -> 2D conv on NCHW, 3 entries -> 3D conv on NCDHW).
    """

    def __init__(self, kernel, stride, padding, in_channels, out_channels,
                 weight: Tensor, bias: Tensor):
        self.kernel = tuple(int(k) for k in kernel)
        self.stride = tuple(int(s) for s in stride)
        self.padding = tuple(int(p) for p in padding)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        nd = len(self.kernel)
        _require(nd in (2, 3), f"ConvSpec: {nd} spatial axes unsupported")
        _require(len(self.stride) == nd and len(self.padding) == nd,
                 "ConvSpec: stride/padding arity must match kernel arity")
        if nd == 3:
            _require(self.stride == (1, 1, 1),
                     "ConvSpec: 3D convolutions are stride-1 only")
        expected = (self.out_channels, self.in_channels) + self.kernel
        _require(weight.shape == expected,
                 f"ConvSpec: weight shape {weight.shape}, expected {expected}")
        _require(bias.shape == (self.out_channels,),
                 f"ConvSpec: bias shape {bias.shape}, expected "
                 f"({self.out_channels},)")
        self.weight = weight
        self.bias = bias

    @classmethod
    def initialized(cls, in_channels, out_channels, kernel, rng,
                    stride=None, padding=None, dtype=np.float32):
        """Fan-in-scaled zero-mean Gaussian weights, zero bias."""
        kernel = tuple(kernel)
        nd = len(kernel)
        if stride is None:
            stride = (1,) * nd
        if padding is None:
            padding = tuple(k // 2 for k in kernel)
        fan_in = in_channels * int(np.prod(kernel))
        w = rng.standard_normal((out_channels, in_channels) + kernel)
        w = (w / np.sqrt(fan_in)).astype(dtype)
        b = np.zeros(out_channels, dtype=dtype)
        return cls(kernel, stride, padding, in_channels, out_channels,
                   Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def convolve(x: Tensor, spec: ConvSpec) -> Tensor:
    nd = len(spec.kernel)
    _require(x.ndim == nd + 2,
             f"convolve: input rank {x.ndim}, expected {nd + 2}")
    _require(x.shape[1] == spec.in_channels,
             f"convolve: channel axis has {x.shape[1]} channels, spec "
             f"expects {spec.in_channels}")
    for ax in range(nd):
        ext = x.shape[2 + ax] + 2 * spec.padding[ax]
        _require(ext >= spec.kernel[ax],
                 f"convolve: spatial axis {ax} extent {x.shape[2 + ax]} too "
                 f"small for kernel {spec.kernel[ax]} with padding "
                 f"{spec.padding[ax]}")
    w, b = spec.weight, spec.bias
    if nd == 2:
        sh, sw = spec.stride
        ph, pw = spec.padding
        y = K.conv2d_fwd(x.data, w.data, b.data, sh, sw, ph, pw)

        def bwd(g):
            if x.requires_grad:
                B, C, H, W = x.shape
                x._accum(K.conv2d_bwd_x(g, w.data, B, C, H, W, sh, sw, ph, pw))
            if w.requires_grad:
                w._accum(K.conv2d_bwd_w(g, x.data, spec.kernel[0],
                                        spec.kernel[1], sh, sw, ph, pw))
            if b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))

        flops = y.size * (2 * spec.in_channels * spec.kernel[0]
                          * spec.kernel[1] + 1)
        return _result(y, (x, w, b), bwd, "conv2d", flops)

    pd, ph, pw = spec.padding
    y = K.conv3d_fwd(x.data, w.data, b.data, pd, ph, pw)

    def bwd(g):
        if x.requires_grad:
            B, C, D, H, W = x.shape
            x._accum(K.conv3d_bwd_x(g, w.data, B, C, D, H, W, pd, ph, pw))
        if w.requires_grad:
            w._accum(K.conv3d_bwd_w(g, x.data, *spec.kernel, pd, ph, pw))
        if b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3, 4)))

    flops = y.size * (2 * spec.in_channels * spec.kernel[0] * spec.kernel[1]
                      * spec.kernel[2] + 1)
    return _result(y, (x, w, b), bwd, "conv3d", flops)


# ---------------------------------------------------------------------------
# pooling / normalization

def max_pool_2x2(x: Tensor) -> Tensor:
    _require(x.ndim == 4, f"max_pool_2x2: input rank {x.ndim}, expected 4")
    _require(x.shape[2] % 2 == 0,
             f"max_pool_2x2: height {x.shape[2]} not even")
    _require(x.shape[3] % 2 == 0,
             f"max_pool_2x2: width {x.shape[3]} not even")
    y, idx = K.maxpool2x2_fwd(x.data)

    def bwd(g):
        x._accum(K.maxpool2x2_bwd(g, idx, x.shape[2], x.shape[3]))

    return _result(y, (x,), bwd, "max_pool_2x2", 3 * y.size)


def _per_channel(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean,
               running_var, training: bool, eps: float = 1e-5,
               momentum: float = 0.1) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place by exponential moving average;
    eval mode normalizes with the running buffers.
    """
    _require(x.ndim in (4, 5), f"batch_norm: input rank {x.ndim}")
    C = x.shape[1]
    _require(gamma.shape == (C,),
             f"batch_norm: gamma length {gamma.shape[0] if gamma.ndim else 0} "
             f"vs {C} channels")
    _require(beta.shape == (C,),
             f"batch_norm: beta length {beta.shape[0] if beta.ndim else 0} "
             f"vs {C} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    n = int(x.data.size // C) if C else 0
    _require(n > 0, "batch_norm: zero-element channel")
    dt = x.dtype.type

    if training:
        mu = x.data.mean(axis=axes)
        var = ((x.data - _per_channel(mu, x.ndim)) ** 2).mean(axis=axes)
        running_mean *= dt(1 - momentum)
        running_mean += dt(momentum) * mu.astype(running_mean.dtype)
        running_var *= dt(1 - momentum)
        running_var += dt(momentum) * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    ivar = dt(1) / np.sqrt(var + dt(eps))
    xhat = (x.data - _per_channel(mu, x.ndim)) * _per_channel(ivar, x.ndim)
    y = _per_channel(gamma.data, x.ndim) * xhat + _per_channel(beta.data, x.ndim)

    def bwd(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))
        if x.requires_grad:
            giv = _per_channel(gamma.data * ivar, x.ndim)
            if training:
                gm = g.mean(axis=axes)
                gxm = (g * xhat).mean(axis=axes)
                x._accum(giv * (g - _per_channel(gm, x.ndim)
                                - xhat * _per_channel(gxm, x.ndim)))
            else:
                x._accum(giv * g)

    return _result(y, (x, gamma, beta), bwd, "batch_norm", 6 * x.data.size)


# ---------------------------------------------------------------------------
# resampling

def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    _require(x.ndim == 4, f"upsample_bilinear: input rank {x.ndim}, expected 4")
    factor = int(factor)
    _require(factor >= 1, "upsample_bilinear: factor must be >= 1")
    y = K.upsample_bilinear_fwd(x.data, factor)

    def bwd(g):
        x._accum(K.upsample_bilinear_bwd(g, factor, x.shape[2], x.shape[3]))

    return _result(y, (x,), bwd, "upsample", 8 * y.size)


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    return upsample_bilinear(x, 2)


def shift_width(x: Tensor, d: int) -> Tensor:
    """Move values by ``d`` along width, zero-filling vacated columns."""
    d = int(d)
    W = x.shape[-1]
    _require(abs(d) < W, f"shift_width: |d|={abs(d)} >= width {W}")
    out = np.zeros_like(x.data)
    if d > 0:
        out[..., d:] = x.data[..., :W - d]
    elif d < 0:
        out[..., :W + d] = x.data[..., -d:]
    else:
        out[...] = x.data

    def bwd(g):
        gx = np.zeros_like(g)
        if d > 0:
            gx[..., :W - d] = g[..., d:]
        elif d < 0:
            gx[..., -d:] = g[..., :W + d]
        else:
            gx[...] = g
        x._accum(gx)

    return _result(out, (x,), bwd, "shift_width")


def warp_width(x: Tensor, disp: Tensor) -> Tensor:
    """Sample ``x`` at ``column - disp`` with linear interpolation.

    Out-of-range samples clamp to the border. Differentiable with
    respect to both the features and the disparity map.
    """
    _require(x.ndim == 4 and disp.ndim == 4,
             f"warp_width: ranks {x.ndim}/{disp.ndim}, expected 4/4")
    _require(disp.shape[1] == 1,
             f"warp_width: disparity has {disp.shape[1]} channels, expected 1")
    _require(disp.shape[0] == x.shape[0] and disp.shape[2:] == x.shape[2:],
             f"warp_width: disparity extents {disp.shape} do not match "
             f"features {x.shape}")
    _require(disp.dtype == x.dtype, "warp_width: dtype mismatch")
    y = K.warp_width_fwd(x.data, disp.data)

    def bwd(g):
        dx, dd = K.warp_width_bwd(g, x.data, disp.data)
        x._accum(dx)
        disp._accum(dd)

    return _result(y, (x, disp), bwd, "warp_width", 8 * y.size)


def distance_volume(fl: Tensor, fr: Tensor, offsets) -> Tensor:
    """Channel-mean absolute difference against width-shifted ``fr``.

    Output is B x D x H x W with one cost plane per offset; shifted
    samples that fall outside the frame are treated as zero features.
    Offsets may exceed the width (small maps under a full-range search):
    such planes are entirely zero-fill and never win the argmin.
    """
    _require(fl.shape == fr.shape,
             f"distance_volume: shapes differ, {fl.shape} vs {fr.shape}")
    _require(fl.ndim == 4, f"distance_volume: input rank {fl.ndim}")
    offsets = np.asarray(offsets, dtype=np.int64)
    _require(offsets.ndim == 1 and offsets.size > 0,
             "distance_volume: offsets must be a non-empty vector")
    costs = K.distance_volume_fwd(fl.data, fr.data, offsets)

    def bwd(g):
        dfl, dfr = K.distance_volume_bwd(g, fl.data, fr.data, offsets)
        fl._accum(dfl)
        fr._accum(dfr)

    return _result(costs, (fl, fr), bwd, "distance_volume",
                   3 * costs.size * fl.shape[1])


# ---------------------------------------------------------------------------
# finite-difference gradient checking

@dataclass
class GradCheckReport:
    """Outcome of one analytic-vs-numeric gradient comparison."""
    max_rel_error: list = field(default_factory=list)
    suspects: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error)


def grad_check(op, inputs, tolerance: float = 1e-4, step: float = 1e-3,
               seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of ``op`` to central differences.

    Runs in float64 regardless of the inputs' dtype (finite differences
    are unusable at float32 precision). Probes every element of every
    input, so keep inputs small (<= 1e3 elements). Elements where the
    finite difference itself does not converge under step refinement
    are reported as suspected non-smooth points instead of failures.
    """
    xs = [Tensor(t.data.astype(np.float64), requires_grad=True)
          for t in inputs]
    for t, x in zip(inputs, xs):
        total = int(np.prod(x.shape)) if x.ndim else 1
        if total > 1000:
            raise ValueError(f"grad_check: input with {total} elements is "
                             f"too large for a full finite-difference sweep")
    out = op(*xs)
    g = np.random.default_rng(seed).standard_normal(out.shape)
    out.backward(g)
    analytic = [x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
                for x in xs]

    def loss() -> float:
        with no_grad():
            return float((op(*xs).data * g).sum())

    def fd(x, idx, h) -> float:
        orig = x.data[idx]
        x.data[idx] = orig + h
        hi = loss()
        x.data[idx] = orig - h
        lo = loss()
        x.data[idx] = orig
        return (hi - lo) / (2 * h)

    report = GradCheckReport(tolerance=tolerance)
    for i, x in enumerate(xs):
        worst = 0.0
        for idx in np.ndindex(x.shape):
            num = fd(x, idx, step)
            ana = analytic[i][idx]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            if err >= tolerance:
                refined = fd(x, idx, step / 8)
                drift = abs(refined - num) / max(1.0, abs(refined), abs(num))
                if drift > 0.05:
                    # finite difference not converging: a kink, not a bug
                    report.suspects.append((i, idx))
                    continue
                err = abs(ana - refined) / max(1.0, abs(ana), abs(refined))
            worst = max(worst, err)
        report.max_rel_error.append(worst)
    return report
