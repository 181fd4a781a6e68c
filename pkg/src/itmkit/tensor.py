"""A small define-by-run autodiff engine for NCHW feature maps.

Only the primitives the synthesis network needs are provided: 2-D
convolution (cross-correlation, zero padding), ReLU, sigmoid, average
pooling, channel concatenation, channel-broadcast add/mul, spatial tiling
and the handful of reductions used by the loss.  Everything runs on numpy;
reductions have a fixed order so results are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import GradientError, ShapeError


class Tensor:
    """Dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from this scalar node.

        Nodes are visited in reverse topological order of graph construction,
        so the traversal is deterministic for a given forward pass.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; scalar operands become constants
    def __add__(self, other):
        if _is_scalar(other):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_scalar(other):
            return shift(self, -float(other))
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if _is_scalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _is_scalar(x):
    return isinstance(x, (int, float, np.floating, np.integer))


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _node(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# convolution

def conv_output_size(size, k, s, p, d):
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def _im2col(xp, k, s, d, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            hi, wj = i * d, j * d
            cols[:, :, i, j] = xp[:, :, hi:hi + s * (ho - 1) + 1:s, wj:wj + s * (wo - 1) + 1:s]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols, shape_padded, k, s, d, ho, wo):
    n, c = shape_padded[:2]
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    dxp = np.zeros(shape_padded, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            hi, wj = i * d, j * d
            dxp[:, :, hi:hi + s * (ho - 1) + 1:s, wj:wj + s * (wo - 1) + 1:s] += dcols[:, :, i, j]
    return dxp


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """Zero-padded 2-D cross-correlation.

    x is (N, Cin, H, W), weight is (Cout, Cin, k, k), bias is (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got shape {x.shape}", dim="input.ndim")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, k, k), got {weight.shape}", dim="weight")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(f"invalid conv params s={stride} p={padding} d={dilation}", dim="conv params")
    n, cin, h, w = x.shape
    cout, wcin, k, _ = weight.shape
    if wcin != cin:
        raise ShapeError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {wcin}", dim="channels"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}", dim="bias")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1:
        raise ShapeError(f"conv2d output height {ho} < 1 for input height {h}", dim="height")
    if wo < 1:
        raise ShapeError(f"conv2d output width {wo} < 1 for input width {w}", dim="width")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    padded_shape = xd.shape
    cols = _im2col(xd, k, stride, dilation, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1))
            weight._accumulate(gw.sum(axis=0).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = _col2im(dcols, padded_shape, k, stride, dilation, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(dxp)

    return _node(out, parents, backward)


# ---------------------------------------------------------------------------
# pointwise / structural primitives

def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    out = np.maximum(x.data, 0).astype(x.dtype)  # maximum keeps NaN visible

    def backward(g):
        x._accumulate(g * pos)

    return _node(out, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    # split branches so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _node(out, (x,), backward)


def avg_pool2d(x, kernel=2):
    """Non-overlapping average pooling with window ``kernel``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: spatial size {h}x{w} not divisible by {kernel}", dim="spatial")
    ho, wo = h // kernel, w // kernel
    out = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        x._accumulate(gx)

    return _node(out, (x,), backward)


def concat(xs: Sequence[Tensor]):
    """Concatenate NCHW tensors along the channel axis."""
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} outside the channel axis",
                             dim="non-channel extents")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        for t, a, b in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, a:b])

    return _node(out, tuple(xs), backward)


def _channel_broadcast(a, b, op):
    if a.shape == b.shape:
        return a.shape
    if a.ndim == b.ndim == 4 and a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:]:
        if a.shape[1] == 1 or b.shape[1] == 1:
            return (a.shape[0], max(a.shape[1], b.shape[1])) + a.shape[2:]
    raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape} (only the channel axis may broadcast)",
                     dim="broadcast")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _channel_broadcast(a, b, "add")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _node(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _channel_broadcast(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def scale(x, c):
    x = as_tensor(x)
    out = x.data * x.dtype.type(c)

    def backward(g):
        x._accumulate(g * c)

    return _node(out, (x,), backward)


def shift(x, c):
    x = as_tensor(x)
    out = x.data + x.dtype.type(c)

    def backward(g):
        x._accumulate(g)

    return _node(out, (x,), backward)


def tile_spatial(x, height, width):
    """Nearest-neighbour broadcast of a (N, C, 1, 1) map to (N, C, height, width)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2:] != (1, 1):
        raise ShapeError(f"tile_spatial expects (N, C, 1, 1), got {x.shape}", dim="spatial")
    out = np.broadcast_to(x.data, x.shape[:2] + (height, width)).copy()

    def backward(g):
        x._accumulate(g.sum(axis=(2, 3), keepdims=True))

    return _node(out, (x,), backward)


def minimum(x, c):
    """Elementwise min(x, c) against a scalar ceiling."""
    x = as_tensor(x)
    below = x.data < c
    out = np.where(below, x.data, x.dtype.type(c))

    def backward(g):
        x._accumulate(g * below)

    return _node(out, (x,), backward)


def log_map(x, mu=5000.0):
    """log(1 + mu*x) / log(1 + mu); requires x >= 0."""
    x = as_tensor(x)
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    if np.any(x.data < 0):
        raise ValueError("log_map input must be non-negative")
    denom = math.log1p(mu)
    out = (np.log1p(mu * x.data) / denom).astype(x.dtype)

    def backward(g):
        x._accumulate(g * (mu / ((1.0 + mu * x.data) * denom)))

    return _node(out, (x,), backward)


def total(x):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(out, (x,), backward)


def mean(x):
    x = as_tensor(x)
    size = x.data.size
    out = np.asarray(x.data.sum() / size, dtype=x.dtype)

    def backward(g):
        x._accumulate(np.broadcast_to(g / size, x.shape))

    return _node(out, (x,), backward)


def rms(x):
    """sqrt(mean(x**2)); the subgradient at x == 0 is taken as 0."""
    x = as_tensor(x)
    size = x.data.size
    r = math.sqrt(float(np.sum(x.data.astype(np.float64) ** 2)) / size)
    out = np.asarray(r, dtype=x.dtype)

    def backward(g):
        if r > 0:
            x._accumulate(g * x.data / (size * r))
        else:
            x._accumulate(np.zeros_like(x.data))

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# layer specs

_KINDS = ("conv", "relu", "avgpool", "concat", "add", "mul", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 3
    s: int = 1
    p: int = 1
    d: int = 1
    cin: int = 0
    cout: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.s < 1 or self.d < 1 or self.p < 0 or self.cin < 0 or self.cout < 0:
            raise ValueError(f"invalid layer params {self}")

    @classmethod
    def parse(cls, notation, cin=0, cout=0):
        """Build a conv spec from notation like ``k3s1p2d2``."""
        import re

        m = re.fullmatch(r"k(\d+)s(\d+)p(\d+)d(\d+)", notation)
        if not m:
            raise ValueError(f"bad conv notation {notation!r}")
        k, s, p, d = map(int, m.groups())
        return cls("conv", k=k, s=s, p=p, d=d, cin=cin, cout=cout)

    @property
    def notation(self):
        return f"k{self.k}s{self.s}p{self.p}d{self.d}"

    def param_count(self):
        if self.kind != "conv":
            return 0
        return self.cout * self.cin * self.k * self.k + self.cout


def apply_primitive(spec: LayerSpec, *inputs):
    """Evaluate one primitive. Conv takes ``(x, weight, bias)``."""
    if spec.kind == "conv":
        x, weight, *rest = inputs
        bias = rest[0] if rest else None
        if spec.cin and as_tensor(x).shape[1] != spec.cin:
            raise ShapeError(f"conv expects {spec.cin} input channels, got {as_tensor(x).shape[1]}",
                             dim="channels")
        return conv2d(x, weight, bias, spec.s, spec.p, spec.d)
    if spec.kind == "relu":
        return relu(inputs[0])
    if spec.kind == "sigmoid":
        return sigmoid(inputs[0])
    if spec.kind == "avgpool":
        return avg_pool2d(inputs[0], spec.k)
    if spec.kind == "concat":
        return concat(inputs)
    if spec.kind == "add":
        return add(*inputs)
    if spec.kind == "mul":
        return mul(*inputs)
    raise ValueError(spec.kind)


# ---------------------------------------------------------------------------
# optimisation and gradient checking

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected ADAM update, in place on ``params``.

    ``params`` and ``grads`` map names to arrays (or Tensors). A missing or
    ``None`` gradient counts as zero. Non-finite gradients abort the step
    before anything is modified.
    """
    arrays = {k: (p.data if isinstance(p, Tensor) else p) for k, p in params.items()}
    gs = {}
    for name, arr in arrays.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        g = np.asarray(g)
        if g.shape != arr.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, param has {arr.shape}", dim=name)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}; step aborted")
        gs[name] = g

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, arr in arrays.items():
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        arr -= step.astype(arr.dtype)
    return params, state


def finite_diff_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at array ``x``.

    ``f`` receives a perturbed copy of ``x`` and must return a float.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x.copy()))
        flat[i] = orig - eps
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b, floor=1e-8):
    """max |a - b| / max(|a|, |b|, floor), the metric used by gradient checks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / denom)
