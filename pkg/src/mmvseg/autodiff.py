"""Dense N-d float tensors with taped reverse-mode differentiation.

Every differentiable operation in the package is built from the primitives
in this module.  Ops compute eagerly with numpy; when a `Tape` is active and
an input requires gradients, a node holding the backward closure is recorded.
`backward` then replays the tape in reverse and accumulates gradients into
the participating leaf tensors.

Volumes are laid out channels-last and row-major: a feature map has shape
(d, w, h, C) and flattens to tokens in C order (h fastest).
"""

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, NumericError, ShapeError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_active_tape = None


class Tensor:
    """A contiguous float32/float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        # note: ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        """A constant view of this tensor's value, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Node:
    """One recorded operation: inputs, output, and the backward closure."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Single-owner, append-only record of operations in execution order.

    Use as a context manager around the forward pass that should be
    differentiated.  A tape must not be shared across concurrent recordings.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)


def _record(op, inputs, out_data, backward):
    """Wrap `out_data` in a Tensor, recording a node if gradients are needed."""
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        if _active_tape is not None:
            _active_tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def backward(loss, tape, leaves=None):
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf.

    `loss` must be a scalar produced under `tape`.  Gradients add into any
    existing `.grad`, and multiple uses of a tensor within the graph sum.
    When `leaves` is given, every listed tensor is guaranteed a gradient
    buffer afterwards (zeros if the loss does not depend on it).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        gins = node.backward(g)
        for t, gi in zip(node.inputs, gins):
            if gi is None or not t.requires_grad:
                continue
            if t._leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi.astype(t.data.dtype, copy=False).reshape(t.shape)
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    if leaves is not None:
        for p in leaves:
            if p.requires_grad and p.grad is None:
                p.zero_grad()


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b):
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, bwd)


def sub(a, b):
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, bwd)


def mul(a, b):
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, bwd)


def div(a, b):
    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", (a, b), a.data / b.data, bwd)


def neg(a):
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def texp(a):
    out_data = np.exp(a.data)
    return _record("exp", (a,), out_data, lambda g: (g * out_data,))


def tlog(a):
    return _record("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def gelu(a):
    """Exact (erf-based) Gaussian error linear unit."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), x * cdf, bwd)


def sigmoid(a):
    y = expit(a.data)
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), bwd)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    if axes is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[i] for i in axes]))

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _record("mean", (a,), a.data.mean(axis=axes, keepdims=keepdims), bwd)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record("reshape", (a,), a.data.reshape(shape), bwd)


def moveaxis(a, source, destination):
    def bwd(g):
        return (np.ascontiguousarray(np.moveaxis(g, destination, source)),)

    return _record("moveaxis", (a,), np.ascontiguousarray(np.moveaxis(a.data, source, destination)), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bwd)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading extents broadcast (batched form)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", (a, b), np.matmul(a.data, b.data), bwd)


def softmax_last(a):
    """Numerically stabilized softmax over the last extent; rows sum to 1."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax_last needs a nonempty last extent")
    if not np.isfinite(a.data).all():
        raise NumericError("softmax_last received non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Zero-mean unit-variance normalization over the channel (last) extent,
    followed by the gamma/beta affine map."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm channel extent {c} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        dgamma = (g * xhat).reshape(-1, c).sum(axis=0)
        dbeta = g.reshape(-1, c).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, bwd)


# ---------------------------------------------------------------------------
# volumetric primitives
# ---------------------------------------------------------------------------

def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    return tuple(v)


def conv3d(x, kernel, bias=None, stride=1, padding=0):
    """3D convolution over a channels-last volume.

    x: (D, H, W, Cin); kernel: (kd, kh, kw, Cin, Cout); valid-style output
    extents floor((in + 2p - k)/stride) + 1 with symmetric zero padding.
    """
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects x rank 4 and kernel rank 5, got {x.shape} and {kernel.shape}")
    kd, kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv3d input channels {x.shape[3]} != kernel Cin {cin}")
    stride = _triple(stride)
    padding = _triple(padding)
    if min(stride) < 1:
        raise ShapeError(f"conv3d stride must be >= 1 per axis, got {stride}")
    padded = tuple(x.shape[i] + 2 * padding[i] for i in range(3))
    if padded[0] < kd or padded[1] < kh or padded[2] < kw:
        raise ShapeError(
            f"conv3d kernel {(kd, kh, kw)} larger than padded input {padded}"
        )
    out_sp = tuple((padded[i] - k) // stride[i] + 1 for i, k in enumerate((kd, kh, kw)))

    xp = x.data
    if any(padding):
        xp = np.pad(xp, ((padding[0],) * 2, (padding[1],) * 2, (padding[2],) * 2, (0, 0)))

    cols = _im2col(xp, (kd, kh, kw), stride, out_sp)  # (P, kd*kh*kw*cin)
    out = cols @ kernel.data.reshape(-1, cout)
    del cols
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
    out = out.reshape(out_sp + (cout,))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gm = g.reshape(-1, cout)
        # rebuilt rather than saved: the column matrix is k^3 times the input
        cols_b = _im2col(xp, (kd, kh, kw), stride, out_sp)
        dw = (cols_b.T @ gm).reshape(kernel.shape)
        dcols = gm @ kernel.data.reshape(-1, cout).T
        dxp = _col2im(dcols, xp.shape, (kd, kh, kw), stride, out_sp, xp.dtype)
        if any(padding):
            dxp = dxp[
                padding[0]: padding[0] + x.shape[0],
                padding[1]: padding[1] + x.shape[1],
                padding[2]: padding[2] + x.shape[2],
            ]
        dx = np.ascontiguousarray(dxp)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=0)

    return _record("conv3d", inputs, out, bwd)


def _im2col(xp, ksize, stride, out_sp):
    kd, kh, kw = ksize
    od, oh, ow = out_sp
    cin = xp.shape[3]
    cols = np.empty((od, oh, ow, kd, kh, kw, cin), dtype=xp.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                cols[:, :, :, a, b, c, :] = xp[
                    a: a + od * stride[0]: stride[0],
                    b: b + oh * stride[1]: stride[1],
                    c: c + ow * stride[2]: stride[2],
                ]
    return cols.reshape(od * oh * ow, kd * kh * kw * cin)


def _col2im(dcols, xp_shape, ksize, stride, out_sp, dtype):
    kd, kh, kw = ksize
    od, oh, ow = out_sp
    cin = xp_shape[3]
    dcols = dcols.reshape(od, oh, ow, kd, kh, kw, cin)
    dxp = np.zeros(xp_shape, dtype=dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                dxp[
                    a: a + od * stride[0]: stride[0],
                    b: b + oh * stride[1]: stride[1],
                    c: c + ow * stride[2]: stride[2],
                ] += dcols[:, :, :, a, b, c, :]
    return dxp


def avg_pool3d(x, kernel=3, padding=1):
    """Stride-1 box average over a channels-last volume (zero padded,
    padding counted in the divisor).  Self-adjoint, so the backward pass is
    the same pooling applied to the gradient."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool3d expects rank 4, got {x.shape}")
    k = _triple(kernel)
    p = _triple(padding)
    if any(k[i] != 2 * p[i] + 1 for i in range(3)):
        raise ShapeError(f"avg_pool3d needs shape-preserving kernel/padding, got {k} / {p}")

    def bwd(g):
        return (_box_mean(g, k, p),)

    return _record("avg_pool3d", (x,), _box_mean(x.data, k, p), bwd)


def _box_mean(arr, k, p):
    ap = np.pad(arr, ((p[0],) * 2, (p[1],) * 2, (p[2],) * 2, (0, 0)))
    out = np.zeros_like(arr)
    d, h, w = arr.shape[:3]
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                out += ap[a: a + d, b: b + h, c: c + w]
    return out / float(np.prod(k))


def global_pool(x):
    """Per-channel mean over all spatial positions: (d, w, h, C) -> (C,)."""
    if x.ndim != 4:
        raise ShapeError(f"global_pool expects rank 4, got {x.shape}")
    n = x.shape[0] * x.shape[1] * x.shape[2]

    def bwd(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record("global_pool", (x,), x.data.mean(axis=(0, 1, 2)), bwd)


def _upsample_axis_plan(n):
    # output o samples input at (o + 0.5)/2 - 0.5 (corner alignment off)
    o = np.arange(2 * n)
    s = (o + 0.5) / 2.0 - 0.5
    i0f = np.floor(s)
    w1 = s - i0f
    i0 = np.clip(i0f.astype(np.intp), 0, n - 1)
    i1 = np.clip(i0f.astype(np.intp) + 1, 0, n - 1)
    return i0, i1, w1


def _upsample_once(arr):
    for axis in range(3):
        i0, i1, w1 = _upsample_axis_plan(arr.shape[axis])
        sh = [1] * arr.ndim
        sh[axis] = w1.size
        w1b = w1.reshape(sh).astype(arr.dtype)
        arr = (1.0 - w1b) * np.take(arr, i0, axis=axis) + w1b * np.take(arr, i1, axis=axis)
    return arr


def _upsample_once_adjoint(g):
    for axis in (2, 1, 0):
        n_in = g.shape[axis] // 2
        i0, i1, w1 = _upsample_axis_plan(n_in)
        gm = np.moveaxis(g, axis, 0)
        w1b = w1.reshape((-1,) + (1,) * (gm.ndim - 1)).astype(g.dtype)
        out = np.zeros((n_in,) + gm.shape[1:], dtype=g.dtype)
        np.add.at(out, i0, (1.0 - w1b) * gm)
        np.add.at(out, i1, w1b * gm)
        g = np.moveaxis(out, 0, axis)
    return np.ascontiguousarray(g)


def upsample2x(x, times=1):
    """Trilinear upsampling of a channels-last volume; each application
    doubles every spatial extent.  times=0 is the identity."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects rank 4, got {x.shape}")
    if times < 0:
        raise ContractError(f"upsample2x times must be >= 0, got {times}")
    out = x
    for _ in range(times):
        out = _record("upsample2x", (out,), _upsample_once(out.data),
                      lambda g: (_upsample_once_adjoint(g),))
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, params, eps=1e-5, max_entries=None, seed=0):
    """Max relative error between taped gradients and central differences.

    `f` is a deterministic closure over `params` returning a scalar Tensor;
    parameters should be float64.  The relative error for one entry is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    `max_entries` caps how many entries per parameter get perturbed (a seeded
    random sample); every parameter is still touched, which keeps large-model
    checks affordable without skipping any tensor.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check objective is non-finite")
    backward(loss, tape, leaves=params)
    analytic = [p.grad.reshape(-1).astype(np.float64).copy() for p in params]

    pick = np.random.default_rng(seed)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            indices = range(flat.size)
        else:
            indices = pick.choice(flat.size, size=max_entries, replace=False)
        for i in indices:
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = f().data.item()
            flat[i] = saved - eps
            f_minus = f().data.item()
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("grad_check objective is non-finite under perturbation")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1e-8, abs(ana[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
