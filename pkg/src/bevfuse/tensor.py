"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node holding references to the tensors it consumed
and a closure that routes the output gradient back to them.  ``backward`` on a
scalar walks the graph once in reverse topological order.  All storage is
64-bit, row-major numpy; op outputs are frozen (read-only) once produced,
while leaf tensors (parameters, inputs) stay writable so optimizers and
finite-difference probes can update them in place.

Broadcasting follows numpy rules in elementwise ops; gradients are reduced
back to each operand's shape (unbroadcast).
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def assert_finite(self, label: str = "tensor"):
        """Raise if the payload holds NaN or Inf; returns self for chaining."""
        if not np.isfinite(self.data).all():
            raise ValueError(f"{label} contains NaN or Inf")
        return self

    def detach(self) -> "Tensor":
        """A leaf view of the same (frozen) payload, cut out of the graph."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of ``self`` into every reachable leaf.

        Without an explicit ``seed`` the tensor must be a scalar (size 1) and
        the seed is 1.0, i.e. plain reverse-mode on a loss value.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without seed needs a scalar, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = seed.copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


class Parameter(Tensor):
    """A named leaf tensor that optimizers update and checkpoints persist."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap a freshly computed array as an op output node."""
    data = np.asarray(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = tuple(p for p in parents if p.requires_grad)
    if needs:
        out.requires_grad = True
        out._parents = needs
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    data.flags.writeable = False
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make(np.ascontiguousarray(data), (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        _accum(a, g.transpose(inverse))

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1])

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                _accum(t, part)

    return _make(data, tuple(tensors), backward)


def getitem(a, idx) -> Tensor:
    """Basic indexing (ints / slices / tuples thereof); no fancy indexing."""
    a = as_tensor(a)
    data = np.asarray(a.data[idx])

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] += g
        _accum(a, buf)

    return _make(data, (a,), backward)


# -- reductions --------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise nonlinearities ------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * (0.5 / data))

    return _make(data, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        _accum(a, g * np.sign(a.data))

    return _make(data, (a,), backward)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    data = np.maximum(a.data, floor)

    def backward(g):
        _accum(a, g * (a.data > floor))

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accum(a, g * s)

    return _make(data, (a,), backward)


def gelu(a) -> Tensor:
    """Exact GELU: x * Phi(x) with the Gaussian CDF via erf (no tanh fit)."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accum(a, g * (cdf + a.data * pdf))

    return _make(data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        soft = np.exp(data)
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), backward)


# -- structured ops ----------------------------------------------------------


def weighted_gather(features, indices: np.ndarray, weights: np.ndarray) -> Tensor:
    """Fixed-coordinate interpolation: out[c,k] = sum_j w[k,j] * f[c, idx[k,j]].

    ``features`` is [C, S] (channels by flattened source cells); ``indices``
    and ``weights`` are [K, J] and are constants of the graph.  This is the
    workhorse behind bilinear resampling: coordinates never receive gradients,
    features do.
    """
    f = as_tensor(features)
    if f.ndim != 2:
        raise ValueError(f"weighted_gather expects [C, S] features, got {f.shape}")
    idx = np.asarray(indices)
    w = np.asarray(weights, dtype=np.float64)
    if idx.shape != w.shape or idx.ndim != 2:
        raise ValueError(f"index/weight shapes differ: {idx.shape} vs {w.shape}")
    data = np.einsum("ckj,kj->ck", f.data[:, idx], w, optimize=True)

    def backward(g):
        buf = np.zeros((f.shape[1], f.shape[0]))
        gt = g.T  # [K, C]
        for j in range(idx.shape[1]):
            np.add.at(buf, idx[:, j], gt * w[:, j][:, None])
        _accum(f, np.ascontiguousarray(buf.T))

    return _make(np.ascontiguousarray(data), (f,), backward)


def conv2d(x, weight, bias) -> Tensor:
    """2D convolution, stride 1, odd kernel, zero 'same' padding.

    x: [C_in, H, W]; weight: [C_out, C_in, kh, kw]; bias: [C_out].
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin} vs weight {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd, got {kh}x{kw}")
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((cin, h + 2 * ph, w + 2 * pw))
    xp[:, ph:ph + h, pw:pw + w] = x.data
    cols = np.empty((cin, kh * kw, h, w))
    for di in range(kh):
        for dj in range(kw):
            cols[:, di * kw + dj] = xp[:, di:di + h, dj:dj + w]
    cols2 = cols.reshape(cin * kh * kw, h * w)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    data = (wmat @ cols2 + bias.data[:, None]).reshape(cout, h, w)

    def backward(g):
        g2 = g.reshape(cout, h * w)
        if weight.requires_grad:
            _accum(weight, (g2 @ cols2.T).reshape(weight.shape))
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(cin, kh * kw, h, w)
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + h, dj:dj + w] += gcols[:, di * kw + dj]
            _accum(x, gxp[:, ph:ph + h, pw:pw + w])

    return _make(data, (x, weight, bias), backward)


# -- verification ------------------------------------------------------------


def grad_check(f, params, step: float = 1e-5, rng=None,
               max_checks_per_param: int | None = None, denom_floor: float = 1e-3):
    """Max relative error between reverse-mode and central finite differences.

    ``f`` is a zero-argument callable rebuilding the forward pass and
    returning a scalar Tensor; ``params`` are the leaves to probe.  Large
    parameters can be subsampled (``max_checks_per_param``) with a seeded rng.

    The error for one element is |a - n| / max(|a|, |n|, denom_floor):
    gradients below ``denom_floor`` are judged absolutely against it, which
    keeps central-difference roundoff (~1e-10 at unit loss scale) from
    drowning genuinely zero gradients while still flagging real defects.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar objective, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_checks_per_param is not None and n > max_checks_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(n, size=max_checks_per_param, replace=False)
        else:
            picks = range(n)
        for i in picks:
            saved = flat[i]
            flat[i] = saved + step
            hi = f().item()
            flat[i] = saved - step
            lo = f().item()
            flat[i] = saved
            numeric = (hi - lo) / (2.0 * step)
            a = ana.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
