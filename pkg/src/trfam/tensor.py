"""Dense tensors with reverse-mode automatic differentiation.

Minimal numpy-backed autodiff covering exactly the operations the acoustic
encoder needs: matmul/linear, masked softmax, layer norm, gelu/relu, 3x3
same-padded convolution, 2x2 max pooling, dropout, and frame-level cross
entropy. Every differentiable op records a backward closure on the implicit
tape (the graph itself, ordered by node creation); `Tensor.backward()`
replays the reachable nodes in reverse recording order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MaskError(ValueError):
    """Raised when a softmax row has no unmasked position to attend to."""


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values it cannot recover from."""


@dataclass(frozen=True)
class Mode:
    """Forward-pass mode. Train mode carries the RNG coordinates for dropout.

    Dropout masks are drawn from a counter-based Philox stream keyed by
    (seed, step, site), so a forward pass is reproducible from those three
    integers alone.
    """

    train: bool
    seed: int = 0
    step: int = 0


EVAL = Mode(train=False)


def train_mode(seed: int, step: int) -> Mode:
    return Mode(train=True, seed=seed, step=step)


def dropout_rng(seed: int, step: int, site: int) -> np.random.Generator:
    """Counter-based generator for the (seed, step, site) dropout stream.

    Distinct coordinates select disjoint 2^64 blocks of the Philox counter
    space, so streams never collide and never depend on draw order elsewhere.
    """
    counter = np.array([0, step, site, 0], dtype=np.uint64)
    key = np.array([seed, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


_node_counter = 0
_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (eval loops, optimizer updates)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense n-d array plus an optional slot in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()
        self._seq = 0

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> int:
        """Reverse-mode sweep from this tensor.

        Visits every recorded op reachable from here exactly once, in reverse
        recording order. Returns the number of op nodes visited.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        nodes = tape_nodes(self)
        for node in reversed(nodes):
            node._backward()
        return len(nodes)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def astensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def tape_nodes(root: Tensor) -> list:
    """Recorded op nodes reachable from `root`, in recording order."""
    seen = set()
    stack = [root]
    nodes = []
    while stack:
        t = stack.pop()
        if id(t) in seen or t._backward is None:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def _make_node(data: np.ndarray, parents, backward) -> Tensor:
    global _node_counter
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        _node_counter += 1
        out._seq = _node_counter
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._seq = 0
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise and structural ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out = _make_node(out_data, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_data = a.data - b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out = _make_node(out_data, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out = _make_node(out_data, (a, b), backward)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = astensor(a)
    out_data = a.data * a.data.dtype.type(s)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * a.data.dtype.type(s))

    out = _make_node(out_data, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    out = _make_node(out_data, (a, b), backward)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b for x[..., d_in], w[d_out, d_in], b[d_out]. Fused node."""
    x, w = astensor(x), astensor(w)
    if x.shape[-1] != w.shape[-1]:
        raise ShapeError(f"linear: input dim {x.shape} does not match weight {w.shape}")
    out_data = np.matmul(x.data, w.data.T)
    if b is not None:
        out_data += b.data

    def backward():
        g = out.grad
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data))
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            w._accumulate(g2.T @ x2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    out = _make_node(out_data, parents, backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = astensor(a)
    out_data = a.data.reshape(shape)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    out = _make_node(out_data, (a,), backward)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    a = astensor(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward():
        if a.requires_grad:
            a._accumulate(np.transpose(out.grad, inv))

    out = _make_node(out_data, (a,), backward)
    return out


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.shape))

    out = _make_node(np.asarray(out_data), (a,), backward)
    return out


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    a = astensor(a)
    out_data = np.maximum(a.data, 0)

    def backward():
        if a.requires_grad:
            a._accumulate(out.grad * (a.data > 0))

    out = _make_node(out_data, (a,), backward)
    return out


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form: 0.5*x*(1 + erf(x/sqrt(2)))."""
    a = astensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = (a.data * phi).astype(a.dtype)

    def backward():
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
            a._accumulate(out.grad * (phi + a.data * pdf).astype(a.dtype))

    out = _make_node(out_data, (a,), backward)
    return out


# -- normalization, attention softmax, losses ---------------------------------


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine (gamma, beta)."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gamma.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(((gy - m1 - xhat * m2) * inv).astype(x.dtype))

    out = _make_node(out_data.astype(x.dtype), (x, gamma, beta), backward)
    return out


def softmax_masked(logits: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over the last axis with hard masking.

    `keep` is a boolean array broadcastable to `logits`: True positions
    participate, False positions get exactly 0 probability. A row with no
    True position has no valid attention target and raises MaskError.
    """
    logits = astensor(logits)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape[-1] != logits.shape[-1]:
        raise ShapeError(
            f"softmax_masked: mask last axis {keep.shape} does not match logits {logits.shape}"
        )
    if not keep.any(axis=-1).all():
        raise MaskError("softmax_masked: at least one row is fully masked")
    xm = np.where(keep, logits.data, -np.inf)
    rowmax = xm.max(axis=-1, keepdims=True)
    e = np.exp(xm - rowmax)
    p = e / e.sum(axis=-1, keepdims=True)
    p = p.astype(logits.dtype)

    def backward():
        g = out.grad
        inner = (g * p).sum(axis=-1, keepdims=True)
        if logits.requires_grad:
            logits._accumulate(p * (g - inner))

    out = _make_node(p, (logits,), backward)
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer targets over valid frames.

    logits: [..., K]; targets: integer array of shape logits.shape[:-1];
    valid: boolean mask of the same shape (None means all frames count).
    Targets at invalid frames are ignored and may hold any filler value.
    """
    logits = astensor(logits)
    k = logits.shape[-1]
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    if valid is None:
        valid = np.ones(targets.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
    checked = targets[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= k):
        raise ValueError(f"cross_entropy: target out of range [0, {k})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no valid frames")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    safe_t = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * valid).sum() / n_valid
    p = e / z

    def backward():
        g = float(out.grad)
        if logits.requires_grad:
            d = p.copy()
            flat = d.reshape(-1, k)
            idx = np.arange(flat.shape[0])
            flat[idx, safe_t.reshape(-1)] -= 1.0
            d *= (valid[..., None] * (g / n_valid)).astype(d.dtype)
            logits._accumulate(d.astype(logits.dtype))

    out = _make_node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
    return out


def dropout(x: Tensor, p: float, mode: Mode, site: int) -> Tensor:
    """Zero elements i.i.d. with probability p and rescale survivors by 1/(1-p).

    Identity in eval mode. The mask comes from the (seed, step, site) stream,
    so the same coordinates always produce the same mask.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    x = astensor(x)
    if not mode.train or p == 0.0:
        return x
    rng = dropout_rng(mode.seed, mode.step, site)
    keep = rng.random(x.shape) >= p
    factor = keep.astype(x.dtype) * x.data.dtype.type(1.0 / (1.0 - p))
    out_data = x.data * factor

    def backward():
        if x.requires_grad:
            x._accumulate(out.grad * factor)

    out = _make_node(out_data, (x,), backward)
    return out


# -- convolution and pooling ---------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 3x3 cross-correlation plus bias.

    x: [C_in, F, T]; w: [C_out, C_in, 3, 3]; b: [C_out] -> [C_out, F, T].
    Zero padding of one cell on every border.
    """
    x, w, b = astensor(x), astensor(w), astensor(b)
    if w.shape[-2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be 3x3, got {w.shape}")
    cin, f, t = x.shape
    cout = w.shape[0]
    if w.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    xp = np.zeros((cin, f + 2, t + 2), dtype=x.dtype)
    xp[:, 1 : f + 1, 1 : t + 1] = x.data
    cols = np.empty((cin, 3, 3, f, t), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i : i + f, j : j + t]
    cols2 = cols.reshape(cin * 9, f * t)
    w2 = w.data.reshape(cout, cin * 9)
    out_data = (w2 @ cols2 + b.data[:, None]).reshape(cout, f, t)

    def backward():
        g2 = out.grad.reshape(cout, f * t)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if w.requires_grad:
            w._accumulate((g2 @ cols2.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, 3, 3, f, t)
            dxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    dxp[:, i : i + f, j : j + t] += dcols[:, i, j]
            x._accumulate(dxp[:, 1 : f + 1, 1 : t + 1])

    out = _make_node(out_data, (x, w, b), backward)
    return out


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))  # scan order, ties go to the first


def maxpool2d(x: Tensor, strides: tuple[int, int]) -> Tensor:
    """Windowed maximum over a 2x2 grid; x: [C, F, T], strides per (F, T) axis.

    Output extents follow floor((n - 2) / stride) + 1. Gradient routes to the
    argmax, first occurrence in scan order on ties.
    """
    x = astensor(x)
    sf, st = strides
    if sf not in (1, 2) or st not in (1, 2):
        raise ValueError(f"maxpool2d: strides must be 1 or 2, got {strides}")
    c, f, t = x.shape
    if f < 2 or t < 2:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than 2x2 grid")
    of = (f - 2) // sf + 1
    ot = (t - 2) // st + 1
    cands = np.stack(
        [x.data[:, a::sf, b::st][:, :of, :ot] for a, b in _POOL_OFFSETS], axis=0
    )
    am = cands.argmax(axis=0)
    out_data = cands.max(axis=0)

    def backward():
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        for k, (a, b) in enumerate(_POOL_OFFSETS):
            view = dx[:, a::sf, b::st][:, :of, :ot]
            view += out.grad * (am == k)
        x._accumulate(dx)

    out = _make_node(out_data, (x,), backward)
    return out


def pad_edge(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Pad one axis by replicating the edge values."""
    x = astensor(x)
    pads = [(0, 0)] * x.ndim
    pads[axis] = (before, after)
    out_data = np.pad(x.data, pads, mode="edge")
    n = x.shape[axis]

    def backward():
        if not x.requires_grad:
            return
        g = out.grad
        core = np.take(g, np.arange(before, before + n), axis=axis).copy()
        if before:
            head = np.take(g, np.arange(before), axis=axis).sum(axis=axis)
            idx = [slice(None)] * x.ndim
            idx[axis] = 0
            core[tuple(idx)] += head
        if after:
            tail = np.take(g, np.arange(before + n, before + n + after), axis=axis).sum(axis=axis)
            idx = [slice(None)] * x.ndim
            idx[axis] = n - 1
            core[tuple(idx)] += tail
        x._accumulate(core)

    out = _make_node(out_data, (x,), backward)
    return out


def stack_pad(tensors: list[Tensor], pad_to: int | None = None) -> Tensor:
    """Stack [T_i, d] sequences into a zero-padded [B, T_max, d] batch."""
    if not tensors:
        raise ValueError("stack_pad: empty input")
    d = tensors[0].shape[-1]
    lengths = [t.shape[0] for t in tensors]
    tmax = max(lengths) if pad_to is None else pad_to
    if tmax < max(lengths):
        raise ShapeError(f"stack_pad: pad_to={pad_to} shorter than longest sequence {max(lengths)}")
    out_data = np.zeros((len(tensors), tmax, d), dtype=tensors[0].dtype)
    for i, t in enumerate(tensors):
        out_data[i, : lengths[i]] = t.data

    def backward():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(out.grad[i, : lengths[i]])

    out = _make_node(out_data, tuple(tensors), backward)
    return out
