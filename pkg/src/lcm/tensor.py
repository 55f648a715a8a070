"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous numpy array. While a `Tape` is active, every
operation appends a node holding the backward closure; `backward` walks the
tape once in reverse and returns a gradient map keyed by tensor identity.
Tensors are treated as immutable after construction, so a recorded tape can
be replayed safely. `finite_difference_check` is the verification backbone:
every op here (and every layer built on top) is checked against central
differences.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


from .errors import (
    ContractError,
    DegenerateRowError,
    DeterminismError,
    IndexRangeError,
    ShapeError,
    StabilityError,
)

# Debug builds assert every forward result is finite; release propagates.
DEBUG_CHECK_FINITE = False


def set_debug_checks(on: bool) -> None:
    global DEBUG_CHECK_FINITE
    DEBUG_CHECK_FINITE = on


class Tensor:
    """A dense row-major array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic goes through the module-level ops so it
    # is recorded on the active tape.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Parameter:
    """A named learnable tensor; names are unique within one model record."""

    name: str
    tensor: Tensor


@dataclass
class Node:
    """One recorded op: output tensor, inputs, and the backward closure."""

    op: str
    inputs: tuple
    out: Tensor
    backward: object  # callable(grad_out: ndarray) -> tuple of ndarrays/None


@dataclass
class Tape:
    """Ordered op record for one forward pass; single-writer."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes().pop()
        assert popped is self
        return False


_LOCAL = threading.local()


def _tapes() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise StabilityError(f"non-finite values in output of op '{op}'")
    tape = active_tape()
    track = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    if track:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


class GradMap:
    """Gradients keyed by tensor identity; holds refs so ids stay valid."""

    def __init__(self):
        self._by_id = {}

    def _put(self, t: Tensor, g: np.ndarray):
        self._by_id[id(t)] = [t, g]

    def get(self, t: Tensor):
        entry = self._by_id.get(id(t))
        return entry[1] if entry is not None else None

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self.get(t)
        if g is None:
            raise KeyError("no gradient recorded for tensor")
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def tensors(self):
        return [t for (t, _) in self._by_id.values()]

    def add_into(self, other: "GradMap") -> None:
        """Accumulate `other` into self (ordered merge point for workers)."""
        for (t, g) in other._by_id.values():
            mine = self._by_id.get(id(t))
            if mine is None:
                self._by_id[id(t)] = [t, g]
            else:
                mine[1] = mine[1] + g


def backward(loss: Tensor, tape: Tape, keep_intermediate: bool = False) -> GradMap:
    """Reverse-mode sweep over `tape`.

    Returns gradients for the tape's leaf tensors; intermediate op outputs
    are dropped once consumed unless `keep_intermediate` is set.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(node.out) for node in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(loss): loss}
    for node in reversed(tape.nodes):
        nid = id(node.out)
        g_out = grads.get(nid)
        if g_out is None:
            continue
        if not keep_intermediate:
            del grads[nid]
            keep.pop(nid, None)
        in_grads = node.backward(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = g if acc is None else acc + g
            keep[id(t)] = t
    out = GradMap()
    for tid, g in grads.items():
        if keep_intermediate or tid not in produced or tid == id(loss):
            out._put(keep[tid], np.asarray(g))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcasting arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def bwd(g):
        return (2.0 * g * a.data,)

    return _record("square", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record("log", (a,), out, bwd)


_GELU_C = 0.7978845608028654   # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error-linear unit (tanh form), 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = a.data
    x2 = x * x
    inner = x2 * _GELU_A
    inner += 1.0
    inner *= x
    inner *= _GELU_C
    np.tanh(inner, out=inner)
    t = inner
    out = 1.0 + t
    out *= x
    out *= 0.5

    def bwd(g):
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        grad = x2 * (3.0 * _GELU_A)
        grad += 1.0
        grad *= sech2
        grad *= x
        grad *= _GELU_C
        grad += 1.0
        grad += t
        grad *= 0.5
        grad *= g
        return (grad,)

    return _record("gelu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow at very negative x saturates to inf -> result 0, which is
    # the right limit; suppress the spurious warning.
    with np.errstate(over="ignore"):
        out = np.exp(-x)
        out += 1.0
        np.divide(1.0, out, out=out)
    return out


def silu(a: Tensor) -> Tensor:
    sig = _stable_sigmoid(a.data)
    out = a.data * sig

    def bwd(g):
        grad = 1.0 - sig
        grad *= a.data
        grad += 1.0
        grad *= sig
        grad *= g
        return (grad,)

    return _record("silu", (a,), out, bwd)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def bwd(g):
        return (g * _stable_sigmoid(x),)

    return _record("softplus", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.dtype, copy=False)

    def bwd(g):
        return (g * mask,)

    return _record("relu", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands of rank 2 or 3 (leading batch extent)."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul expects rank 2 or 3, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x @ w + b (one output buffer, one tape node)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"inner dimensions differ: {x.shape} @ {w.shape}")
    out = np.matmul(x.data, w.data)
    out += b.data

    def bwd(g):
        gx = np.matmul(g, w.data.T)
        lead = int(np.prod(g.shape[:-1]))
        g2 = g.reshape(lead, g.shape[-1])
        x2 = x.data.reshape(lead, x.shape[-1])
        gw = np.matmul(x2.T, g2)
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _record("linear", (x, w, b), out, bwd)


def linear_rowwise(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map computed as independent per-row dot products.

    Unlike BLAS-backed `linear`, each output element is summed in a fixed
    order independent of the matrix height, so truncating leading rows
    reproduces the remaining rows bitwise. Used where that determinism is a
    contract (the scan's per-step projections); only sensible for skinny
    weight matrices.
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"inner dimensions differ: {x.shape} @ {w.shape}")
    out = np.einsum("...i,io->...o", x.data, w.data)
    out += b.data

    def bwd(g):
        gx = np.matmul(g, w.data.T)
        lead = int(np.prod(g.shape[:-1]))
        g2 = g.reshape(lead, g.shape[-1])
        x2 = x.data.reshape(lead, x.shape[-1])
        gw = np.matmul(x2.T, g2)
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _record("linear_rowwise", (x, w, b), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _record("transpose", (a,), out, bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, bwd)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(a.data[index])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record("slice", (a,), out, bwd)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast copy of `a` to `shape`; backward sums over expanded axes."""
    shape = tuple(shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _record("expand", (a,), out, bwd)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of `x` (axis 0) by an integer index array of any shape.

    Backward scatter-adds, so repeated indices accumulate gradient.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexRangeError("gather index array must be integer typed")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexRangeError(f"gather index out of range for {n} rows")
    out = x.data[idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        flat_idx = idx.reshape(-1)
        gf = g.reshape(flat_idx.size, -1)
        if flat_idx.size == n and np.array_equal(np.sort(flat_idx), np.arange(n)):
            gx.reshape(n, -1)[flat_idx] = gf  # permutation: plain scatter
            return (gx,)
        # segment-sum scatter: sort once, reduce contiguous runs
        order = np.argsort(flat_idx, kind="stable")
        sorted_idx = flat_idx[order]
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_idx)) + 1])
        sums = np.add.reduceat(gf[order], starts, axis=0)
        gx.reshape(n, -1)[sorted_idx[starts]] = sums
        return (gx,)

    return _record("gather_rows", (x,), out, bwd)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient routes to the first argmax on ties."""
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        return (gx,)

    return _record("amax", (x,), out, bwd)


def amin(x: Tensor, axis: int) -> Tensor:
    arg = np.argmin(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis
        )
        return (gx,)

    return _record("amin", (x,), out, bwd)


def segment_max(x: Tensor, group_size: int) -> Tensor:
    """Per-group, per-channel max over contiguous groups of `group_size` rows."""
    n = x.shape[0]
    if n % group_size != 0:
        raise ShapeError(f"first extent {n} not divisible by group size {group_size}")
    grouped = reshape(x, (n // group_size, group_size) + tuple(x.shape[1:]))
    return amax(grouped, axis=1)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).astype(x.dtype, copy=True),)

    return _record("sum", (x,), np.asarray(out), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        denom = x.size
    elif isinstance(axis, tuple):
        denom = int(np.prod([x.shape[a] for a in axis]))
    else:
        denom = x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / denom)


# ---------------------------------------------------------------------------
# normalization / softmax


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then scale and shift.

    Uses the population (biased) variance. eps=0 is permitted when rows are
    non-constant.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    if eps < 0:
        raise ShapeError("eps must be >= 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...d,...d->...", xhat, xhat) / d
    inv = 1.0 / np.sqrt(var + eps)[..., None]
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def bwd(g):
        gg = g * gamma.data
        gxhat_mean = gg.mean(axis=-1, keepdims=True)
        gxhat_xhat_mean = np.einsum("...d,...d->...", gg, xhat)[..., None] / d
        gx = gg
        gx -= gxhat_mean
        gx -= xhat * gxhat_xhat_mean
        gx *= inv
        axes = tuple(range(g.ndim - 1))
        ggamma = np.einsum("nd,nd->d", g.reshape(-1, d), xhat.reshape(-1, d))
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row (last-axis) softmax; -inf entries map to exact zeros."""
    m = np.max(x.data, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateRowError("softmax row with no finite entry")
    shifted = x.data - m
    e = np.where(np.isneginf(x.data), 0.0, np.exp(shifted))
    denom = e.sum(axis=-1, keepdims=True)
    out = (e / denom).astype(x.dtype, copy=False)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax_rows", (x,), out, bwd)


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows; labels is an int vector."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        from .errors import DataError

        raise DataError(f"labels must be ints in [0,{c}) with shape ({n},)")
    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = logits.data[np.arange(n), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record("cross_entropy", (logits,), out, bwd)


# ---------------------------------------------------------------------------
# fused selective-scan recurrence


def ssm_scan_core(u: Tensor, delta: Tensor, b_seq: Tensor, c_seq: Tensor, a_neg: Tensor) -> Tensor:
    """Diagonal state-space recurrence over a sequence.

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * u_t,  y_t = <h_t, C_t>.

    Shapes (optionally with a leading batch extent):
      u, delta: (N, d_inner); b_seq, c_seq: (N, d_state); a_neg: (d_inner, d_state).

    Recorded as one fused op: a per-step tape would dominate runtime. The
    backward recurrence is exercised by the finite-difference suite like any
    other op.
    """
    batched = u.ndim == 3
    ud, dd, bd, cd = u.data, delta.data, b_seq.data, c_seq.data
    if not batched:
        ud, dd, bd, cd = ud[None], dd[None], bd[None], cd[None]
    bt, n, d_inner = ud.shape
    d_state = a_neg.shape[-1]
    if a_neg.shape != (d_inner, d_state):
        raise ShapeError(f"state matrix shape {a_neg.shape} != ({d_inner},{d_state})")
    if dd.shape != (bt, n, d_inner) or bd.shape != (bt, n, d_state) or cd.shape != (bt, n, d_state):
        raise ShapeError("ssm_scan operand shapes inconsistent")

    # time-major internals: per-step slabs are contiguous
    ud_t = np.ascontiguousarray(ud.swapaxes(0, 1))     # (n, bt, d_inner)
    dd_t = np.ascontiguousarray(dd.swapaxes(0, 1))
    bd_t = np.ascontiguousarray(bd.swapaxes(0, 1))     # (n, bt, d_state)
    cd_t = np.ascontiguousarray(cd.swapaxes(0, 1))
    da = dd_t[..., None] * a_neg.data                  # (n, bt, d_inner, d_state)
    np.exp(da, out=da)
    du = dd_t * ud_t
    hs = np.empty_like(da)
    prev = None
    for t in range(n):
        ht = hs[t]
        np.multiply(du[t, :, :, None], bd_t[t, :, None, :], out=ht)
        if prev is not None:
            ht += da[t] * prev
        prev = ht
    y = np.einsum("tbds,tbs->btd", hs, cd_t)
    if not np.all(np.isfinite(y)):
        raise StabilityError("ssm_scan produced a non-finite hidden state")

    def bwd(g):
        gy = g if batched else g[None]
        gy_t = np.ascontiguousarray(gy.swapaxes(0, 1))
        # dL/dh_t accumulates the y_t term plus the propagated recurrence term;
        # only the propagation is sequential, everything else vectorizes over t.
        gh_all = np.empty_like(hs)
        np.multiply(gy_t[n - 1, :, :, None], cd_t[n - 1, :, None, :], out=gh_all[n - 1])
        for t in range(n - 2, -1, -1):
            ght = gh_all[t]
            np.multiply(gy_t[t, :, :, None], cd_t[t, :, None, :], out=ght)
            ght += gh_all[t + 1] * da[t + 1]
        gc = np.einsum("tbds,tbd->bts", hs, gy_t)
        gb = np.einsum("tbds,tbd->bts", gh_all, du)
        ghb = np.einsum("tbds,tbs->tbd", gh_all, bd_t)
        gu = (ghb * dd_t).swapaxes(0, 1)
        # grad wrt (delta_t * A): gh_t * h_{t-1} * da_t; reuse the gh buffer
        g_pre = gh_all
        g_pre[1:] *= hs[:-1]
        g_pre[1:] *= da[1:]
        g_pre[0] = 0.0
        gdelta = np.einsum("tbds,ds->tbd", g_pre, a_neg.data)
        gdelta += ghb * ud_t
        gdelta = gdelta.swapaxes(0, 1)
        ga = np.einsum("tbds,tbd->ds", g_pre, dd_t)
        if not batched:
            gu, gdelta, gb, gc = gu[0], gdelta[0], gb[0], gc[0]
        return np.ascontiguousarray(gu), np.ascontiguousarray(gdelta), gb, gc, ga

    return _record("ssm_scan", (u, delta, b_seq, c_seq, a_neg), y if batched else y[0], bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class FDReport:
    max_rel_err: float
    passed: bool
    n_coords: int
    per_param: dict


def finite_difference_check(
    f,
    params,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> FDReport:
    """Compare reverse-mode gradients of scalar `f()` against central differences.

    `f` must be a deterministic zero-argument closure over `params`, all of
    which must be float64. rel err = |a - n| / max(1e-8, |a| + |n|). When
    `max_coords_per_param` is set, a seeded subset of coordinates is checked.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("finite_difference_check requires float64 parameters")
    v1 = f()
    v2 = f()
    if not np.array_equal(v1.data, v2.data):
        raise DeterminismError("f evaluated twice with different results")

    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape)

    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    n_checked = 0
    per_param = {}
    for pi, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        worst = 0.0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + eps
            fp = float(f().data)
            flat[ci] = orig - eps
            fm = float(f().data)
            flat[ci] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = float(g.reshape(-1)[ci])
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
            n_checked += 1
        per_param[pi] = worst
        max_rel = max(max_rel, worst)
    return FDReport(max_rel_err=max_rel, passed=max_rel < tol, n_coords=n_checked, per_param=per_param)
