"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape`. Outside of a tape
nothing is recorded, so plain forward passes cost no bookkeeping.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    ...     grads = tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class _Record:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of operations. Recording order is a topological order."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward) -> int:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); open a new Tape")
        self.records.append(_Record(out, tuple(parents), backward))
        return len(self.records) - 1

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate d(loss)/dt into ``t.grad`` for every reachable requires_grad tensor.

        Returns a map from ``id(tensor)`` to its gradient.
        """
        if loss.data.ndim != 0:
            raise TapeError(f"backward() needs a rank-0 loss, got shape {loss.shape}")
        if loss._tape is not self or loss._node is None:
            raise TapeError("loss is not recorded on this tape (detached)")
        if self.consumed:
            raise TapeError("backward() already called on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records[: loss._node + 1]):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            rec.out.grad = g if rec.out.grad is None else rec.out.grad + g
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != p.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != tensor shape {p.shape}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
                if p._node is None:
                    leaves[key] = p
        for key, t in leaves.items():
            t.grad = grads[key] if t.grad is None else t.grad + grads[key]
        # drop closures so the tensor <-> tape cycle does not pin step-sized buffers
        self.records = []
        return grads


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._node: int | None = None

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        # always an ndarray, so in-place edits of 0-d values reach the tensor
        self._data = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._tape = tape
        out._node = tape.record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise


def elementwise(kind: str, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    x, y = a.data, b.data
    if kind == "add":
        out = x + y
        back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif kind == "sub":
        out = x - y
        back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif kind == "mul":
        out = x * y
        back = lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape))
    elif kind == "div":
        if np.any(y == 0):
            idx = tuple(int(i) for i in np.argwhere(y == 0)[0])
            raise NumericDomainError(f"division by zero at divisor index {idx}")
        out = x / y
        back = lambda g: (
            _unbroadcast(g / y, a.shape),
            _unbroadcast(-g * x / (y * y), b.shape),
        )
    else:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return _make(out, (a, b), back)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x**exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


# ------------------------------------------------------------------------ map


def _domain_check(x: np.ndarray, bad: np.ndarray, name: str):
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericDomainError(f"{name} domain violation at index {idx}: {x[idx]!r}")


def map_op(kind: str, a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if kind == "exp":
        out = np.exp(x)
        back = lambda g: (g * out,)
    elif kind == "log":
        _domain_check(x, ~(x > 0), "log")
        out = np.log(x)
        back = lambda g: (g / x,)
    elif kind == "sqrt":
        _domain_check(x, ~(x >= 0), "sqrt")
        out = np.sqrt(x)
        # derivative is infinite at 0; report it as 0 so zero-variance rows stay finite
        back = lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1.0)), 0.0),)
    elif kind == "tanh":
        out = np.tanh(x)
        back = lambda g: (g * (1 - out * out),)
    elif kind == "relu":
        out = np.maximum(x, 0.0)
        back = lambda g: (g * (x > 0),)
    elif kind == "logistic":
        out = _logistic(x)
        back = lambda g: (g * out * (1 - out),)
    else:
        raise ValueError(f"unknown map op {kind!r}")
    return _make(out, (a,), back)


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a):
    return map_op("exp", a)


def log(a):
    return map_op("log", a)


def sqrt(a):
    return map_op("sqrt", a)


def tanh(a):
    return map_op("tanh", a)


def relu(a):
    return map_op("relu", a)


def logistic(a):
    return map_op("logistic", a)


# --------------------------------------------------------------------- reduce


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim or ndim == 0:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    axes = _norm_axis(axis, x.ndim)
    kept_shape = tuple(1 if axes is None or i in axes else n for i, n in enumerate(x.shape))

    if kind in ("sum", "mean"):
        out = x.sum(axis=axes, keepdims=keepdims)
        count = x.size if axes is None else int(np.prod([x.shape[i] for i in axes]))
        scale = 1.0 if kind == "sum" else 1.0 / count
        if kind == "mean":
            out = out * scale

        def back(g):
            return (np.broadcast_to(np.reshape(g, kept_shape) * scale, x.shape).copy(),)

    elif kind == "max":
        if axes is not None and len(axes) != 1:
            raise ShapeError("max reduces over a single axis or all axes")
        if axes is None:
            flat = int(np.argmax(x))  # first occurrence
            out = x.reshape(-1)[flat].reshape((1,) * x.ndim if keepdims else ())

            def back(g):
                gx = np.zeros(x.size)
                gx[flat] = np.sum(g)
                return (gx.reshape(x.shape),)

        else:
            ax = axes[0]
            idx = np.argmax(x, axis=ax)  # first occurrence on ties
            out = np.take_along_axis(x, np.expand_dims(idx, ax), axis=ax)
            if not keepdims:
                out = np.squeeze(out, axis=ax)

            def back(g):
                gx = np.zeros_like(x)
                np.put_along_axis(gx, np.expand_dims(idx, ax), np.reshape(g, kept_shape), axis=ax)
                return (gx,)

    else:
        raise ValueError(f"unknown reduce op {kind!r}")
    return _make(np.asarray(out, dtype=np.float64), (a,), back)


# ------------------------------------------------------------- shape plumbing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def back(g):
        gx = np.zeros_like(a.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make(out, (a,), back)


def take_lastaxis(a, index) -> Tensor:
    """Per-row gather along the last axis; ``index`` broadcasts against ``a``'s leading axes."""
    a = as_tensor(a)
    index = np.broadcast_to(np.asarray(index, dtype=np.intp), a.shape[:-1] + np.shape(index)[-1:])
    out = np.take_along_axis(a.data, index, axis=-1)

    def back(g):
        gx = np.zeros_like(a.data)
        lead = np.indices(index.shape)[:-1]
        np.add.at(gx, (*lead, index), g)
        return (gx,)

    return _make(out, (a,), back)


def grad_reverse(a, scale: float = 1.0) -> Tensor:
    """Identity forward, gradient multiplied by ``-scale`` backward."""
    a = as_tensor(a)
    return _make(a.data.copy(), (a,), lambda g: (-scale * g,))


# ----------------------------------------------------------------- composites


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    out = log(exp(a - shift).sum(axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    e = exp(a - Tensor(np.max(a.data, axis=axis, keepdims=True)))
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    return _make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C_in, L) with (C_out, C_in, k), zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects (N,C,L) and (O,C,k), got {x.shape} and {w.shape}")
    n, c_in, length = x.shape
    c_out, c_w, k = w.shape
    if c_w != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {w.shape}")
    padded = length + 2 * padding
    if k > padded:
        raise ShapeError(f"kernel size {k} larger than padded input length {padded}")
    l_out = (padded - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    span = stride * (l_out - 1) + 1
    cols = np.stack([xp[:, :, j : j + span : stride] for j in range(k)], axis=2)  # N,C,k,L'
    wd = w.data
    out = np.einsum("nckl,ock->nol", cols, wd, optimize=True)

    def back(g):
        gw = np.einsum("nol,nckl->ock", g, cols, optimize=True)
        gcols = np.einsum("nol,ock->nckl", g, wd, optimize=True)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, j, :]
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        return (gx, gw)

    return _make(out, (x, w), back)


def interp1d(signal, locations) -> Tensor:
    """Sample ``signal`` along its last axis at ``locations`` in [-1, 1].

    -1 is the first sample and +1 the last; values in between are linear
    interpolations of the two straddling samples. Out-of-range locations are
    clamped and receive zero gradient.
    """
    signal, locations = as_tensor(signal), as_tensor(locations)
    length = signal.shape[-1]
    if signal.shape[:-1] != locations.shape[:-1]:
        raise ShapeError(f"interp1d leading shapes differ: {signal.shape} vs {locations.shape}")
    if length == 1:
        out = np.broadcast_to(signal.data, locations.shape).copy()
        return _make(out, (signal, locations), lambda g: (g.sum(-1, keepdims=True), np.zeros_like(g)))
    lam = locations.data
    inside = (lam >= -1.0) & (lam <= 1.0)
    pos = (np.clip(lam, -1.0, 1.0) + 1.0) * (0.5 * (length - 1))
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, length - 2)
    frac = pos - i0
    s = signal.data
    v0 = np.take_along_axis(s, i0, axis=-1)
    v1 = np.take_along_axis(s, i0 + 1, axis=-1)
    slope = v1 - v0
    out = v0 + frac * slope

    def back(g):
        gs = np.zeros_like(s)
        lead = np.indices(i0.shape)[:-1]
        np.add.at(gs, (*lead, i0), g * (1.0 - frac))
        np.add.at(gs, (*lead, i0 + 1), g * frac)
        gl = np.where(inside, g * slope * (0.5 * (length - 1)), 0.0)
        return (gs, gl)

    return _make(out, (signal, locations), back)


def sort_lastaxis(a) -> tuple[Tensor, np.ndarray]:
    """Ascending sort along the last axis. Returns the sorted tensor and the permutation."""
    a = as_tensor(a)
    perm = np.argsort(a.data, axis=-1, kind="stable")
    out = np.take_along_axis(a.data, perm, axis=-1)

    def back(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, perm, g, axis=-1)
        return (gx,)

    return _make(out, (a,), back), perm


# ----------------------------------------------------------------- grad check


def _contract(out: np.ndarray, weights: np.ndarray | None) -> float:
    return float(out) if weights is None else float(np.sum(out * weights))


def grad_errors(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5, seed: int = 0):
    """Per-input arrays of relative error between analytic and central-difference gradients.

    Non-scalar outputs are contracted with a fixed random weight field so every
    output coordinate contributes. Relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    inputs = list(inputs)
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = as_tensor(f(*inputs))
            weights = None
            loss = out
            if out.ndim:
                weights = np.random.default_rng(seed).standard_normal(out.shape)
                loss = (out * Tensor(weights)).sum()
            tape.backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

        errors = []
        for t, ana in zip(inputs, analytic):
            num = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            num_flat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = _contract(as_tensor(f(*inputs)).data, weights)
                flat[i] = orig - step
                lo = _contract(as_tensor(f(*inputs)).data, weights)
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2 * step)
            denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
            errors.append(np.abs(ana - num) / denom)
        return errors
    finally:
        for t, (rg, gr) in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = gr


def grad_check(f: Callable[..., Tensor], x, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of the analytic gradient of ``f`` against central differences."""
    inputs = [x] if isinstance(x, Tensor) else list(x)
    errs = grad_errors(f, inputs, step=step, seed=seed)
    return max((float(e.max()) if e.size else 0.0) for e in errs)
