"""Dense tensors with a reverse-mode differentiation tape.

Every operation on a :class:`Tensor` that belongs to a :class:`Tape` and
depends on a watched parameter is appended to that tape. ``backward`` walks
the record in reverse creation order, which is a valid reverse topological
order because an op can only consume nodes that already exist.

Tensors without a tape (or that do not depend on a parameter) behave as plain
constants, so the same model code serves training and no-grad evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class NonDeterministicError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "node", "name")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None, name: str | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node  # None means constant w.r.t. the tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a primitive; use mul/exp/log")
        return mul(self, 1.0 / other)


@dataclass
class _Op:
    name: str
    out: int
    inputs: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive ops plus a registry of parameter leaves.

    ``params`` maps names to arrays; :meth:`param` returns one shared leaf per
    name so that every use of a parameter accumulates into the same gradient.
    """

    def __init__(self, params: Mapping[str, np.ndarray] | None = None, dtype=np.float64, requires_grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.requires_grad = requires_grad
        self._source = params if params is not None else {}
        self._ops: list[_Op] = []
        self._leaves: dict[str, Tensor] = {}
        self._next = 0

    def _new_node(self) -> int:
        n = self._next
        self._next += 1
        return n

    def param(self, name: str) -> Tensor:
        leaf = self._leaves.get(name)
        if leaf is None:
            arr = np.asarray(self._source[name], dtype=self.dtype)
            node = self._new_node() if self.requires_grad else None
            leaf = Tensor(arr, self, node, name)
            self._leaves[name] = leaf
        return leaf

    def watch(self, data, name: str) -> Tensor:
        """Register an ad-hoc leaf (e.g. an input we want a gradient for)."""
        if name in self._leaves:
            raise KeyError(f"leaf {name!r} already registered")
        leaf = Tensor(np.asarray(data, dtype=self.dtype), self, self._new_node(), name)
        self._leaves[name] = leaf
        return leaf

    def constant(self, data) -> Tensor:
        if isinstance(data, Tensor):
            return data
        return Tensor(np.asarray(data, dtype=self.dtype), self)

    @property
    def leaves(self) -> dict[str, Tensor]:
        return dict(self._leaves)

    def __len__(self) -> int:
        return len(self._ops)

    def _record(self, name, out_data, inputs: Sequence[Tensor], vjp) -> Tensor:
        out = Tensor(out_data, self, self._new_node())
        self._ops.append(_Op(name, out.node, tuple(t.node for t in inputs), vjp))
        return out


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype.kind in "fiub":
        arr = arr.astype(like.data.dtype, copy=False)
    return Tensor(arr)


def _common_tape(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
    return tape


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {name}")


def _emit(name, out_data, inputs: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(name, out_data)
    tape = _common_tape(*inputs)
    if tape is None:
        some = next((t.tape for t in inputs if t.tape is not None), None)
        return Tensor(out_data, some)
    return tape._record(name, out_data, inputs, vjp)


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    # Allowed: equal shapes, scalars, a feature vector against a batch, or
    # size-1 axes of equal rank (row/column vectors against a batch matrix).
    if a == b or a == () or b == ():
        return True
    if len(a) == len(b):
        return all(p == q or p == 1 or q == 1 for p, q in zip(a, b))
    if abs(len(a) - len(b)) == 1:
        short, long_ = (a, b) if len(a) < len(b) else (b, a)
        return short == long_[1:]
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shapes(name, a: Tensor, b: Tensor) -> None:
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _emit("log", out, (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at exactly 0 is 0
    return _emit("relu", np.where(mask, a.data, 0).astype(a.data.dtype, copy=False), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    sig = _sigmoid(ad)
    return _emit("softplus", out, (a,), lambda g: (g * sig,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _emit("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (feature axis by default)."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ValueError("concat of no tensors")
    if len(ts) == 1:
        return ts[0]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in ts], axis=ax)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(offsets[:-1], offsets[1:]):
            idx[ax] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return grads

    return _emit("concat", out, ts, vjp)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    a = _as_tensor(a)
    index = np.asarray(index)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _emit("take_rows", a.data[index], (a,), vjp)


def log_sum_exp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if a.shape[axis] == 0:
        raise ValueError("log_sum_exp over an empty axis")
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = shifted / s
    res = out if keepdims else np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _emit("log_sum_exp", res, (a,), vjp)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(tape: Tape, output: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` for every tape leaf.

    Leaves the output does not depend on get zero gradients.
    """
    if output.data.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    if output.node is not None:
        if output.tape is not tape:
            raise ValueError("output was not produced on this tape")
        grads[output.node] = np.ones_like(output.data)
        for op in reversed(tape._ops):
            g = grads.pop(op.out, None)
            if g is None:
                continue
            for node, gi in zip(op.inputs, op.vjp(g)):
                if node is None or gi is None:
                    continue
                if node >= op.out:
                    raise RuntimeError("graph cycle: op consumes a node created after it")
                prev = grads.get(node)
                grads[node] = gi if prev is None else prev + gi
    return {
        name: np.asarray(grads.get(leaf.node, np.zeros_like(leaf.data)), dtype=leaf.data.dtype).reshape(
            leaf.shape
        )
        for name, leaf in tape._leaves.items()
    }


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tol]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max entrywise |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    f: Callable[[Tape], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(tape)`` must build a scalar from ``tape.param(name)`` leaves with any
    noise held fixed. ``analytic`` overrides the tape gradients (used to feed
    a deliberately corrupted gradient in negative tests).
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        return float(f(Tape(p, dtype=np.float64)).data)

    base = value(params)
    if value(params) != base:
        raise NonDeterministicError("f gave different values on repeated evaluation")

    if analytic is None:
        tape = Tape(params, dtype=np.float64)
        analytic = backward(tape, f(tape))

    report = GradCheckReport(tol=tol)
    for name, arr in params.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value(params)
            flat[i] = orig - step
            fm = value(params)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        a = analytic.get(name, np.zeros_like(arr))
        report.errors[name] = relative_error(np.asarray(a, dtype=np.float64), num)
    return report
