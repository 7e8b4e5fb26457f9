"""Scalar reverse-mode differentiation on an append-only tape.

Every :class:`Value` lives on exactly one :class:`Tape`. Nodes are appended in
creation order, so reverse index order is already a valid reverse topological
order and :meth:`Tape.backward` is a single linear sweep.

The module-level helpers (:func:`exp`, :func:`log`, :func:`logistic`, ...)
accept either plain floats or Values, which lets the loss code be written once
and evaluated both with and without a tape.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when Values from different or cleared tapes are combined."""


_FAULTS: dict[str, float] = {}


@contextmanager
def inject_fault(op: str, factor: float = 1.5):
    """Test hook: scale the local partials recorded by primitive ``op``."""
    _FAULTS[op] = factor
    try:
        yield
    finally:
        _FAULTS.pop(op, None)


class Value:
    """A scalar node: forward value, accumulated gradient and local partials."""

    __slots__ = ("data", "grad", "parents", "partials", "op", "tape", "index")

    def __init__(self, data, tape, parents=(), partials=(), op="leaf"):
        if _FAULTS and op in _FAULTS:
            partials = tuple(p * _FAULTS[op] for p in partials)
        self.data = float(data)
        self.grad = 0.0
        self.parents = parents
        self.partials = partials
        self.op = op
        self.tape = tape
        self.index = tape._append(self)

    def __repr__(self):
        return f"Value(data={self.data!r}, grad={self.grad!r}, op={self.op!r})"

    def __float__(self):
        return self.data

    def _unary(self, data, partial, op):
        self._check_live()
        return Value(data, self.tape, (self,), (partial,), op)

    def _binary(self, other, data, p_self, p_other, op):
        self._check_live()
        if isinstance(other, Value):
            other._check_live()
            if other.tape is not self.tape:
                raise TapeError("operands live on different tapes")
            return Value(data, self.tape, (self, other), (p_self, p_other), op)
        return Value(data, self.tape, (self,), (p_self,), op)

    def _check_live(self):
        if self.tape is None:
            raise TapeError("Value belongs to a cleared tape")

    # arithmetic
    def __add__(self, other):
        o = other.data if isinstance(other, Value) else float(other)
        return self._binary(other, self.data + o, 1.0, 1.0, "add")

    __radd__ = __add__

    def __mul__(self, other):
        o = other.data if isinstance(other, Value) else float(other)
        return self._binary(other, self.data * o, o, self.data, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        return self._unary(-self.data, -1.0, "neg")

    def __sub__(self, other):
        o = other.data if isinstance(other, Value) else float(other)
        return self._binary(other, self.data - o, 1.0, -1.0, "sub")

    def __rsub__(self, other):
        return self._unary(float(other) - self.data, -1.0, "rsub")

    def __truediv__(self, other):
        if isinstance(other, Value):
            o = other.data
            return self._binary(other, self.data / o, 1.0 / o, -self.data / (o * o), "div")
        o = float(other)
        return self._unary(self.data / o, 1.0 / o, "div")

    def __rtruediv__(self, other):
        c = float(other)
        return self._unary(c / self.data, -c / (self.data * self.data), "rdiv")

    def __pow__(self, k):
        k = float(k)
        return self._unary(self.data**k, k * self.data ** (k - 1.0), "pow")

    def __abs__(self):
        sign = 1.0 if self.data > 0 else (-1.0 if self.data < 0 else 0.0)
        self.tape._branch(self.data > 0)
        return self._unary(abs(self.data), sign, "abs")

    # comparisons act on the forward value only
    def __lt__(self, other):
        return self.data < float(other)

    def __gt__(self, other):
        return self.data > float(other)

    def __le__(self, other):
        return self.data <= float(other)

    def __ge__(self, other):
        return self.data >= float(other)

    def backward(self):
        self.tape.backward(self)


class Tape:
    """Append-only node store with checkpoint/truncate and a linear backward sweep.

    ``branches`` records which side of every non-smooth primitive (abs, max,
    clamp) was taken; the gradient checker uses it to detect kinks.
    """

    def __init__(self):
        self.nodes: list[Value] = []
        self.branches: list[object] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _branch(self, flag):
        self.branches.append(flag)

    def var(self, data, op="leaf") -> Value:
        return Value(data, self, op=op)

    def checkpoint(self) -> int:
        return len(self.nodes)

    def truncate(self, mark: int) -> None:
        """Drop every node created after ``mark``; dropped Values become unusable."""
        for node in self.nodes[mark:]:
            node.tape = None
            node.parents = ()
            node.index = -1
        del self.nodes[mark:]
        if mark == 0:
            self.branches.clear()

    def reset(self) -> None:
        self.truncate(0)

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = 0.0

    def backward(self, root: Value) -> None:
        """Accumulate d(root)/d(node) into ``node.grad`` for every node up to root.

        Adjoints are computed in a scratch buffer and then added, so calling
        backward twice without :meth:`zero_grad` exactly doubles the gradients.
        """
        if root.tape is not self:
            raise TapeError("root does not belong to this tape")
        adj = [0.0] * (root.index + 1)
        adj[root.index] = 1.0
        nodes = self.nodes
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            node = nodes[i]
            for parent, partial in zip(node.parents, node.partials):
                adj[parent.index] += partial * g
        for i, g in enumerate(adj):
            if g:
                nodes[i].grad += g


# --- generic primitives (float or Value) ------------------------------------


def _logistic_float(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def exp(x):
    if isinstance(x, Value):
        y = math.exp(x.data)
        return x._unary(y, y, "exp")
    return math.exp(x)


def log(x):
    """Natural log; non-positive input raises ``ValueError`` (clamp first)."""
    xv = x.data if isinstance(x, Value) else x
    if xv <= 0:
        raise ValueError(f"log of non-positive value {xv!r}")
    if isinstance(x, Value):
        return x._unary(math.log(xv), 1.0 / xv, "ln")
    return math.log(xv)


def logistic(x):
    if isinstance(x, Value):
        s = _logistic_float(x.data)
        return x._unary(s, s * (1.0 - s), "logistic")
    return _logistic_float(x)


def max_const(x, c: float):
    """max(x, c) for a constant c; subgradient 0 on the flat branch."""
    if isinstance(x, Value):
        active = x.data > c
        x.tape._branch(active)
        return x._unary(x.data if active else float(c), 1.0 if active else 0.0, "max_const")
    return max(x, c)


def clamp(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient 1 strictly inside, 0 on the flat branches."""
    if isinstance(x, Value):
        if x.data < lo:
            x.tape._branch(-1)
            return x._unary(lo, 0.0, "clamp")
        if x.data > hi:
            x.tape._branch(1)
            return x._unary(hi, 0.0, "clamp")
        x.tape._branch(0)
        return x._unary(x.data, 1.0, "clamp")
    return min(max(x, lo), hi)


def vsum(xs: Iterable):
    """Sum as a single n-ary node when any term is a Value."""
    xs = list(xs)
    vals = [x for x in xs if isinstance(x, Value)]
    if not vals:
        return math.fsum(xs)
    tape = vals[0].tape
    for v in vals:
        v._check_live()
        if v.tape is not tape:
            raise TapeError("operands live on different tapes")
    total = sum(x.data if isinstance(x, Value) else x for x in xs)
    return Value(total, tape, tuple(vals), (1.0,) * len(vals), "sum")


def mean(xs: Sequence):
    xs = list(xs)
    if not xs:
        raise ValueError("mean of empty sequence")
    return vsum(xs) * (1.0 / len(xs)) if any(isinstance(x, Value) for x in xs) else math.fsum(xs) / len(xs)


def value_of(x) -> float:
    return x.data if isinstance(x, Value) else float(x)


# --- finite-difference verification -----------------------------------------


@dataclass
class GradCheckReport:
    point: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    skipped: bool = False
    reason: str = ""
    label: str = ""

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.skipped or self.max_rel_error < self.tol


def relative_error(a, b, floor: float = 1e-5) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor); the floor keeps FD roundoff on near-zero
    components from masquerading as a failure."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tape_gradient(f: Callable[[list], Value], point) -> tuple[float, np.ndarray, list]:
    """Evaluate ``f`` on fresh leaves and return (value, gradient, branch signature)."""
    tape = Tape()
    leaves = [tape.var(float(p)) for p in np.asarray(point, dtype=float)]
    out = f(leaves)
    if not isinstance(out, Value):
        return float(out), np.zeros(len(leaves)), list(tape.branches)
    tape.backward(out)
    grad = np.array([v.grad for v in leaves])
    branches = list(tape.branches)
    tape.reset()
    return out.data, grad, branches


def check_gradients(
    f: Callable[[list], object],
    point,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-5,
    label: str = "",
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` maps a list of Values to a scalar Value. If any perturbed evaluation
    takes a different branch through a non-smooth primitive than the base
    point, the point straddles a kink and the report is marked skipped.
    """
    point = np.asarray(point, dtype=float)
    _, analytic, base_branches = tape_gradient(f, point)
    numeric = np.empty_like(point)
    for i in range(point.size):
        up = point.copy()
        up[i] += h
        dn = point.copy()
        dn[i] -= h
        f_up, _, br_up = tape_gradient(f, up)
        f_dn, _, br_dn = tape_gradient(f, dn)
        if br_up != base_branches or br_dn != base_branches:
            return GradCheckReport(point, analytic, numeric, np.zeros(0), tol, True,
                                   f"kink within h along coordinate {i}", label)
        numeric[i] = (f_up - f_dn) / (2.0 * h)
    return GradCheckReport(point, analytic, numeric, relative_error(analytic, numeric, floor), tol,
                           label=label)
