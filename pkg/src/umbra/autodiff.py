"""Scalar reverse-mode automatic differentiation.

A :class:`Tape` records every operation applied to its :class:`Var` values
together with the local partial derivatives; :func:`backward` then runs one
reverse sweep.  The free functions (:func:`exp`, :func:`log`, ...) accept
plain floats as well as ``Var`` so the same expression code can be evaluated
numerically (for finite differences) or on a tape.

This is deliberately a scalar engine: it serves as the reference gradient
for small problems and as the finite-difference harness.  The production
renderer uses hand-written adjoint kernels checked against it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError


class Tape:
    """Append-only list of nodes ``(op, parents, partials, value)``."""

    __slots__ = ("ops", "parents", "partials", "values", "inputs")

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.partials: list[tuple[float, ...]] = []
        self.values: list[float] = []
        self.inputs: list[int] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, op: str, parents: tuple[int, ...], partials: tuple[float, ...], value: float) -> "Var":
        if not math.isfinite(value):
            raise DomainError(f"{op} produced a non-finite value")
        self.ops.append(op)
        self.parents.append(parents)
        self.partials.append(partials)
        self.values.append(value)
        return Var(self, len(self.values) - 1, value)

    def variable(self, value: float) -> "Var":
        """A new input marked for differentiation."""
        v = self._push("input", (), (), float(value))
        self.inputs.append(v.index)
        return v

    def variables(self, values: Iterable[float]) -> list["Var"]:
        return [self.variable(x) for x in values]


class Var:
    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: float):
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self) -> str:
        return f"Var({self.value!r}, index={self.index})"

    def __float__(self) -> float:
        return self.value

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

    def __pow__(self, other):
        return pow(self, other)

    def __rpow__(self, other):
        return pow(other, self)

    def __abs__(self):
        return absolute(self)

    # comparisons look at values only; they never enter the tape
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)


def value_of(x) -> float:
    return x.value if isinstance(x, Var) else float(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unary(op: str, x, value: float, partial: float):
    if isinstance(x, Var):
        return x.tape._push(op, (x.index,), (partial,), value)
    if not math.isfinite(value):
        raise DomainError(f"{op} produced a non-finite value")
    return value


def _binary(op: str, a, b, value: float, da: float, db: float):
    tape = _tape_of(a, b)
    if tape is None:
        if not math.isfinite(value):
            raise DomainError(f"{op} produced a non-finite value")
        return value
    parents, partials = [], []
    if isinstance(a, Var):
        parents.append(a.index)
        partials.append(da)
    if isinstance(b, Var):
        parents.append(b.index)
        partials.append(db)
    return tape._push(op, tuple(parents), tuple(partials), value)


def add(a, b):
    return _binary("add", a, b, value_of(a) + value_of(b), 1.0, 1.0)


def sub(a, b):
    return _binary("sub", a, b, value_of(a) - value_of(b), 1.0, -1.0)


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    return _binary("mul", a, b, va * vb, vb, va)


def div(a, b):
    va, vb = value_of(a), value_of(b)
    if vb == 0.0:
        raise DomainError("division by zero")
    return _binary("div", a, b, va / vb, 1.0 / vb, -va / (vb * vb))


def neg(x):
    return _unary("neg", x, -value_of(x), -1.0)


def exp(x):
    v = value_of(x)
    try:
        y = math.exp(v)
    except OverflowError:
        raise DomainError("exp overflow") from None
    return _unary("exp", x, y, y)


def log(x):
    v = value_of(x)
    if v <= 0.0:
        raise DomainError("log of a non-positive value")
    return _unary("log", x, math.log(v), 1.0 / v)


def log1p(x):
    v = value_of(x)
    if v <= -1.0:
        raise DomainError("log1p of a value <= -1")
    return _unary("log1p", x, math.log1p(v), 1.0 / (1.0 + v))


def sqrt(x):
    v = value_of(x)
    if v <= 0.0:
        raise DomainError("sqrt needs a positive value to be differentiable")
    y = math.sqrt(v)
    return _unary("sqrt", x, y, 0.5 / y)


def tanh(x):
    y = math.tanh(value_of(x))
    return _unary("tanh", x, y, 1.0 - y * y)


def sin(x):
    v = value_of(x)
    return _unary("sin", x, math.sin(v), math.cos(v))


def cos(x):
    v = value_of(x)
    return _unary("cos", x, math.cos(v), -math.sin(v))


def logistic(x):
    v = value_of(x)
    if v >= 0:
        y = 1.0 / (1.0 + math.exp(-v))
    else:
        e = math.exp(v)
        y = e / (1.0 + e)
    return _unary("logistic", x, y, y * (1.0 - y))


def absolute(x):
    v = value_of(x)
    return _unary("abs", x, abs(v), 1.0 if v > 0 else (-1.0 if v < 0 else 0.0))


def pow(a, b):
    """``a ** b``; a variable exponent needs ``a > 0``."""
    va, vb = value_of(a), value_of(b)
    if isinstance(b, Var) and va <= 0.0:
        raise DomainError("variable exponent needs a positive base")
    if va < 0.0 and vb != int(vb):
        raise DomainError("fractional power of a negative base")
    if va == 0.0 and vb < 0.0:
        raise DomainError("division by zero in pow")
    if va == 0.0 and 0.0 < vb < 1.0 and isinstance(a, Var):
        raise DomainError("pow is not differentiable at 0 for exponents below 1")
    y = va ** vb
    da = vb * va ** (vb - 1.0) if vb != 0.0 else 0.0
    db = y * math.log(va) if va > 0.0 else 0.0
    return _binary("pow", a, b, y, da, db)


def maximum(a, b):
    """Larger operand; the whole gradient goes to it (ties pick ``a``)."""
    va, vb = value_of(a), value_of(b)
    first = va >= vb
    return _binary("max", a, b, va if first else vb, 1.0 if first else 0.0, 0.0 if first else 1.0)


def minimum(a, b):
    """Smaller operand; the whole gradient goes to it (ties pick ``a``)."""
    va, vb = value_of(a), value_of(b)
    first = va <= vb
    return _binary("min", a, b, va if first else vb, 1.0 if first else 0.0, 0.0 if first else 1.0)


def backward(tape: Tape, output: Var, inputs: Sequence[Var] | None = None) -> np.ndarray:
    """Gradient of ``output`` w.r.t. ``inputs`` (default: every marked input, in creation order)."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output is not on this tape")
    adj = [0.0] * (output.index + 1)
    adj[output.index] = 1.0
    parents, partials = tape.parents, tape.partials
    for i in range(output.index, -1, -1):
        g = adj[i]
        if g == 0.0:
            continue
        for p, d in zip(parents[i], partials[i]):
            adj[p] += g * d
    idx = tape.inputs if inputs is None else [v.index for v in inputs]
    return np.array([adj[i] if i <= output.index else 0.0 for i in idx])


def value_and_grad(f: Callable, x0) -> tuple[float, np.ndarray]:
    """Evaluate ``f(list of Var)`` on a fresh tape and return its value and gradient."""
    tape = Tape()
    xs = tape.variables(np.asarray(x0, dtype=np.float64).reshape(-1))
    out = f(xs)
    if not isinstance(out, Var):
        return float(out), np.zeros(len(xs))
    return out.value, backward(tape, out, xs)


def central_differences(f: Callable, x0, h: float = 1e-5) -> np.ndarray:
    if not h > 0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    out = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (value_of(f(xp)) - value_of(f(xm))) / (2.0 * h)
    return out


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_difference_check(f: Callable, x0, h: float = 1e-5, grad: Callable | None = None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps a vector to a scalar.  The analytic gradient is ``grad(x0)``
    when given, otherwise ``f`` is replayed on a tape (it must then accept a
    list of :class:`Var`).
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    numeric = central_differences(f, x0, h)
    analytic = np.asarray(grad(x0), dtype=np.float64).reshape(-1) if grad is not None else value_and_grad(f, x0)[1]
    if analytic.shape != numeric.shape:
        raise ValueError("analytic gradient has the wrong size")
    return float(np.max(relative_error(analytic, numeric))) if x0.size else 0.0
