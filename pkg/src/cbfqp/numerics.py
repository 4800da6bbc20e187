"""Dense vector helpers and nested dual-number forward differentiation.

Constraint builders need gradients and directional derivatives of scalar
functions that are defined by recursive composition of user callables
(barrier cascades, Lyapunov functions, auxiliary feedback laws).  Forward-mode
dual numbers traverse those compositions without any symbolic manipulation;
nesting duals gives exact higher-order directional derivatives up to a
configurable depth.

Evaluators that should be differentiable must restrict themselves to
``+ - * / **``, comparisons, and the helpers exported here (``sign``).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence, Union

import numpy as np

# Nesting depth supported by default; each differentiation order consumes one
# level, so depth 4 covers barrier cascades of relative degree m <= 5.
DEFAULT_MAX_NESTING = 4

Scalar = Union[float, "Dual"]


class NonFiniteError(ArithmeticError):
    """A differentiation produced a non-finite value or derivative."""


class DimensionError(ValueError):
    """Operands have mismatched or invalid dimensions."""


def as_vector(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a 1-D float array, optionally checking its length."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise DimensionError(f"{name} must have length {n}, got {v.shape[0]}")
    return v


def as_matrix(a, shape: tuple[int, int] | None = None, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a 2-D float array, optionally checking its shape."""
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise DimensionError(f"{name} must have shape {shape}, got {m.shape}")
    return m


class Dual:
    """Dual scalar ``value + eps * deriv`` with possibly nested components.

    ``value`` and ``deriv`` are floats or further ``Dual`` instances; the
    nesting depth equals the differentiation order being carried.  Plain
    numbers mixed into arithmetic are lifted as constants (zero derivative),
    which keeps nesting levels consistent.
    """

    __slots__ = ("value", "deriv")

    def __init__(self, value: Scalar, deriv: Scalar = 0.0):
        self.value = value
        self.deriv = deriv

    def __repr__(self) -> str:
        return f"Dual({self.value!r}, {self.deriv!r})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value + other.value, self.deriv + other.deriv)
        return Dual(self.value + other, self.deriv)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.value, -self.deriv)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.value - other.value, self.deriv - other.deriv)
        return Dual(self.value - other, self.deriv)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.deriv)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.value * other.value,
                self.deriv * other.value + self.value * other.deriv,
            )
        return Dual(self.value * other, self.deriv * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.value
            return Dual(
                self.value * inv,
                (self.deriv * other.value - self.value * other.deriv) * inv * inv,
            )
        return Dual(self.value / other, self.deriv / other)

    def __rtruediv__(self, other):
        inv = 1.0 / self.value
        return Dual(other * inv, -other * self.deriv * inv * inv)

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            raise TypeError("dual exponents are not supported")
        if exponent == 2:  # common case in quadratic class-K terms
            return self * self
        val = self.value ** exponent
        return Dual(val, exponent * self.value ** (exponent - 1) * self.deriv)

    # comparisons act on primal values so evaluators can branch

    def __lt__(self, other):
        return primal(self) < primal(other)

    def __le__(self, other):
        return primal(self) <= primal(other)

    def __gt__(self, other):
        return primal(self) > primal(other)

    def __ge__(self, other):
        return primal(self) >= primal(other)

    def __float__(self):
        return float(primal(self))


def primal(x: Scalar) -> float:
    """Innermost real value of a possibly nested dual."""
    while isinstance(x, Dual):
        x = x.value
    return float(x)


def tangent(x: Scalar) -> Scalar:
    """Derivative component of ``x`` (0 for plain numbers)."""
    return x.deriv if isinstance(x, Dual) else 0.0


def sign(x: Scalar) -> Scalar:
    """Dual-safe sign with sign(0) = 0; locally constant so derivative is 0."""
    if isinstance(x, Dual):
        return Dual(sign(x.value), x.deriv * 0.0)
    return 1.0 if x > 0 else (-1.0 if x < 0 else 0.0)


def is_finite(x: Scalar) -> bool:
    if isinstance(x, Dual):
        return is_finite(x.value) and is_finite(x.deriv)
    return math.isfinite(x)


def _require_finite(x: Scalar, context: str) -> Scalar:
    if not is_finite(x):
        raise NonFiniteError(f"non-finite value while evaluating {context}")
    return x


def directional_derivative(
    f: Callable[[Sequence[Scalar]], Scalar],
    z: Sequence[Scalar],
    d: Sequence[Scalar],
) -> Scalar:
    """Derivative of ``f`` at ``z`` along direction ``d`` in one dual pass.

    Accepts entries that are already duals, in which case the result carries
    their derivatives through (this is what makes cascade nesting work).
    """
    if len(z) != len(d):
        raise DimensionError(f"point has length {len(z)}, direction {len(d)}")
    seeded = [Dual(zj, dj) for zj, dj in zip(z, d)]
    out = f(seeded)
    return _require_finite(tangent(out), "directional derivative")


def gradient(f: Callable[[Sequence[Scalar]], Scalar], z: Sequence[Scalar]):
    """Gradient of scalar ``f`` at ``z`` by forward-mode seeding.

    Returns a float array when ``z`` is numeric, otherwise a list of scalars
    (duals) so that nested differentiation can continue.
    """
    n = len(z)
    entries = []
    numeric = True
    for j in range(n):
        seeded = [Dual(zk, 1.0 if k == j else 0.0) for k, zk in enumerate(z)]
        gj = _require_finite(tangent(f(seeded)), "gradient")
        numeric = numeric and not isinstance(gj, Dual)
        entries.append(gj)
    if numeric:
        return np.array([float(g) for g in entries])
    return entries


def dot(a: Sequence[Scalar], b: Sequence[Scalar]) -> Scalar:
    """Dual-safe inner product."""
    if len(a) != len(b):
        raise DimensionError(f"dot of length {len(a)} with length {len(b)}")
    total: Scalar = 0.0
    for x, y in zip(a, b):
        total = total + x * y
    return total
