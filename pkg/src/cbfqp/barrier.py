"""Class-K functions, barrier cascades, and linear-in-input constraint rows.

A state constraint ``b(x) >= 0`` of relative degree ``m`` becomes a cascade

    psi_0 = b,    psi_i = psi_{i-1}-dot + p_i * alpha_i(psi_{i-1})

whose final condition ``psi_m >= 0`` is linear in the stacked input and is
emitted here as a :class:`ConstraintRow`.  Fixed ``p_i`` give the high-order
CBF; making the ``p_i`` states of auxiliary integrator chains whose inputs
join the decision vector gives the adaptive variant, together with rows that
keep each penalty nonnegative (an HOCBF on its own chain) and rows that
stabilize it to a target (a relaxed CLF).

All derivatives are taken numerically with nested duals over the augmented
state, so remainder Lie-derivative terms never need to be expanded by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numerics
from .numerics import (
    DEFAULT_MAX_NESTING,
    DimensionError,
    Scalar,
    directional_derivative,
    dot,
    gradient,
)
from .system import AffineControlSystem, AugmentedSystem, augment


class RelativeDegreeError(ValueError):
    """The input coefficient vanished where the claimed relative degree
    requires it to be nonzero."""


# ---------------------------------------------------------------------------
# class-K functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassK:
    """Strictly increasing function with ``alpha(0) = 0``.

    Built-in kinds (``linear``, ``quadratic``, ``power``) are evaluated with
    plain arithmetic and therefore differentiate through duals automatically.
    A ``custom`` kind must supply both the function and its derivative.
    """

    kind: str
    coefficient: float = 1.0
    exponent: float = 1.0
    fn: Callable[[Scalar], Scalar] | None = None
    fn_derivative: Callable[[Scalar], Scalar] | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic", "power", "custom"):
            raise ValueError(f"unknown class-K kind {self.kind!r}")
        if self.kind == "custom":
            if self.fn is None or self.fn_derivative is None:
                raise ValueError("custom class-K needs fn and fn_derivative")
        else:
            if self.coefficient <= 0:
                raise ValueError("class-K coefficient must be positive")
            if self.kind == "power" and self.exponent <= 0:
                raise ValueError("power class-K exponent must be positive")
        self._spot_check()

    def _spot_check(self):
        grid = np.linspace(0.0, 4.0, 9)
        vals = [float(self(float(s))) for s in grid]
        if abs(vals[0]) > 1e-12:
            raise ValueError("class-K function must vanish at 0")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("class-K function must be strictly increasing")

    def __call__(self, s: Scalar) -> Scalar:
        if self.kind == "linear":
            return self.coefficient * s
        if self.kind == "quadratic":
            return self.coefficient * s * s
        if self.kind == "power":
            return self.coefficient * s ** self.exponent
        if isinstance(s, numerics.Dual):
            return numerics.Dual(self(s.value), self.fn_derivative(s.value) * s.deriv)
        return self.fn(s)


def linear(coefficient: float = 1.0) -> ClassK:
    return ClassK("linear", coefficient)


def quadratic(coefficient: float = 1.0) -> ClassK:
    return ClassK("quadratic", coefficient)


def power(coefficient: float, exponent: float) -> ClassK:
    return ClassK("power", coefficient, exponent)


# ---------------------------------------------------------------------------
# constraint rows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstraintRow:
    """One scalar constraint ``sum_j coeffs[j] * w_j + constant  SENSE  0``
    over named decision variables."""

    coeffs: Mapping[str, float]
    constant: float
    sense: str  # ">=" or "<="
    label: str = ""

    def __post_init__(self):
        if self.sense not in (">=", "<="):
            raise ValueError(f"sense must be '>=' or '<=', got {self.sense!r}")
        clean = {k: float(v) for k, v in self.coeffs.items()}
        if not all(math.isfinite(v) for v in clean.values()) or not math.isfinite(
            self.constant
        ):
            raise ValueError(f"non-finite entries in constraint row {self.label!r}")
        object.__setattr__(self, "coeffs", clean)
        object.__setattr__(self, "constant", float(self.constant))

    def as_le(self, order: Sequence[str]) -> tuple[np.ndarray, float]:
        """Return ``(a, ub)`` with the row rewritten as ``a . w <= ub`` over
        the given variable ordering."""
        unknown = set(self.coeffs) - set(order)
        if unknown:
            raise KeyError(
                f"row {self.label!r} references variables {sorted(unknown)} "
                f"outside the decision vector"
            )
        a = np.array([self.coeffs.get(name, 0.0) for name in order])
        if self.sense == ">=":
            return -a, self.constant
        return a, -self.constant

    def evaluate(self, values: Mapping[str, float]) -> float:
        """Signed margin; nonnegative iff the row is satisfied."""
        total = self.constant + sum(c * values[k] for k, c in self.coeffs.items())
        return total if self.sense == ">=" else -total


def stack_rows(
    rows: Sequence[ConstraintRow], order: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Stack rows into dense ``A w <= ub`` data."""
    if not rows:
        return np.zeros((0, len(order))), np.zeros(0)
    pairs = [r.as_le(order) for r in rows]
    return np.vstack([a for a, _ in pairs]), np.array([ub for _, ub in pairs])


# ---------------------------------------------------------------------------
# barrier specifications
# ---------------------------------------------------------------------------


def _check_cascade(m: int, alphas, max_nesting: int):
    if m < 1:
        raise ValueError("relative degree must be >= 1")
    if len(alphas) != m:
        raise DimensionError(f"need {m} class-K functions, got {len(alphas)}")
    if m - 1 > max_nesting:
        raise ValueError(
            f"relative degree {m} needs nesting depth {m - 1} "
            f"(limit {max_nesting})"
        )


@dataclass(frozen=True)
class HocbfSpec:
    """High-order CBF with fixed positive penalties on each class-K term."""

    barrier: Callable[[Sequence[Scalar]], Scalar]
    relative_degree: int
    alphas: tuple[ClassK, ...]
    penalties: tuple[float, ...] = ()
    max_nesting: int = DEFAULT_MAX_NESTING

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(self.alphas))
        _check_cascade(self.relative_degree, self.alphas, self.max_nesting)
        pens = tuple(self.penalties) or (1.0,) * self.relative_degree
        if len(pens) != self.relative_degree:
            raise DimensionError("need one penalty per cascade level")
        if any(p <= 0 for p in pens):
            raise ValueError("fixed penalties must be positive")
        object.__setattr__(self, "penalties", pens)


@dataclass(frozen=True)
class PenaltyChain:
    """Configuration of one adaptive penalty ``p_i`` for a level ``i < m``."""

    initial: float
    target: float
    aux_alphas: tuple[ClassK, ...] = ()  # HOCBF alphas for its chain
    gains: tuple[float, ...] = ()  # desired-feedback gains, chains longer than 1
    clf_rate: float = 1.0
    input_weight: float = 1.0  # linear cost on nu_i
    slack_weight: float = 1.0  # quadratic cost on delta_i

    def __post_init__(self):
        if self.initial <= 0 or self.target <= 0:
            raise ValueError("penalty initial value and target must be positive")
        if self.clf_rate <= 0 or self.input_weight <= 0 or self.slack_weight <= 0:
            raise ValueError("penalty rates and weights must be positive")
        if any(k <= 0 for k in self.gains):
            raise ValueError("feedback gains must be positive")


@dataclass(frozen=True)
class TopPenalty:
    """Configuration of ``p_m``, the undifferentiated top-level penalty, when
    it enters the QP as a decision variable."""

    initial: float
    target: float
    weight: float  # quadratic cost on (p_m - target)

    def __post_init__(self):
        if self.initial <= 0 or self.target <= 0:
            raise ValueError("top penalty initial value and target must be positive")
        if self.weight < 0:
            raise ValueError("top penalty weight must be nonnegative")


@dataclass(frozen=True)
class AdaCbfSpec:
    """Adaptive CBF: selected cascade levels get time-varying penalties.

    ``chains`` maps levels ``i in 1..m-1`` to their auxiliary-chain
    configuration; ``top`` configures ``p_m`` as a decision variable.  Levels
    in neither get the fixed value from ``fixed`` (default 1), which recovers
    the plain HOCBF when nothing is penalized.
    """

    barrier: Callable[[Sequence[Scalar]], Scalar]
    relative_degree: int
    alphas: tuple[ClassK, ...]
    chains: Mapping[int, PenaltyChain] = field(default_factory=dict)
    top: TopPenalty | None = None
    fixed: Mapping[int, float] = field(default_factory=dict)
    max_nesting: int = DEFAULT_MAX_NESTING

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(self.alphas))
        _check_cascade(self.relative_degree, self.alphas, self.max_nesting)
        m = self.relative_degree
        for i in self.chains:
            if not 1 <= i <= m - 1:
                raise ValueError(f"chain level {i} outside 1..{m - 1}")
        for i, v in self.fixed.items():
            if not 1 <= i <= m:
                raise ValueError(f"fixed level {i} outside 1..{m}")
            if i in self.chains or v <= 0:
                raise ValueError(f"invalid fixed penalty for level {i}")
        if self.top is not None and m in self.fixed:
            raise ValueError("top penalty cannot be both a variable and fixed")

    @property
    def chain_levels(self) -> tuple[int, ...]:
        return tuple(sorted(self.chains))

    @property
    def chain_lengths(self) -> tuple[int, ...]:
        return tuple(self.relative_degree - i for i in self.chain_levels)

    @property
    def nu_names(self) -> tuple[str, ...]:
        return tuple(f"nu{i}" for i in self.chain_levels)

    def build_augmented(self, base: AffineControlSystem) -> AugmentedSystem:
        """Augment ``base`` with this spec's penalty chains."""
        return augment(base, self.chain_lengths, self.nu_names)

    def initial_chain_state(self) -> np.ndarray:
        """Initial values of all chain states, heads at ``initial`` and the
        higher derivatives at zero."""
        out: list[float] = []
        for i in self.chain_levels:
            out.append(self.chains[i].initial)
            out.extend([0.0] * (self.relative_degree - i - 1))
        return np.array(out)

    def fixed_penalty(self, level: int) -> float:
        return float(self.fixed.get(level, 1.0))


@dataclass(frozen=True)
class ClfSpec:
    """Exponentially stabilizing CLF, relaxed by a named slack variable."""

    V: Callable[[Sequence[Scalar]], Scalar]
    rate: float
    relax_weight: float = 1.0
    slack_name: str = "delta"
    label: str = "clf"

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("CLF rate must be positive")
        if self.relax_weight <= 0:
            raise ValueError("relaxation weight must be positive")


# ---------------------------------------------------------------------------
# cascade evaluation
# ---------------------------------------------------------------------------


def _cascade_fns(spec, sys) -> list[Callable[[Sequence[Scalar]], Scalar]]:
    """Build the psi_0 .. psi_{m-1} evaluators for ``spec`` over ``sys``."""
    m = spec.relative_degree
    if isinstance(spec, AdaCbfSpec):
        if isinstance(sys, AugmentedSystem):
            if sys.chains != spec.chain_lengths:
                raise DimensionError(
                    "augmented system chains do not match the adaptive spec"
                )
            base_n = sys.base.n
            chain_slices = sys.chain_slices
        else:
            if spec.chains:
                raise DimensionError("adaptive spec with chains needs an augmented system")
            base_n = sys.n
            chain_slices = ()
        slices = dict(zip(spec.chain_levels, chain_slices))

        def penalty(level: int) -> Callable[[Sequence[Scalar]], Scalar]:
            if level in slices:
                sl = slices[level]
                return lambda z: z[sl][0]
            value = spec.fixed_penalty(level)
            return lambda z: value

        psi0 = lambda z: spec.barrier(z[:base_n])
    else:
        penalties = spec.penalties

        def penalty(level: int) -> Callable[[Sequence[Scalar]], Scalar]:
            value = penalties[level - 1]
            return lambda z: value

        psi0 = spec.barrier

    drift = sys.drift
    fns = [psi0]
    for i in range(1, m):
        prev = fns[-1]
        p_i = penalty(i)
        alpha_i = spec.alphas[i - 1]

        def psi_i(z, prev=prev, p_i=p_i, alpha_i=alpha_i):
            return directional_derivative(prev, z, drift(z)) + p_i(z) * alpha_i(prev(z))

        fns.append(psi_i)
    return fns


def psi_cascade(spec, sys, z) -> list[float]:
    """Evaluate ``psi_0 .. psi_{m-1}`` at state ``z``.

    ``sys`` is the system the spec is paired with (augmented for adaptive
    specs with chains).  Raises ``NonFiniteError`` on non-finite values.
    """
    z = list(np.asarray(z, dtype=float))
    values = [fn(z) for fn in _cascade_fns(spec, sys)]
    for v in values:
        numerics._require_finite(v, "psi cascade")
    return [float(v) for v in values]


def _input_columns(sys, z, grad) -> list[float]:
    """Coefficients ``grad . g_col`` for each input column of ``sys`` at z."""
    G = sys.input_matrix(z)
    q = sys.q
    cols = []
    for j in range(q):
        cols.append(float(dot(grad, [G[r][j] for r in range(len(grad))])))
    return cols


# ---------------------------------------------------------------------------
# row builders
# ---------------------------------------------------------------------------


def hocbf_row(spec: HocbfSpec, sys, z, label: str = "hocbf") -> ConstraintRow:
    """Linear-in-input condition enforcing the final cascade level >= 0.

    For relative degree 1 with a linear class-K this is the textbook CBF row
    ``L_f b + L_g b u + p alpha(b) >= 0``.
    """
    z = list(np.asarray(z, dtype=float))
    fns = _cascade_fns(spec, sys)
    grad = gradient(fns[-1], z)
    f = sys.drift(z)
    coeff_u = _input_columns(sys, z, grad)
    if max((abs(c) for c in coeff_u), default=0.0) <= 1e-12:
        raise RelativeDegreeError(
            f"{label}: input coefficient is zero at this state although the "
            f"claimed relative degree is {spec.relative_degree}"
        )
    psi_last = float(fns[-1](z))
    const = float(dot(grad, f)) + spec.penalties[-1] * float(
        spec.alphas[-1](psi_last)
    )
    names = sys.input_names
    return ConstraintRow(dict(zip(names, coeff_u)), const, ">=", label)


def adacbf_row(
    spec: AdaCbfSpec,
    aug: AugmentedSystem,
    z,
    pm_name: str = "pm",
    label: str = "adacbf",
) -> ConstraintRow:
    """Adaptive-CBF condition, linear in ``(u, nu_i ..., p_m)``.

    The gradient of the last cascade level over the augmented state makes the
    auxiliary-input coefficients carry their chain Lie-derivative factors
    automatically; the top penalty appears with coefficient
    ``alpha_m(psi_{m-1})`` when it is a decision variable.
    """
    z = list(np.asarray(z, dtype=float))
    fns = _cascade_fns(spec, aug)
    grad = gradient(fns[-1], z)
    f = aug.drift(z)
    coeffs_in = _input_columns(aug, z, grad)
    base_q = aug.base.q
    if max(abs(c) for c in coeffs_in[:base_q]) <= 1e-12:
        raise RelativeDegreeError(
            f"{label}: control coefficient is zero at this state although the "
            f"claimed relative degree is {spec.relative_degree}"
        )
    psi_last = float(fns[-1](z))
    alpha_m = spec.alphas[-1]
    coeffs = dict(zip(aug.input_names, coeffs_in))
    const = float(dot(grad, f))
    if spec.top is not None:
        coeffs[pm_name] = float(alpha_m(psi_last))
    else:
        const += spec.fixed_penalty(spec.relative_degree) * float(alpha_m(psi_last))
    return ConstraintRow(coeffs, const, ">=", label)


def _integrator_chain(length: int, input_name: str) -> AffineControlSystem:
    def drift(p):
        return list(p[1:]) + [p[0] * 0.0]

    def g(p):
        return [[0.0]] * (length - 1) + [[1.0]]

    return AffineControlSystem(length, 1, drift, g, (input_name,))


def penalty_hocbf_rows(spec: AdaCbfSpec, aug: AugmentedSystem, z) -> list[ConstraintRow]:
    """One HOCBF row per penalty chain keeping its head ``p_i >= 0``.

    For a length-1 chain with a linear class-K the row is ``nu_i + p_i >= 0``.
    """
    z = np.asarray(z, dtype=float)
    rows = []
    for idx, level in enumerate(spec.chain_levels):
        cfg = spec.chains[level]
        length = spec.relative_degree - level
        alphas = cfg.aux_alphas or tuple(linear() for _ in range(length))
        if len(alphas) != length:
            raise DimensionError(
                f"level {level} needs {length} auxiliary class-K functions"
            )
        name = f"nu{level}"
        chain_sys = _integrator_chain(length, name)
        chain_spec = HocbfSpec(lambda p: p[0], length, tuple(alphas))
        chain_state = z[aug.chain_slices[idx]]
        rows.append(hocbf_row(chain_spec, chain_sys, chain_state, f"p{level}_hocbf"))
    return rows


def penalty_clf_rows(spec: AdaCbfSpec, aug: AugmentedSystem, z) -> list[ConstraintRow]:
    """Relaxed CLF rows stabilizing each penalty toward its target.

    Length-1 chains use ``V = (p_i - p_i*)^2`` directly; longer chains
    stabilize the chain tail to the desired state feedback
    ``-k_1 (p_i - p_i*) - k_2 p_{i,2} - ...`` with relative degree one.
    """
    z = np.asarray(z, dtype=float)
    rows = []
    for idx, level in enumerate(spec.chain_levels):
        cfg = spec.chains[level]
        length = spec.relative_degree - level
        target = cfg.target
        if length == 1:
            V = lambda p, target=target: (p[0] - target) ** 2
        else:
            gains = cfg.gains or (1.0,) * (length - 1)
            if len(gains) != length - 1:
                raise DimensionError(
                    f"level {level} needs {length - 1} feedback gains"
                )

            def V(p, target=target, gains=gains, length=length):
                desired = -gains[0] * (p[0] - target)
                for j in range(1, length - 1):
                    desired = desired - gains[j] * p[j]
                return (p[length - 1] - desired) ** 2

        name = f"nu{level}"
        chain_sys = _integrator_chain(length, name)
        chain_state = list(z[aug.chain_slices[idx]])
        grad = gradient(V, chain_state)
        lf = float(dot(grad, chain_sys.drift(chain_state)))
        lg = _input_columns(chain_sys, chain_state, grad)[0]
        const = lf + cfg.clf_rate * float(V(chain_state))
        rows.append(
            ConstraintRow(
                {name: lg, f"delta{level}": -1.0}, const, "<=", f"p{level}_clf"
            )
        )
    return rows


def clf_row(spec: ClfSpec, sys, x) -> ConstraintRow:
    """Relaxed CLF decrease condition ``L_f V + L_g V u + rate V <= delta``."""
    x = list(np.asarray(x, dtype=float))
    grad = gradient(spec.V, x)
    coeff_u = _input_columns(sys, x, grad)
    const = float(dot(grad, sys.drift(x))) + spec.rate * float(spec.V(x))
    coeffs = dict(zip(sys.input_names, coeff_u))
    coeffs[spec.slack_name] = -1.0
    return ConstraintRow(coeffs, const, "<=", spec.label)


# ---------------------------------------------------------------------------
# relative-degree validation
# ---------------------------------------------------------------------------


def lie_input_coefficients(
    b: Callable[[Sequence[Scalar]], Scalar], sys, x, orders: int
) -> list[list[float]]:
    """``L_g L_f^k b(x)`` per input column, for ``k = 0 .. orders - 1``."""
    x = list(np.asarray(x, dtype=float))
    fn = b
    out = []
    for _ in range(orders):
        grad = gradient(fn, x)
        out.append(_input_columns(sys, x, grad))
        fn = (lambda inner: lambda z: directional_derivative(inner, z, sys.drift(z)))(fn)
    return out


def validate_relative_degree(
    b: Callable[[Sequence[Scalar]], Scalar], sys, x, m: int, tol: float = 1e-9
) -> None:
    """Check ``L_g L_f^k b = 0`` for ``k < m - 1`` and nonzero at ``m - 1``
    at the single state ``x``; raises ``RelativeDegreeError`` otherwise."""
    coeffs = lie_input_coefficients(b, sys, x, m)
    for k, row in enumerate(coeffs[:-1]):
        if max(abs(c) for c in row) > tol:
            raise RelativeDegreeError(
                f"input appears after {k + 1} differentiations, but relative "
                f"degree {m} was claimed"
            )
    if max(abs(c) for c in coeffs[-1]) <= tol:
        raise RelativeDegreeError(
            f"input coefficient still zero after {m} differentiations"
        )
