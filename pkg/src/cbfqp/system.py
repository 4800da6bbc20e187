"""Affine control systems, time-varying input bounds, dynamics noise, and
penalty-chain augmentation.

A system is ``xdot = f(x) + g(x) u``.  Augmentation appends one pure
integrator chain per adaptive penalty function; the chain tail is driven by a
dedicated auxiliary input, so the stacked input is ``w = (u, nu_1, ...)``.
Drift and input-matrix evaluators must be dual-safe (see ``numerics``) because
the barrier builders differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .numerics import DimensionError, Scalar, as_vector


@dataclass(frozen=True)
class AffineControlSystem:
    """Control-affine dynamics with explicit state/input dimensions.

    ``drift`` maps a state sequence to a length-``n`` sequence; ``input_matrix``
    maps a state sequence to an ``n x q`` nested sequence (rows over states).
    Both must be deterministic and accept dual-valued entries.
    """

    n: int
    q: int
    drift: Callable[[Sequence[Scalar]], Sequence[Scalar]]
    input_matrix: Callable[[Sequence[Scalar]], Sequence[Sequence[Scalar]]]
    input_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n < 0 or self.q < 0:
            raise DimensionError("state and input dimensions must be nonnegative")
        if not self.input_names:
            object.__setattr__(self, "input_names", tuple(f"u{j}" for j in range(self.q)))
        if len(self.input_names) != self.q:
            raise DimensionError("input_names must have one entry per input")


def evaluate_rhs(sys: AffineControlSystem, x, u) -> np.ndarray:
    """Return ``f(x) + g(x) u`` as a float vector."""
    x = as_vector(x, sys.n, "state")
    u = as_vector(u, sys.q, "input")
    f = as_vector(sys.drift(list(x)), sys.n, "drift(x)")
    g = np.asarray(sys.input_matrix(list(x)), dtype=float)
    if g.shape != (sys.n, sys.q):
        raise DimensionError(f"input matrix must be {sys.n}x{sys.q}, got {g.shape}")
    return f + g @ u


@dataclass(frozen=True)
class InputBounds:
    """Componentwise time-varying box ``lower(t) <= u <= upper(t)``."""

    lower: Callable[[float], Sequence[float]]
    upper: Callable[[float], Sequence[float]]

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        lo = as_vector(self.lower(t), name="lower bound")
        hi = as_vector(self.upper(t), len(lo), "upper bound")
        if np.any(lo > hi):
            raise ValueError(f"lower bound exceeds upper bound at t={t}")
        return lo, hi

    @staticmethod
    def constant(lower, upper) -> "InputBounds":
        lo = as_vector(lower)
        hi = as_vector(upper, len(lo))
        return InputBounds(lambda t: lo, lambda t: hi)


@dataclass(frozen=True)
class NoiseModel:
    """Uniform per-channel disturbance held constant over each hold interval.

    ``amplitude[k]`` is the half-width of the uniform interval added to state
    channel ``k``'s time derivative.  Sampling is a pure function of
    ``(seed, t)``: the draw for interval ``floor(t / hold)`` comes from a
    generator seeded by ``(seed, interval index)``, so identical seeds give
    identical sequences in any evaluation order.
    """

    amplitude: np.ndarray
    seed: int = 0
    hold: float = 0.1

    def __post_init__(self):
        amp = as_vector(self.amplitude, name="amplitude")
        if np.any(amp < 0):
            raise ValueError("noise amplitudes must be nonnegative")
        if self.hold <= 0:
            raise ValueError("hold interval must be positive")
        object.__setattr__(self, "amplitude", amp)

    @property
    def dim(self) -> int:
        return len(self.amplitude)


def sample_noise(model: NoiseModel, t: float) -> np.ndarray:
    """Disturbance vector in effect at time ``t >= 0``."""
    if t < 0:
        raise ValueError("noise is defined for t >= 0")
    if not np.any(model.amplitude):
        return np.zeros(model.dim)
    k = int(np.floor(t / model.hold + 1e-9))
    rng = np.random.default_rng([model.seed, k])
    return rng.uniform(-model.amplitude, model.amplitude)


@dataclass(frozen=True)
class AugmentedSystem:
    """Base system stacked with pure integrator chains for penalty functions.

    The augmented state is ``z = (x, chain_1, ..., chain_k)`` and the input is
    ``w = (u, nu_1, ..., nu_k)``.  Chain ``i`` of length ``L`` obeys
    ``pdot_1 = p_2, ..., pdot_L = nu_i``; its head ``p_1`` is the penalty
    value, with relative degree ``L`` for the chain input.
    """

    base: AffineControlSystem
    chains: tuple[int, ...]
    chain_names: tuple[str, ...] = ()
    chain_slices: tuple[slice, ...] = field(init=False)

    def __post_init__(self):
        if any(c < 1 for c in self.chains):
            raise DimensionError("chain lengths must be >= 1")
        if not self.chain_names:
            object.__setattr__(
                self, "chain_names", tuple(f"nu{i + 1}" for i in range(len(self.chains)))
            )
        if len(self.chain_names) != len(self.chains):
            raise DimensionError("chain_names must have one entry per chain")
        slices = []
        off = self.base.n
        for c in self.chains:
            slices.append(slice(off, off + c))
            off += c
        object.__setattr__(self, "chain_slices", tuple(slices))

    @property
    def n(self) -> int:
        return self.base.n + sum(self.chains)

    @property
    def q(self) -> int:
        return self.base.q + len(self.chains)

    @property
    def input_names(self) -> tuple[str, ...]:
        return self.base.input_names + self.chain_names

    def drift(self, z: Sequence[Scalar]) -> list[Scalar]:
        if len(z) != self.n:
            raise DimensionError(f"augmented state must have length {self.n}")
        out = list(self.base.drift(list(z[: self.base.n])))
        for sl in self.chain_slices:
            chain = z[sl]
            out.extend(chain[1:])
            out.append(chain[0] * 0.0)  # tail derivative comes from nu
        return out

    def input_matrix(self, z: Sequence[Scalar]) -> list[list[Scalar]]:
        if len(z) != self.n:
            raise DimensionError(f"augmented state must have length {self.n}")
        base_g = self.base.input_matrix(list(z[: self.base.n]))
        rows: list[list[Scalar]] = []
        for r in range(self.base.n):
            rows.append(list(base_g[r]) + [0.0] * len(self.chains))
        for i, c in enumerate(self.chains):
            for j in range(c):
                row: list[Scalar] = [0.0] * self.q
                if j == c - 1:
                    row[self.base.q + i] = 1.0
                rows.append(row)
        return rows

    @cached_property
    def flattened(self) -> AffineControlSystem:
        """View of the augmented dynamics as a plain affine system."""
        return AffineControlSystem(
            n=self.n,
            q=self.q,
            drift=self.drift,
            input_matrix=self.input_matrix,
            input_names=self.input_names,
        )

    def rhs(self, z, w, noise: np.ndarray | None = None) -> np.ndarray:
        out = evaluate_rhs(self.flattened, z, w)
        if noise is not None:
            out = out + as_vector(noise, self.n, "noise")
        return out


def augment(
    sys: AffineControlSystem,
    chain_lengths: Sequence[int],
    chain_names: Sequence[str] = (),
) -> AugmentedSystem:
    """Append one integrator chain per entry of ``chain_lengths``."""
    return AugmentedSystem(
        base=sys, chains=tuple(chain_lengths), chain_names=tuple(chain_names)
    )
