"""Closed-loop simulation: per-step constraint assembly, QP solve, zero-order
hold, fixed-step integration, and full trajectory logging.

Each control interval solves ``min 0.5 w'Hw + F'w`` over the decision vector
``w`` (physical inputs, auxiliary penalty inputs, relaxation slacks, top-level
penalty) subject to the provided constraint rows plus the time-varying input
bounds, applies the physical-input block for the whole interval, and
integrates the (optionally noisy) dynamics with classical RK4 substeps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import qp
from .barrier import ConstraintRow, stack_rows
from .system import (
    AugmentedSystem,
    InputBounds,
    NoiseModel,
    evaluate_rhs,
    sample_noise,
)

POLICY_HALT = "halt"
POLICY_HOLD = "hold-last-control"
POLICY_CLAMP = "clamp-to-bounds"
POLICIES = (POLICY_HALT, POLICY_HOLD, POLICY_CLAMP)


class InitialConditionError(ValueError):
    """The initial state violates the barrier cascade conditions."""


class IntegrationError(ArithmeticError):
    """The integrator produced a non-finite state."""


@dataclass
class StepRecord:
    """Everything observed at one control step (state before applying u)."""

    t: float
    state: np.ndarray
    psis: tuple[float, ...]
    decision: dict[str, float]
    feasible: bool
    status: str
    solve_ms: float
    u_lower: np.ndarray
    u_upper: np.ndarray

    def __post_init__(self):
        if self.feasible and self.status != qp.STATUS_OPTIMAL:
            raise ValueError("feasible steps must have optimal solver status")


@dataclass
class Trajectory:
    """Ordered step records plus the state reached after the last one."""

    records: list[StepRecord]
    final_state: np.ndarray
    dt: float
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, key: str) -> np.ndarray:
        return np.array([r.decision.get(key, 0.0) for r in self.records])

    def psi_column(self, level: int) -> np.ndarray:
        return np.array([r.psis[level] for r in self.records])

    @property
    def summary(self) -> dict:
        return summarize(self)


def _rhs_function(sys_like):
    if isinstance(sys_like, AugmentedSystem):
        return sys_like.rhs

    def rhs(z, w, noise=None):
        out = evaluate_rhs(sys_like, z, w)
        if noise is not None:
            out = out + np.asarray(noise, dtype=float)
        return out

    return rhs


def integrate_step(
    sys_like,
    z,
    w,
    noise: np.ndarray | None,
    dt: float,
    substeps: int = 10,
) -> np.ndarray:
    """Advance ``dt`` with classical RK4, inputs and noise held constant."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    rhs = _rhs_function(sys_like)
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    h = dt / substeps
    for _ in range(substeps):
        k1 = rhs(z, w, noise)
        k2 = rhs(z + 0.5 * h * k1, w, noise)
        k3 = rhs(z + 0.5 * h * k2, w, noise)
        k4 = rhs(z + h * k3, w, noise)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(z)):
        raise IntegrationError("state became non-finite during integration")
    return z


def _bound_rows(names: Sequence[str], lo: np.ndarray, hi: np.ndarray) -> list[ConstraintRow]:
    rows = []
    for name, l, h in zip(names, lo, hi):
        rows.append(ConstraintRow({name: 1.0}, -h, "<=", f"{name}_max"))
        rows.append(ConstraintRow({name: -1.0}, l, "<=", f"{name}_min"))
    return rows


def run(
    sys_like,
    rows: Callable[[np.ndarray, float], Sequence[ConstraintRow]],
    cost: Callable[[np.ndarray, float], tuple[np.ndarray, np.ndarray]],
    bounds: InputBounds | None,
    *,
    variables: Sequence[str],
    input_vars: Sequence[str],
    z0,
    T: float,
    dt: float,
    noise: NoiseModel | None = None,
    policy: str = POLICY_HOLD,
    substeps: int = 10,
    psi: Callable[[np.ndarray], Sequence[float]] | None = None,
    qp_tol: float = 1e-8,
    on_step: Callable[[StepRecord, qp.QpSolution | None, Sequence[ConstraintRow]], None]
    | None = None,
    metadata: Mapping | None = None,
) -> Trajectory:
    """Simulate the closed loop over ``[0, T)`` with control interval ``dt``.

    ``variables`` orders the QP decision vector; ``input_vars`` names the
    entries that drive the dynamics, in the system's input order.  Bound rows
    for the first ``len(lower)`` physical inputs are stacked after the
    provided rows each step.  ``psi`` (when given) is logged per step and its
    initial values must be nonnegative.
    """
    if dt <= 0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    if policy not in POLICIES:
        raise ValueError(f"unknown infeasible-step policy {policy!r}")
    variables = list(variables)
    input_vars = list(input_vars)
    missing = [v for v in input_vars if v not in variables]
    if missing:
        raise ValueError(f"input variables {missing} not in decision vector")
    input_idx = [variables.index(v) for v in input_vars]

    z = np.asarray(z0, dtype=float).copy()
    if psi is not None:
        initial = np.asarray(psi(z), dtype=float)
        if np.any(initial < -1e-9):
            raise InitialConditionError(
                f"cascade values must be nonnegative at t=0, got {initial}"
            )

    n_steps = int(round(T / dt))
    records: list[StepRecord] = []
    prev_w: np.ndarray | None = None
    applied = np.zeros(len(input_vars))
    halted = False

    for k in range(n_steps):
        t = k * dt
        step_rows = list(rows(z, t))
        if bounds is not None:
            lo, hi = bounds.at(t)
            step_rows.extend(_bound_rows(input_vars[: len(lo)], lo, hi))
        else:
            lo = np.full(len(input_vars), -np.inf)
            hi = np.full(len(input_vars), np.inf)

        H, F = cost(z, t)
        A, ub = stack_rows(step_rows, variables)
        problem = qp.QpProblem(H, F, A, ub)
        t_solve = time.perf_counter()
        solution = qp.solve(problem, tol=qp_tol, w0=prev_w)
        solve_ms = (time.perf_counter() - t_solve) * 1e3

        feasible = solution.status == qp.STATUS_OPTIMAL
        if feasible:
            prev_w = solution.w
            decision = {name: float(v) for name, v in zip(variables, solution.w)}
            applied = solution.w[input_idx].copy()
        else:
            if policy == POLICY_CLAMP:
                n_bounded = len(lo)
                applied = applied.copy()
                applied[:n_bounded] = np.clip(applied[:n_bounded], lo, hi)
            # POLICY_HOLD and POLICY_HALT leave the last inputs untouched
            decision = {name: 0.0 for name in variables}
            for name, v in zip(input_vars, applied):
                decision[name] = float(v)

        psis = tuple(float(v) for v in psi(z)) if psi is not None else ()
        record = StepRecord(
            t=t,
            state=z.copy(),
            psis=psis,
            decision=decision,
            feasible=feasible,
            status=solution.status,
            solve_ms=solve_ms,
            u_lower=np.asarray(lo, dtype=float).copy(),
            u_upper=np.asarray(hi, dtype=float).copy(),
        )
        records.append(record)
        if on_step is not None:
            on_step(record, solution, step_rows)

        if not feasible and policy == POLICY_HALT:
            halted = True
            break

        noise_vec = sample_noise(noise, t) if noise is not None else None
        z = integrate_step(sys_like, z, applied, noise_vec, dt, substeps)

    meta = dict(metadata or {})
    meta["halted"] = halted
    return Trajectory(records=records, final_state=z, dt=dt, metadata=meta)


def summarize(traj: Trajectory) -> dict:
    """Headline numbers of a run: safety margins, feasibility, solver cost."""
    if not traj.records:
        raise ValueError("cannot summarize an empty trajectory")
    records = traj.records
    out: dict = {"n_steps": len(records), "halted": bool(traj.metadata.get("halted"))}
    if records[0].psis:
        b_vals = traj.psi_column(0)
        i_min = int(np.argmin(b_vals))
        out["min_b"] = float(b_vals[i_min])
        out["argmin_b_t"] = float(records[i_min].t)
        if len(records[0].psis) > 1:
            psi1 = traj.psi_column(1)
            j_min = int(np.argmin(psi1))
            out["min_psi1"] = float(psi1[j_min])
            out["argmin_psi1_t"] = float(records[j_min].t)
    infeasible = [r for r in records if not r.feasible]
    out["infeasible_steps"] = len(infeasible)
    out["first_infeasible_t"] = float(infeasible[0].t) if infeasible else None
    solve_ms = np.array([r.solve_ms for r in records])
    out["mean_solve_ms"] = float(solve_ms.mean())
    out["max_solve_ms"] = float(solve_ms.max())
    return out
