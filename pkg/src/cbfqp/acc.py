"""Adaptive cruise control benchmark: longitudinal dynamics with resistance
force, speed/control limitations, a desired-speed CLF, and a relative-degree-2
safe-distance constraint enforced either by a fixed-penalty HOCBF or by the
adaptive variant with a time-varying ``p_1`` chain and decision-variable
``p_2``.

Also provides the simplified double-integrator variant of the same problem
(pure ``min u^2`` plus safety and input bounds) used as a desk-scale instance,
and the named scenario library exposed through the CLI.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import barrier, sim
from .barrier import (
    AdaCbfSpec,
    ClfSpec,
    ConstraintRow,
    HocbfSpec,
    PenaltyChain,
    TopPenalty,
    linear,
    quadratic,
)
from .numerics import Scalar, sign
from .system import AffineControlSystem, AugmentedSystem, InputBounds, NoiseModel

MODE_ADACBF = "adacbf"
MODE_HOCBF = "hocbf-baseline"
MODES = (MODE_ADACBF, MODE_HOCBF)

# gravity and noise base amplitudes used throughout the benchmark
GRAVITY = 9.81
NOISE_BASE_AMPS = (2.0, 0.45)  # on the position and speed derivative channels


@dataclass(frozen=True)
class CdSchedule:
    """Deceleration-coefficient schedule for the lower control bound.

    ``constant`` holds ``value``.  ``ramp-after-activation`` holds ``start``
    until the safety row first becomes active at a QP optimum, then moves
    linearly to ``end`` over ``duration`` seconds and stays there.
    """

    kind: str = "constant"
    value: float = 0.4
    start: float = 0.37
    end: float = 0.2
    duration: float = 5.0

    def __post_init__(self):
        if self.kind not in ("constant", "ramp-after-activation"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        vals = (self.value,) if self.kind == "constant" else (self.start, self.end)
        if any(not 0.0 < v <= 1.0 for v in vals):
            raise ValueError("deceleration coefficients must lie in (0, 1]")
        if self.kind != "constant" and self.duration <= 0:
            raise ValueError("ramp duration must be positive")

    def at(self, t: float, activation_time: float | None) -> float:
        if self.kind == "constant":
            return self.value
        if activation_time is None:
            return self.start
        frac = min(max((t - activation_time) / self.duration, 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


@dataclass(frozen=True)
class AccParams:
    """Benchmark parameters; defaults follow the published simulation setup.

    ``ca`` (the acceleration coefficient) is listed as "TBD" there; 0.4 is a
    choice that never binds in the studied scenarios.  The e^12 penalty
    weights are read as 1e12: with exp(12) ~ 1.6e5 the optimizer finds
    inflating ``p_1`` cheaper than braking and the safe-distance set is not
    rendered invariant, while 1e12 reproduces the reported behavior at every
    braking coefficient.
    """

    v_init: float = 20.0
    gap_init: float = 100.0
    lead_speed: float = 13.89
    v_desired: float = 24.0
    mass: float = 1650.0
    gravity: float = GRAVITY
    f0: float = 0.1
    f1: float = 5.0
    f2: float = 0.25
    delta0: float = 10.0
    v_max: float = 30.0
    v_min: float = 0.0
    dt: float = 0.1
    epsilon: float = 10.0
    cd: CdSchedule = field(default_factory=CdSchedule)
    ca: float = 0.4
    p_acc: float = 1.0
    nu1_weight: float = 2.0  # W_1, linear cost on nu_1
    delta1_weight: float = 1e12  # P_1
    p2_weight: float = 1e12  # Q
    p1_initial: float = 0.1
    p1_target: float = 0.1
    p2_target: float = 1.0
    p2_frozen: float | None = None  # pin p_2, removing it from the decisions
    T: float = 30.0

    def __post_init__(self):
        if min(self.mass, self.gravity, self.f0, self.f1, self.f2, self.delta0) <= 0:
            raise ValueError("masses and force coefficients must be positive")
        if self.v_min >= self.v_max:
            raise ValueError("need v_min < v_max")
        if self.dt <= 0 or self.T < self.dt:
            raise ValueError("need dt > 0 and T >= dt")


def resistance(v: Scalar, f0: float = 0.1, f1: float = 5.0, f2: float = 0.25) -> Scalar:
    """Resistance force: coulomb friction (sign convention 0 at rest),
    viscous friction, and aerodynamic drag."""
    return f0 * sign(v) + f1 * v + f2 * v * v


def _acc_base_system(p: AccParams) -> AffineControlSystem:
    # state (x, v, x_p); the lead vehicle holds its speed, so x_p is a state
    # with constant drift and the safe-distance function has relative degree 2
    def drift(x):
        return [x[1], -resistance(x[1], p.f0, p.f1, p.f2) / p.mass, p.lead_speed + 0.0 * x[0]]

    def gmat(x):
        return [[0.0], [1.0 / p.mass], [0.0]]

    return AffineControlSystem(3, 1, drift, gmat, ("u0",))


@dataclass
class AccProblem:
    """Everything a closed-loop run needs, plus the activation latch that
    drives ramp schedules.  Build one per run; the latch is mutable."""

    system: AffineControlSystem | AugmentedSystem
    variables: list[str]
    input_vars: list[str]
    rows: Callable[[np.ndarray, float], list[ConstraintRow]]
    cost: Callable[[np.ndarray, float], tuple[np.ndarray, np.ndarray]]
    bounds: InputBounds | None
    z0: np.ndarray
    psi: Callable[[np.ndarray], Sequence[float]]
    params: AccParams | None
    mode: str
    safety_label: str = "safety"
    activation_time: float | None = None
    # Threshold on the safety-row multiplier that defines "active".  The
    # auxiliary input's linear cost can ride the row with a multiplier of
    # order W_1 / alpha_1(b) (~1e-4 at the initial gap) long before the row
    # shapes the control; genuine activation shows multipliers of order 1e4
    # because the row then prices against the speed-tracking slack.
    activation_tol: float = 1.0
    p1_frozen: float | None = None  # baseline-mode constant p_1
    p2_value: float | None = None  # frozen p_2 when not a decision variable

    def on_step(self, record, solution, step_rows) -> None:
        """Latch the first time the safety row is active at the optimum."""
        if self.activation_time is not None or solution is None:
            return
        if solution.status != "optimal":
            return
        for idx, row in enumerate(step_rows):
            if row.label == self.safety_label:
                if solution.multipliers[idx] > self.activation_tol:
                    self.activation_time = record.t
                return

    def simulate(
        self,
        *,
        noise: NoiseModel | None = None,
        policy: str = sim.POLICY_HOLD,
        substeps: int = 10,
        T: float | None = None,
        dt: float | None = None,
        metadata: dict | None = None,
    ) -> sim.Trajectory:
        p = self.params
        return sim.run(
            self.system,
            self.rows,
            self.cost,
            self.bounds,
            variables=self.variables,
            input_vars=self.input_vars,
            z0=self.z0,
            T=T if T is not None else (p.T if p else 30.0),
            dt=dt if dt is not None else (p.dt if p else 0.1),
            noise=noise,
            policy=policy,
            substeps=substeps,
            psi=self.psi,
            on_step=self.on_step,
            metadata=metadata,
        )

    def trace_row(self, record: sim.StepRecord) -> dict:
        """Flatten a step record into the documented trace-CSV columns."""
        z = record.state
        d = record.decision
        if len(z) > 3:
            p1 = float(z[3])
        else:
            p1 = float(self.p1_frozen if self.p1_frozen is not None else 0.0)
        if "pm" in d:
            p2 = d["pm"]
        else:
            p2 = float(self.p2_value if self.p2_value is not None else 0.0)
        mg = (self.params.mass * self.params.gravity) if self.params else 1.0
        return {
            "t": record.t,
            "x": float(z[0]),
            "v": float(z[1]),
            "x_p": float(z[2]),
            "b": record.psis[0],
            "psi1": record.psis[1],
            "u": d.get("u0", 0.0),
            "nu1": d.get("nu1", 0.0),
            "p1": p1,
            "p2": p2,
            "delta_acc": d.get("delta_acc", 0.0),
            "delta1": d.get("delta1", 0.0),
            "cd": -float(record.u_lower[0]) / mg,
            "feasible": int(record.feasible),
            "solver_status": record.status,
            "solve_ms": record.solve_ms,
        }


def build_acc_problem(params: AccParams, mode: str = MODE_ADACBF) -> AccProblem:
    """Assemble the benchmark for one run.

    The adaptive mode's per-step decision vector is
    ``(u, delta_acc, nu1, delta1, p2)`` with cost Hessian
    ``diag(2/M^2, 2 p_acc, 0, 2 P_1, 2 Q)`` and linear term
    ``(-2 F_r(v)/M^2, 0, W_1, 0, -2 Q p_2*)``; the baseline freezes both
    penalties and keeps only ``(u, delta_acc)``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    p = params
    base = _acc_base_system(p)
    b = lambda x: x[2] - x[0] - p.delta0
    barrier.validate_relative_degree(b, base, [0.0, p.v_init, p.gap_init], 2)

    speed_clf = ClfSpec(
        V=lambda z: (z[1] - p.v_desired) ** 2,
        rate=p.epsilon,
        relax_weight=p.p_acc,
        slack_name="delta_acc",
        label="speed_clf",
    )
    vmax_spec = HocbfSpec(lambda z: p.v_max - z[1], 1, (linear(),))
    vmin_spec = HocbfSpec(lambda z: z[1] - p.v_min, 1, (linear(),))
    alphas = (quadratic(), linear())

    problem = AccProblem(
        system=base,
        variables=[],
        input_vars=["u0"],
        rows=lambda z, t: [],
        cost=lambda z, t: (np.zeros((0, 0)), np.zeros(0)),
        bounds=None,
        z0=np.zeros(3),
        psi=lambda z: (),
        params=p,
        mode=mode,
    )

    mg = p.mass * p.gravity
    problem.bounds = InputBounds(
        lower=lambda t: [-p.cd.at(t, problem.activation_time) * mg],
        upper=lambda t: [p.ca * mg],
    )

    if mode == MODE_HOCBF:
        spec = HocbfSpec(b, 2, alphas, penalties=(p.p1_initial, p.p2_target))
        problem.p1_frozen = p.p1_initial
        problem.p2_value = p.p2_target
        problem.system = base
        problem.variables = ["u0", "delta_acc"]
        problem.z0 = np.array([0.0, p.v_init, p.gap_init])
        problem.psi = lambda z: barrier.psi_cascade(spec, base, z)

        def rows(z, t):
            return [
                barrier.clf_row(speed_clf, base, z),
                barrier.hocbf_row(vmax_spec, base, z, "limit_vmax"),
                barrier.hocbf_row(vmin_spec, base, z, "limit_vmin"),
                barrier.hocbf_row(spec, base, z, "safety"),
            ]

        def cost(z, t):
            v = z[1]
            H = np.diag([2.0 / p.mass**2, 2.0 * p.p_acc])
            F = np.array([-2.0 * resistance(v, p.f0, p.f1, p.f2) / p.mass**2, 0.0])
            return H, F

        problem.rows = rows
        problem.cost = cost
        return problem

    chain = PenaltyChain(
        initial=p.p1_initial,
        target=p.p1_target,
        clf_rate=p.epsilon,
        input_weight=p.nu1_weight,
        slack_weight=p.delta1_weight,
    )
    if p.p2_frozen is None:
        top = TopPenalty(initial=1.0, target=p.p2_target, weight=p.p2_weight)
        spec = AdaCbfSpec(b, 2, alphas, chains={1: chain}, top=top)
        problem.variables = ["u0", "delta_acc", "nu1", "delta1", "pm"]
    else:
        spec = AdaCbfSpec(b, 2, alphas, chains={1: chain}, fixed={2: p.p2_frozen})
        problem.variables = ["u0", "delta_acc", "nu1", "delta1"]
        problem.p2_value = p.p2_frozen
    aug = spec.build_augmented(base)
    problem.system = aug
    problem.input_vars = ["u0", "nu1"]
    problem.z0 = np.array([0.0, p.v_init, p.gap_init, p.p1_initial])
    problem.psi = lambda z: barrier.psi_cascade(spec, aug, z)

    def rows(z, t):
        out = [
            barrier.clf_row(speed_clf, aug, z),
            barrier.hocbf_row(vmax_spec, aug, z, "limit_vmax"),
            barrier.hocbf_row(vmin_spec, aug, z, "limit_vmin"),
            barrier.adacbf_row(spec, aug, z, label="safety"),
        ]
        out.extend(barrier.penalty_hocbf_rows(spec, aug, z))
        out.extend(barrier.penalty_clf_rows(spec, aug, z))
        if spec.top is not None:
            out.append(ConstraintRow({"pm": 1.0}, 0.0, ">=", "pm_nonneg"))
        return out

    if p.p2_frozen is None:

        def cost(z, t):
            v = z[1]
            H = np.diag(
                [2.0 / p.mass**2, 2.0 * p.p_acc, 0.0, 2.0 * p.delta1_weight, 2.0 * p.p2_weight]
            )
            F = np.array(
                [
                    -2.0 * resistance(v, p.f0, p.f1, p.f2) / p.mass**2,
                    0.0,
                    p.nu1_weight,
                    0.0,
                    -2.0 * p.p2_weight * p.p2_target,
                ]
            )
            return H, F

    else:

        def cost(z, t):
            v = z[1]
            H = np.diag([2.0 / p.mass**2, 2.0 * p.p_acc, 0.0, 2.0 * p.delta1_weight])
            F = np.array(
                [
                    -2.0 * resistance(v, p.f0, p.f1, p.f2) / p.mass**2,
                    0.0,
                    p.nu1_weight,
                    0.0,
                ]
            )
            return H, F

    problem.rows = rows
    problem.cost = cost
    return problem


# ---------------------------------------------------------------------------
# simplified (double-integrator) instance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaccParams:
    """Desk-scale double-integrator cruise problem: min integral of u^2
    subject to the safe-distance constraint and input bounds."""

    v_init: float = 20.0
    gap_init: float = 100.0
    lead_speed: float = 13.89
    delta0: float = 10.0
    u_min: float = -5.0
    u_max: float = 5.0
    epsilon: float = 10.0
    nu1_weight: float = 2.0
    delta1_weight: float = 1e12
    p1_initial: float = 0.1
    p1_target: float = 0.1
    T: float = 30.0
    dt: float = 0.1


def build_sacc_problem(params: SaccParams, mode: str = MODE_ADACBF) -> AccProblem:
    """Double-integrator variant with identity class-K functions; the
    adaptive mode penalizes only the first level (``p_2`` implicitly 1)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    p = params

    def drift(x):
        return [x[1], 0.0 * x[1], p.lead_speed + 0.0 * x[0]]

    def gmat(x):
        return [[0.0], [1.0], [0.0]]

    base = AffineControlSystem(3, 1, drift, gmat, ("u0",))
    b = lambda x: x[2] - x[0] - p.delta0
    alphas = (linear(), linear())

    problem = AccProblem(
        system=base,
        variables=[],
        input_vars=["u0"],
        rows=lambda z, t: [],
        cost=lambda z, t: (np.zeros((0, 0)), np.zeros(0)),
        bounds=InputBounds.constant([p.u_min], [p.u_max]),
        z0=np.zeros(3),
        psi=lambda z: (),
        params=None,
        mode=mode,
    )

    if mode == MODE_HOCBF:
        spec = HocbfSpec(b, 2, alphas)
        problem.p1_frozen = 1.0
        problem.p2_value = 1.0
        problem.variables = ["u0"]
        problem.z0 = np.array([0.0, p.v_init, p.gap_init])
        problem.psi = lambda z: barrier.psi_cascade(spec, base, z)
        problem.rows = lambda z, t: [barrier.hocbf_row(spec, base, z, "safety")]
        problem.cost = lambda z, t: (np.array([[2.0]]), np.zeros(1))
        return problem

    chain = PenaltyChain(
        initial=p.p1_initial,
        target=p.p1_target,
        clf_rate=p.epsilon,
        input_weight=p.nu1_weight,
        slack_weight=p.delta1_weight,
    )
    spec = AdaCbfSpec(b, 2, alphas, chains={1: chain}, fixed={2: 1.0})
    aug = spec.build_augmented(base)
    problem.system = aug
    problem.p2_value = 1.0
    problem.variables = ["u0", "nu1", "delta1"]
    problem.input_vars = ["u0", "nu1"]
    problem.z0 = np.array([0.0, p.v_init, p.gap_init, p.p1_initial])
    problem.psi = lambda z: barrier.psi_cascade(spec, aug, z)

    def rows(z, t):
        out = [barrier.adacbf_row(spec, aug, z, label="safety")]
        out.extend(barrier.penalty_hocbf_rows(spec, aug, z))
        out.extend(barrier.penalty_clf_rows(spec, aug, z))
        return out

    def cost(z, t):
        H = np.diag([2.0, 0.0, 2.0 * p.delta1_weight])
        F = np.array([0.0, p.nu1_weight, 0.0])
        return H, F

    problem.rows = rows
    problem.cost = cost
    return problem


# ---------------------------------------------------------------------------
# scenario library
# ---------------------------------------------------------------------------

DEFAULT_RAMP_DURATION = 5.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully resolved description of one benchmark run (CLI contract)."""

    scenario: str = "cd-040"
    mode: str = MODE_ADACBF
    cd: float | None = 0.4
    cd_ramp: tuple[float, float, float] | None = None  # (start, end, duration)
    noise_scale: float = 0.0
    noise_amps: tuple[float, float] = NOISE_BASE_AMPS
    seeds: tuple[int, ...] = (0,)
    p1_0: float | None = None  # defaults to p1_star
    p1_star: float = 0.1
    p2_star: float = 1.0
    p2_frozen: float | None = None
    T: float = 30.0
    dt: float = 0.1
    substeps: int = 10
    infeasible_policy: str = sim.POLICY_HOLD
    epsilon: float = 10.0
    ca: float = 0.4
    p_acc: float = 1.0
    nu1_weight: float = 2.0
    delta1_weight: float = 1e12
    p2_weight: float = 1e12

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.infeasible_policy not in sim.POLICIES:
            raise ValueError(f"infeasible policy must be one of {sim.POLICIES}")
        if self.cd is None and self.cd_ramp is None:
            raise ValueError("one of cd or cd_ramp must be set")
        if self.noise_scale < 0:
            raise ValueError("noise scale must be nonnegative")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def cd_schedule(self) -> CdSchedule:
        if self.cd_ramp is not None:
            start, end, duration = self.cd_ramp
            return CdSchedule("ramp-after-activation", start=start, end=end, duration=duration)
        return CdSchedule("constant", value=self.cd)

    def acc_params(self) -> AccParams:
        return AccParams(
            dt=self.dt,
            T=self.T,
            epsilon=self.epsilon,
            cd=self.cd_schedule(),
            ca=self.ca,
            p_acc=self.p_acc,
            nu1_weight=self.nu1_weight,
            delta1_weight=self.delta1_weight,
            p2_weight=self.p2_weight,
            p1_initial=self.p1_0 if self.p1_0 is not None else self.p1_star,
            p1_target=self.p1_star,
            p2_target=self.p2_star,
            p2_frozen=self.p2_frozen,
        )

    def noise_model(self, seed: int, n_states: int) -> NoiseModel | None:
        amps = self.noise_scale * np.asarray(self.noise_amps)
        if not np.any(amps):
            return None
        full = np.zeros(n_states)
        full[: len(amps)] = amps
        return NoiseModel(amplitude=full, seed=seed, hold=self.dt)

    def replace(self, **kwargs) -> "ScenarioConfig":
        return dataclasses.replace(self, **kwargs)


_SCENARIOS: dict[str, dict] = {
    "cd-040": {"cd": 0.4},
    "cd-023": {"cd": 0.23},
    "cd-ramp-037-020": {"cd": None, "cd_ramp": (0.37, 0.2, DEFAULT_RAMP_DURATION)},
    "p1star-002-cd-0155": {"cd": 0.155, "p1_star": 0.02},
    "p2-frozen": {"cd": 0.23, "p2_frozen": 1.0},
    "noise-0x": {"cd": 0.23, "noise_scale": 0.0},
    "noise-1x": {"cd": 0.23, "noise_scale": 1.0},
    "noise-2x": {"cd": 0.23, "noise_scale": 2.0},
}

SCENARIO_DESCRIPTIONS = {
    "cd-040": "constant deceleration coefficient 0.4 (loose bound)",
    "cd-023": "constant deceleration coefficient 0.23 (near the braking limit)",
    "cd-ramp-037-020": "bound ramps 0.37 -> 0.2 after the safety row activates",
    "p1star-002-cd-0155": "penalty target 0.02 with coefficient 0.155",
    "p2-frozen": "p2 pinned to 1 instead of being a decision variable",
    "noise-0x": "cd 0.23, no dynamics noise",
    "noise-1x": "cd 0.23, noise amplitudes (2 m/s, 0.45 m/s^2)",
    "noise-2x": "cd 0.23, noise amplitudes doubled",
}


def scenario_names() -> list[str]:
    return sorted(_SCENARIOS)


def scenario(name: str, **overrides) -> ScenarioConfig:
    """Look up a named scenario and apply overrides."""
    if name not in _SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; known: {scenario_names()}")
    base = ScenarioConfig(scenario=name, **_SCENARIOS[name])
    return base.replace(**overrides) if overrides else base


def run_scenario(config: ScenarioConfig, seed: int | None = None) -> tuple[AccProblem, sim.Trajectory]:
    """Build a fresh problem for ``config`` and simulate one seed."""
    seed = config.seeds[0] if seed is None else seed
    problem = build_acc_problem(config.acc_params(), config.mode)
    noise = config.noise_model(seed, len(problem.z0))
    traj = problem.simulate(
        noise=noise,
        policy=config.infeasible_policy,
        substeps=config.substeps,
        metadata={"scenario": config.scenario, "mode": config.mode, "seed": seed},
    )
    return problem, traj
