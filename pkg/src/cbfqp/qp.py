"""Dense convex quadratic programming: min 0.5 w'Hw + F'w  s.t.  A w <= b.

The per-step safety-filter programs are small (a handful of variables, about
ten rows) but the cost Hessian can be singular: auxiliary penalty inputs enter
the cost linearly.  The solver therefore Tikhonov-regularizes H and runs a
primal active-set method; those inputs are bounded below by their penalty
rows, so the regularized problem is well posed and its optimum is within
``reg * ||w*||^2`` of the original in objective.

Feasibility is established first by a min-max-violation linear program; when
the minimal violation exceeds the tolerance the LP duals provide a Farkas-type
infeasibility certificate ``y >= 0`` with ``A'y = 0`` and ``b'y < 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .numerics import DimensionError

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class QpProblem:
    """Dense convex QP data; ``H`` must be symmetric positive semidefinite."""

    H: np.ndarray
    F: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        F = np.asarray(self.F, dtype=float).ravel()
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).ravel()
        d = F.shape[0]
        if H.shape != (d, d):
            raise DimensionError(f"H must be {d}x{d}, got {H.shape}")
        if A.size == 0:
            A = A.reshape(0, d)
        if A.ndim != 2 or A.shape[1] != d:
            raise DimensionError(f"A must have {d} columns, got shape {A.shape}")
        if b.shape[0] != A.shape[0]:
            raise DimensionError("b must have one entry per row of A")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(F))
                and np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ValueError("QP data must be finite")
        scale = max(1.0, float(np.abs(H).max(initial=0.0)))
        if np.abs(H - H.T).max(initial=0.0) > 1e-12 * scale:
            raise ValueError("H must be symmetric")
        for field_name, value in (("H", H), ("F", F), ("A", A), ("b", b)):
            object.__setattr__(self, field_name, value)

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def objective(self, w: np.ndarray) -> float:
        return float(0.5 * w @ self.H @ w + self.F @ w)


@dataclass(frozen=True)
class QpSolution:
    w: np.ndarray
    objective: float
    multipliers: np.ndarray
    active_set: tuple[int, ...]
    status: str
    iterations: int = 0
    certificate: np.ndarray | None = None  # Farkas vector when infeasible
    max_violation: float = 0.0


def _check_psd(H: np.ndarray, floor: float = -1e-8) -> None:
    if H.size == 0:
        return
    scale = max(1.0, float(np.abs(H).max()))
    eigmin = float(np.linalg.eigvalsh(H).min())
    if eigmin < floor * scale:
        raise ValueError(f"H is not positive semidefinite (min eigenvalue {eigmin:g})")


def _phase1(A: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Minimize the worst constraint violation ``s`` over (w, s >= 0).

    Returns ``(w, s*, y)`` where ``y`` are the nonnegative duals of the
    inequality rows (a Farkas certificate direction whenever ``s* > 0``).
    """
    r, d = A.shape
    c = np.zeros(d + 1)
    c[-1] = 1.0
    A_ub = np.hstack([A, -np.ones((r, 1))])
    bounds = [(None, None)] * d + [(0, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if not res.success:
        raise RuntimeError(f"phase-1 feasibility LP failed: {res.message}")
    w = np.asarray(res.x[:d], dtype=float)
    s = float(res.x[-1])
    y = -np.asarray(res.ineqlin.marginals, dtype=float)
    y[y < 0] = 0.0
    return w, s, y


def _kkt_solve(Hreg, grad, A_work, resid):
    """Equality-constrained step: min 0.5 p'Hp + grad'p  s.t.  A_work p = resid.

    Null-space method via a complete QR of the working-set gradients; the
    bordered KKT system would square the conditioning at near-degenerate
    vertices, which these penalty-weighted programs hit routinely.  ``resid``
    restores working-set equality (b_W - A_W w) so numerical drift on active
    rows self-corrects instead of accumulating.
    """
    k = A_work.shape[0]
    d = Hreg.shape[0]
    if k == 0:
        step = np.linalg.solve(Hreg, -grad)
        return step, np.zeros(0)
    try:
        Q, R = np.linalg.qr(A_work.T, mode="complete")
        Rk = R[:k, :k]
        Y, Z = Q[:, :k], Q[:, k:]
        p_range = Y @ np.linalg.solve(Rk.T, resid)
        if Z.shape[1]:
            H_red = Z.T @ Hreg @ Z
            p_null = Z @ np.linalg.solve(H_red, -Z.T @ (grad + Hreg @ p_range))
            step = p_range + p_null
        else:
            step = p_range
        lam = np.linalg.solve(Rk, Y.T @ (-(grad + Hreg @ step)))
    except np.linalg.LinAlgError:
        kkt = np.zeros((d + k, d + k))
        kkt[:d, :d] = Hreg
        kkt[:d, d:] = A_work.T
        kkt[d:, :d] = A_work
        sol = np.linalg.lstsq(kkt, np.concatenate([-grad, resid]), rcond=None)[0]
        step, lam = sol[:d], sol[d:]
    return step, lam


def _scaling(p: QpProblem) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal equilibration: variable scales from the cost curvature (or
    constraint column norms for linear-cost variables), then unit row norms.

    The per-step programs mix curvatures from ~1e-6 (control effort over a
    squared vehicle mass) to ~1e12 (penalty-slack weights); without scaling
    the working-set KKT systems are numerically singular.
    """
    d = p.dim
    s = np.ones(d)
    hdiag = np.abs(np.diag(p.H))
    col = np.abs(p.A).max(axis=0, initial=0.0) if p.n_rows else np.zeros(d)
    for j in range(d):
        if hdiag[j] > 1e-300:
            s[j] = 1.0 / np.sqrt(hdiag[j])
        elif col[j] > 1e-300:
            s[j] = 1.0 / col[j]
    if p.n_rows:
        row = np.abs(p.A * s).max(axis=1, initial=0.0)
        r = np.where(row > 1e-300, row, 1.0)
    else:
        r = np.zeros(0)
    return s, r


def solve(
    p: QpProblem,
    tol: float = 1e-8,
    max_iter: int = 200,
    reg: float = 1e-9,
    w0: np.ndarray | None = None,
) -> QpSolution:
    """Solve the QP with a primal active-set method.

    The problem is diagonally equilibrated internally and the Hessian gets a
    Tikhonov term ``reg`` (in scaled coordinates) so that linear-cost
    variables are well posed; those must be bounded by some constraint row
    for the solution to be meaningful.  Optimal solutions satisfy the KKT
    conditions (see :func:`verify_kkt`); infeasible problems carry a Farkas
    certificate.  Deterministic: blocking constraints are added
    lowest-index-first on ties and the most negative multiplier is dropped.
    ``w0`` is an optional starting guess; it is used only when it is already
    feasible, in which case the phase-1 feasibility LP is skipped.
    """
    _check_psd(p.H)
    d, r = p.dim, p.n_rows
    s, rsc = _scaling(p)
    S = np.diag(s)
    H = S @ p.H @ S + reg * np.eye(d)
    F = s * p.F
    if r:
        A = (p.A * s) / rsc[:, None]
        b = p.b / rsc
    else:
        A = p.A
        b = p.b

    def finish(w_scaled, lam_scaled, work, status, iterations):
        w = s * w_scaled
        lam = np.zeros(r)
        if r:
            lam[:] = lam_scaled / rsc
            lam[lam < 0] = 0.0
        return QpSolution(
            w=w,
            objective=p.objective(w),
            multipliers=lam,
            active_set=tuple(sorted(work)),
            status=status,
            iterations=iterations,
        )

    if r == 0:
        w = np.linalg.solve(H, -F)
        return finish(w, np.zeros(0), (), STATUS_OPTIMAL, 0)

    w = None
    if w0 is not None:
        w0 = np.asarray(w0, dtype=float).ravel()
        if w0.shape == (d,) and np.all(np.isfinite(w0)):
            cand = w0 / s
            if (A @ cand - b).max(initial=0.0) <= tol:
                w = cand
    if w is None:
        w, violation, y = _phase1(A, b)
        if violation > tol:
            y = y / rsc
            total = float(y.sum())
            if total > 0:
                y = y / total
            return QpSolution(
                w=s * w,
                objective=float("nan"),
                multipliers=np.zeros(r),
                active_set=(),
                status=STATUS_INFEASIBLE,
                iterations=0,
                certificate=y,
                max_violation=violation,
            )

    work: list[int] = []
    lam_full = np.zeros(r)
    step_tol = tol * 1e-2
    prev_objective = np.inf
    stalled = 0
    for iteration in range(1, max_iter + 1):
        grad = H @ w + F
        A_work = A[work] if work else np.zeros((0, d))
        resid = (b[work] - A_work @ w) if work else np.zeros(0)
        step, lam_work = _kkt_solve(H, grad, A_work, resid)

        objective = float(0.5 * w @ H @ w + F @ w)
        if objective > prev_objective - 1e-13 * (1.0 + abs(prev_objective)):
            stalled += 1
        else:
            stalled = 0
        prev_objective = objective
        # Steps that only move in the regularized null directions can stay
        # noisy; after repeated non-improving iterations accept a looser
        # stationarity threshold instead of cycling to the iteration cap.
        # Convergence is judged per coordinate because solution entries can
        # legitimately span many orders of magnitude.
        rel = np.abs(step) / (1.0 + np.abs(w))
        step_size = rel.max(initial=0.0)
        converged = step_size <= step_tol or (stalled >= 4 and step_size <= 1e-4)

        if converged:
            lam_full[:] = 0.0
            lam_full[work] = lam_work
            if not work or lam_work.min() >= -tol:
                return finish(w, lam_full, work, STATUS_OPTIMAL, iteration)
            worst = int(np.argmin(lam_work))
            work.pop(worst)
            stalled = 0
            continue

        alpha = 1.0
        blocking = -1
        slack = b - A @ w
        advance = A @ step
        for i in range(r):
            if i in work or advance[i] <= 1e-13:
                continue
            ratio = max(slack[i], 0.0) / advance[i]
            if ratio < alpha - 1e-15:
                alpha = ratio
                blocking = i
        w = w + alpha * step
        if blocking >= 0:
            # Keep the working-set gradients linearly independent: if the
            # blocking row lies in their span, exchange it with the spanning
            # row it leans on hardest, otherwise the equality steps become
            # inconsistent and the iteration bounces without converging.
            if work:
                basis = A[work].T
                coef, *_ = np.linalg.lstsq(basis, A[blocking], rcond=None)
                defect = basis @ coef - A[blocking]
                if np.abs(defect).max(initial=0.0) <= 1e-9:
                    work.pop(int(np.argmax(np.abs(coef))))
            work.append(blocking)
            work.sort()

    return finish(w, lam_full, work, STATUS_MAX_ITERATIONS, max_iter)


def verify_kkt(p: QpProblem, s: QpSolution, tol: float = 1e-6) -> bool:
    """Check stationarity, primal and dual feasibility, and complementarity."""
    if s.status != STATUS_OPTIMAL:
        raise ValueError("verify_kkt expects an optimal solution")
    w, lam = s.w, s.multipliers
    stationarity = p.H @ w + p.F + (p.A.T @ lam if p.n_rows else 0.0)
    if np.abs(stationarity).max(initial=0.0) > tol:
        return False
    if p.n_rows == 0:
        return True
    residual = p.A @ w - p.b
    if residual.max(initial=0.0) > tol:
        return False
    if lam.min(initial=0.0) < -tol:
        return False
    if np.abs(lam * residual).max(initial=0.0) > tol:
        return False
    return True


def verify_infeasibility_certificate(
    p: QpProblem, y: np.ndarray, tol: float = 1e-7
) -> bool:
    """Farkas check: ``y >= 0``, ``A'y ~ 0`` and ``b'y < 0`` prove that
    ``A w <= b`` has no solution."""
    y = np.asarray(y, dtype=float)
    if y.shape != (p.n_rows,) or y.min(initial=0.0) < -tol:
        return False
    scale = max(1.0, float(np.abs(y).max(initial=0.0)))
    if np.abs(p.A.T @ y).max(initial=0.0) > tol * scale * max(
        1.0, float(np.abs(p.A).max(initial=0.0))
    ):
        return False
    return float(p.b @ y) < 0.0
