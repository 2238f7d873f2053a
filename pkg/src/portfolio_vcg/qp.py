"""Concave quadratic maximization over a scaled simplex.

This is the single numerical kernel behind allocation and every pricing
subproblem:

    maximize   c'w - q * (w'Qw + b'w)
    subject to sum(w) = M,  w >= 0,
               w_i = 0 for pinned coordinates,
               w_i <= u_i where per-coordinate caps are given.

The solver is accelerated projected gradient with adaptive restart, using
the exact sort-based Euclidean projection onto the simplex, plus an
active-face polish step: once the iterate settles on a face, the
equality-constrained KKT system on that face is solved exactly, which
drives the residual to machine precision in one linear solve.  The
objective is concave (Q PSD, q >= 0), so any KKT point is a global
maximizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

SYM_TOL = 1e-10   # absolute symmetry tolerance for Q
PSD_TOL = 1e-8    # PSD slack, relative to the largest diagonal entry


class QpValidationError(ValueError):
    """Problem data violates the kernel's contract (dims, PSD, signs)."""


class InfeasibleProblemError(ValueError):
    """The constraint set is empty; the message names the cause."""


class SolverConvergenceError(RuntimeError):
    """Iteration budget exhausted above the KKT tolerance."""


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and limits for ``solve``.

    kkt_tol is relative: a point is accepted once the KKT residual (see
    ``check_kkt``) drops below kkt_tol, where the stationarity part of the
    residual is already scaled by the problem's gradient magnitude.
    lex_eps sizes the lexicographic perturbation that breaks ties
    deterministically toward lower indices; it is keyed to the original
    coordinate index, so the pinned subproblems of one market all share
    the same tie-break.
    """

    kkt_tol: float = 1e-9
    max_iterations: int = 100_000
    lex_eps: float = 1e-12
    degenerate_tol: float = 1e-9
    polish_period: int = 20


DEFAULT_CONFIG = SolverConfig()


def _readonly(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class QpProblem:
    """Data for one simplex-constrained concave QP.

    Objective: c'w - q * (w'Qw + b'w) with c = ``linear``, Q = ``quadratic``,
    b = ``affine_linear`` (zero when omitted).  ``mass`` is the required
    coordinate sum: 1 for fractional portfolios, the pool size for
    call-count problems.
    """

    linear: np.ndarray
    quadratic: np.ndarray
    risk: float = 0.0
    mass: float = 1.0
    zero_set: frozenset = frozenset()
    caps: Optional[np.ndarray] = None
    affine_linear: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "linear", _readonly(self.linear))
        object.__setattr__(self, "quadratic", _readonly(self.quadratic))
        object.__setattr__(self, "zero_set", frozenset(self.zero_set))
        if self.caps is not None:
            object.__setattr__(self, "caps", _readonly(self.caps))
        if self.affine_linear is not None:
            object.__setattr__(self, "affine_linear", _readonly(self.affine_linear))

    @property
    def dimension(self) -> int:
        return self.linear.shape[0]


@dataclass(frozen=True)
class QpSolution:
    """A feasible point together with its optimality certificate."""

    weights: np.ndarray
    objective_value: float
    kkt_residual: float
    iterations: int
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weights", _readonly(self.weights))


@dataclass(frozen=True)
class KktReport:
    """Feasibility and optimality diagnostics for a candidate point.

    ``stationarity`` is the projected-gradient mapping norm, which is zero
    exactly at KKT points and needs no active-set classification.
    ``multiplier`` and ``dual_violation`` report the estimated equality
    multiplier and the worst complementarity breach at active bounds (these
    are informational).  ``residual`` is the maximum of the feasibility
    errors and the gradient-scaled stationarity; the candidate is an
    approximate KKT point iff ``residual <= tolerance``.
    """

    mass_error: float
    negativity: float
    pin_error: float
    cap_excess: float
    stationarity: float
    dual_violation: float
    multiplier: float
    residual: float
    tolerance: float
    passed: bool


def objective_value(problem: QpProblem, w) -> float:
    """Evaluate c'w - q * (w'Qw + b'w)."""
    w = np.asarray(w, dtype=float)
    val = float(problem.linear @ w) - problem.risk * float(w @ problem.quadratic @ w)
    if problem.affine_linear is not None:
        val -= problem.risk * float(problem.affine_linear @ w)
    return val


def gradient(problem: QpProblem, w) -> np.ndarray:
    """Gradient of the (maximization) objective at w."""
    w = np.asarray(w, dtype=float)
    g = problem.linear - 2.0 * problem.risk * (problem.quadratic @ w)
    if problem.affine_linear is not None:
        g = g - problem.risk * problem.affine_linear
    return g


def max_eigenvalue(matrix: np.ndarray) -> float:
    sym = 0.5 * (matrix + matrix.T)
    return float(np.linalg.eigvalsh(sym)[-1])


def min_eigenvalue(matrix: np.ndarray) -> float:
    sym = 0.5 * (matrix + matrix.T)
    return float(np.linalg.eigvalsh(sym)[0])


def psd_slack(matrix: np.ndarray) -> float:
    """Allowed negative-eigenvalue slack, relative to the largest diagonal."""
    diag_peak = float(np.max(np.diagonal(matrix), initial=0.0))
    return PSD_TOL * max(diag_peak, 0.0)


def project_to_simplex(point, mass: float = 1.0) -> np.ndarray:
    """Exact Euclidean projection onto {w >= 0, sum(w) = mass}.

    Sort-based: find the largest set of coordinates whose uniformly shifted
    values stay positive.  Already-feasible input is returned unchanged.
    """
    if mass <= 0:
        raise ValueError(f"projection mass must be positive, got {mass}")
    v = np.asarray(point, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("point must be a nonempty vector")
    if np.all(v >= 0.0) and float(v.sum()) == mass:
        return v.copy()
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    counts = np.arange(1, v.size + 1, dtype=float)
    rho = int(np.nonzero(u + (mass - css) / counts > 0.0)[0][-1])
    tau = (css[rho] - mass) / (rho + 1.0)
    return np.maximum(v - tau, 0.0)


def _project_capped(v: np.ndarray, mass: float, caps: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {0 <= w <= caps, sum(w) = mass}.

    w_i(tau) = clip(v_i - tau, 0, u_i) makes the total a piecewise-linear
    nonincreasing function of tau; scan its breakpoints for the segment
    where the total crosses ``mass`` and interpolate exactly.
    """
    breaks = np.unique(np.concatenate([v, v - caps]))
    totals = np.clip(v[None, :] - breaks[:, None], 0.0, caps[None, :]).sum(axis=1)
    idx = int(np.searchsorted(-totals, -mass, side="left"))
    if idx == 0:
        tau = breaks[0]
    else:
        idx = min(idx, breaks.size - 1)
        s_lo, s_hi = totals[idx - 1], totals[idx]
        if s_lo == s_hi:
            tau = breaks[idx - 1]
        else:
            tau = breaks[idx - 1] + (s_lo - mass) * (breaks[idx] - breaks[idx - 1]) / (s_lo - s_hi)
    w = np.clip(v - tau, 0.0, caps)
    # one correction step on the active segment guards against roundoff
    slope = float(np.count_nonzero((w > 0.0) & (w < caps)))
    gap = float(w.sum()) - mass
    if slope > 0.0 and gap != 0.0:
        w = np.clip(v - (tau + gap / slope), 0.0, caps)
    return w


def _validate_problem(problem: QpProblem) -> None:
    c, Q = problem.linear, problem.quadratic
    n = c.shape[0]
    if c.ndim != 1 or n == 0:
        raise QpValidationError("linear term must be a nonempty vector")
    if Q.shape != (n, n):
        raise QpValidationError(
            f"quadratic term shape {Q.shape} does not match dimension {n}"
        )
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(Q))):
        raise QpValidationError("problem data must be finite")
    if problem.risk < 0 or not np.isfinite(problem.risk):
        raise QpValidationError(f"risk weight must be >= 0, got {problem.risk}")
    if problem.mass <= 0 or not np.isfinite(problem.mass):
        raise QpValidationError(f"mass must be positive, got {problem.mass}")
    if np.max(np.abs(Q - Q.T), initial=0.0) > SYM_TOL:
        raise QpValidationError("quadratic term must be symmetric")
    lo = min_eigenvalue(Q)
    if lo < -psd_slack(Q):
        raise QpValidationError(
            f"quadratic term is not positive semidefinite "
            f"(min eigenvalue {lo:.3e})"
        )
    if any(i < 0 or i >= n for i in problem.zero_set):
        raise QpValidationError("zero_set index out of range")
    if problem.caps is not None:
        u = problem.caps
        if u.shape != (n,):
            raise QpValidationError("caps must match the problem dimension")
        if np.any(u < 0) or not np.all(np.isfinite(u)):
            raise QpValidationError("caps must be finite and nonnegative")
    if problem.affine_linear is not None and problem.affine_linear.shape != (n,):
        raise QpValidationError("affine_linear must match the problem dimension")


def _gradient_scale(problem: QpProblem) -> float:
    q, Q, c = problem.risk, problem.quadratic, problem.linear
    scale = float(np.max(np.abs(c), initial=0.0))
    scale += 2.0 * q * float(np.max(np.abs(Q), initial=0.0)) * problem.mass
    if problem.affine_linear is not None:
        scale += q * float(np.max(np.abs(problem.affine_linear), initial=0.0))
    return max(1.0, scale)


def _free_mask(problem: QpProblem) -> np.ndarray:
    mask = np.ones(problem.dimension, dtype=bool)
    for i in problem.zero_set:
        mask[i] = False
    return mask


def _mapping_residual(problem: QpProblem, w: np.ndarray, eta: float) -> float:
    """Norm of w - P(w + eta * grad), divided by eta; zero iff KKT."""
    trial = w + eta * gradient(problem, w)
    mask = _free_mask(problem)
    if problem.caps is not None:
        proj = _project_capped(trial[mask], problem.mass, problem.caps[mask])
    else:
        proj = project_to_simplex(trial[mask], problem.mass)
    mapped = np.zeros(problem.dimension)
    mapped[mask] = proj
    return float(np.max(np.abs(w - mapped))) / eta


def _kkt_eta(problem: QpProblem) -> float:
    lip = 2.0 * problem.risk * max(max_eigenvalue(problem.quadratic), 0.0)
    return 1.0 / max(lip, 1.0)


def _kkt_terms(problem: QpProblem, w: np.ndarray, tol: float) -> KktReport:
    n = problem.dimension
    g = gradient(problem, w)
    scale = _gradient_scale(problem)

    mass_error = abs(float(w.sum()) - problem.mass)
    negativity = max(0.0, -float(np.min(w, initial=0.0)))
    pins = sorted(problem.zero_set)
    pin_error = float(np.max(np.abs(w[pins]), initial=0.0)) if pins else 0.0
    if problem.caps is not None:
        cap_excess = max(0.0, float(np.max(w - problem.caps, initial=0.0)))
    else:
        cap_excess = 0.0

    stationarity = _mapping_residual(problem, w, _kkt_eta(problem))

    # multiplier diagnostics; informational, residual relies on the mapping
    act_tol = 1e-8 * problem.mass / max(n, 1)
    mask = _free_mask(problem)
    at_cap = np.zeros(n, dtype=bool)
    if problem.caps is not None:
        at_cap = mask & (w >= problem.caps - act_tol)
    interior = mask & (w > act_tol) & ~at_cap
    if np.any(interior):
        lam = float(np.mean(g[interior]))
    elif np.any(at_cap):
        lam = float(np.min(g[at_cap]))
    else:
        lam = float(np.max(g[mask], initial=0.0))
    dual = 0.0
    at_zero = mask & (w <= act_tol)
    if np.any(at_zero):
        dual = max(dual, float(np.max(g[at_zero] - lam, initial=0.0)))
    if np.any(at_cap):
        dual = max(dual, float(np.max(lam - g[at_cap], initial=0.0)))

    residual = max(mass_error, negativity, pin_error, cap_excess,
                   stationarity / scale)
    return KktReport(
        mass_error=mass_error,
        negativity=negativity,
        pin_error=pin_error,
        cap_excess=cap_excess,
        stationarity=stationarity,
        dual_violation=dual,
        multiplier=lam,
        residual=residual,
        tolerance=tol,
        passed=residual <= tol,
    )


def check_kkt(problem: QpProblem, candidate,
              tol: float = DEFAULT_CONFIG.kkt_tol) -> KktReport:
    """Report feasibility violations and optimality residuals at a point.

    ``report.passed`` is True exactly when the candidate is an approximate
    KKT point at tolerance ``tol`` (hence, by concavity, an approximate
    global maximizer).
    """
    _validate_problem(problem)
    w = np.asarray(candidate, dtype=float)
    if w.shape != (problem.dimension,):
        raise QpValidationError(
            f"candidate shape {w.shape} does not match dimension "
            f"{problem.dimension}"
        )
    return _kkt_terms(problem, w, tol)


def _lex_perturbation(n: int, scale: float, eps: float) -> np.ndarray:
    # strictly decreasing in the original index: lower index wins exact ties
    return eps * scale * (np.arange(n, 0, -1, dtype=float) / n)


def _greedy_linear(l: np.ndarray, mass: float,
                   caps: Optional[np.ndarray]) -> np.ndarray:
    """Exact maximizer of l'w over the (capped) simplex: fill best first."""
    w = np.zeros_like(l)
    if caps is None:
        w[int(np.argmax(l))] = mass
        return w
    remaining = mass
    for i in np.argsort(-l, kind="stable"):
        take = min(float(caps[i]), remaining)
        w[i] = take
        remaining -= take
        if remaining <= 0.0:
            break
    return w


def _face_polish(H: np.ndarray, l: np.ndarray, mass: float,
                 caps: Optional[np.ndarray], support: np.ndarray,
                 at_cap: np.ndarray) -> Optional[np.ndarray]:
    """Solve the KKT system exactly on a candidate face.

    H is the reduced 2qQ matrix and l the effective linear term.  Cap-active
    coordinates are fixed at their caps; the bordered equality system is
    solved on the remaining support.  Coordinates that come out negative are
    dropped (and over-cap ones clamped) for at most 2n passes.  Global
    optimality is NOT checked here; the caller verifies the result.
    """
    n = l.shape[0]
    sup = support.copy()
    cap_set = at_cap.copy()
    for _ in range(2 * n + 2):
        free_idx = np.flatnonzero(sup & ~cap_set)
        cap_idx = np.flatnonzero(sup & cap_set)
        fixed_mass = float(caps[cap_idx].sum()) if cap_idx.size else 0.0
        k = free_idx.size
        if k == 0:
            if abs(fixed_mass - mass) > 1e-9 * max(mass, 1.0):
                return None
            w = np.zeros(n)
            if cap_idx.size:
                w[cap_idx] = caps[cap_idx]
            return w
        A = np.zeros((k + 1, k + 1))
        A[:k, :k] = H[np.ix_(free_idx, free_idx)]
        A[:k, k] = 1.0
        A[k, :k] = 1.0
        rhs = np.empty(k + 1)
        rhs[:k] = l[free_idx]
        if cap_idx.size:
            rhs[:k] -= H[np.ix_(free_idx, cap_idx)] @ caps[cap_idx]
        rhs[k] = mass - fixed_mass
        try:
            sol = np.linalg.solve(A, rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError("non-finite solution")
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
            if not np.all(np.isfinite(sol)):
                return None
        w_free = sol[:k]
        neg_tol = 1e-11 * max(mass, 1.0)
        if float(np.min(w_free, initial=0.0)) < -neg_tol:
            sup[free_idx[int(np.argmin(w_free))]] = False
            continue
        if caps is not None:
            over = w_free - caps[free_idx]
            if float(np.max(over, initial=0.0)) > neg_tol:
                cap_set[free_idx[int(np.argmax(over))]] = True
                continue
        w = np.zeros(n)
        w[free_idx] = np.maximum(w_free, 0.0)
        if cap_idx.size:
            w[cap_idx] = caps[cap_idx]
        return w
    return None


def _detect_degenerate(problem: QpProblem, w: np.ndarray,
                       config: SolverConfig) -> bool:
    """True when the maximizer is non-unique within tolerance.

    The optimal set is a face of the feasible polytope; the maximizer is
    unique iff the quadratic form has positive curvature on that face's
    sum-zero directions.  The face contains every non-pinned coordinate
    that carries weight or whose bound multiplier vanishes.
    """
    g = gradient(problem, w)
    scale = _gradient_scale(problem)
    tol = config.degenerate_tol * scale
    n = problem.dimension
    act_tol = 1e-8 * problem.mass / max(n, 1)

    mask = _free_mask(problem)
    carrying = mask & (w > act_tol)
    if not np.any(carrying):
        return False
    lam = float(np.mean(g[carrying]))
    in_face = mask & (carrying | (np.abs(g - lam) <= tol))
    if problem.caps is not None:
        at_cap = w >= problem.caps - act_tol
        in_face &= ~(at_cap & (g - lam > tol))
    idx = np.flatnonzero(in_face)
    if idx.size < 2:
        return False
    if problem.risk == 0.0:
        return True
    H = 2.0 * problem.risk * problem.quadratic[np.ix_(idx, idx)]
    ones = np.ones((idx.size, 1))
    basis = np.linalg.qr(ones, mode="complete")[0][:, 1:]
    reduced = basis.T @ H @ basis
    lo = float(np.linalg.eigvalsh(0.5 * (reduced + reduced.T))[0])
    return lo <= config.degenerate_tol * max(1.0, float(np.max(np.abs(H), initial=0.0)))


def solve(problem: QpProblem, config: SolverConfig = DEFAULT_CONFIG,
          warm_start: Optional[np.ndarray] = None) -> QpSolution:
    """Maximize the concave objective over the constrained simplex.

    Deterministic for fixed input; exact ties in the linear term are broken
    toward the lower index.  Raises InfeasibleProblemError when pins or
    caps empty the feasible set, QpValidationError for malformed data, and
    SolverConvergenceError if the iteration budget is exhausted above the
    KKT tolerance (not observed for PSD inputs).
    """
    _validate_problem(problem)
    n = problem.dimension
    mass = problem.mass
    free = _free_mask(problem)
    n_free = int(free.sum())
    if n_free == 0:
        raise InfeasibleProblemError(
            "zero_set pins every coordinate; the mass constraint cannot be met"
        )
    caps_free = problem.caps[free] if problem.caps is not None else None
    if caps_free is not None and float(caps_free.sum()) < mass * (1.0 - 1e-12):
        raise InfeasibleProblemError(
            f"caps over free coordinates sum to {float(caps_free.sum()):.6g}, "
            f"below the required mass {mass:.6g}"
        )

    q = problem.risk
    c_scale = max(1.0, float(np.max(np.abs(problem.linear), initial=0.0)))
    l_full = problem.linear + _lex_perturbation(n, c_scale, config.lex_eps)
    if problem.affine_linear is not None:
        l_full = l_full - q * problem.affine_linear
    l = l_full[free]
    Q = problem.quadratic[np.ix_(free, free)]
    quad_active = q > 0.0 and float(np.max(np.abs(Q), initial=0.0)) > 0.0

    def embed(w_red: np.ndarray) -> np.ndarray:
        w = np.zeros(n)
        w[free] = w_red
        return w

    if n_free == 1:
        if caps_free is not None and float(caps_free[0]) < mass * (1.0 - 1e-12):
            raise InfeasibleProblemError(
                "the single free coordinate's cap is below the required mass"
            )
        w_red, iterations = np.array([mass]), 0
    elif not quad_active:
        w_red, iterations = _greedy_linear(l, mass, caps_free), 0
    else:
        eta = _kkt_eta(problem)

        def accepts(w_red: np.ndarray) -> bool:
            return _mapping_residual(problem, embed(w_red), eta) / \
                _gradient_scale(problem) <= config.kkt_tol

        w_red, iterations = _fista(
            l, Q, q, mass, caps_free, config, accepts,
            warm_start[free] if warm_start is not None else None,
        )

    w = embed(w_red)
    report = _kkt_terms(problem, w, config.kkt_tol)
    if not report.passed:
        raise SolverConvergenceError(
            f"KKT residual {report.residual:.3e} above tolerance "
            f"{config.kkt_tol:.1e} after {iterations} iterations"
        )
    return QpSolution(
        weights=w,
        objective_value=objective_value(problem, w),
        kkt_residual=report.residual,
        iterations=iterations,
        degenerate=_detect_degenerate(problem, w, config),
    )


def _fista(l: np.ndarray, Q: np.ndarray, q: float, mass: float,
           caps: Optional[np.ndarray], config: SolverConfig,
           accepts: Callable[[np.ndarray], bool],
           warm: Optional[np.ndarray]) -> tuple[np.ndarray, int]:
    """Accelerated projected gradient with restart and face polish.

    ``accepts`` is the caller's authoritative KKT test on the full problem;
    it is consulted at every polish attempt so that the accepted point and
    the reported residual agree.
    """
    n = l.shape[0]
    H = 2.0 * q * Q
    lip = max(float(np.linalg.eigvalsh(0.5 * (H + H.T))[-1]), 1e-30)
    step = 1.0 / lip

    def proj(v):
        if caps is not None:
            return _project_capped(v, mass, caps)
        return project_to_simplex(v, mass)

    def grad_min(v):  # gradient of the minimization form q w'Qw - l'w
        return H @ v - l

    if warm is not None and warm.shape == (n,):
        w = proj(np.maximum(warm, 0.0))
    else:
        w = proj(np.full(n, mass / n))
    if accepts(w):
        return w, 0
    y = w.copy()
    t = 1.0
    support_tol = 1e-12 * max(mass, 1.0)

    def try_polish(point: np.ndarray) -> Optional[np.ndarray]:
        support = point > support_tol
        if not np.any(support):
            return None
        at_cap = np.zeros(n, dtype=bool)
        if caps is not None:
            at_cap = support & (point >= caps - 1e-10 * max(mass, 1.0))
        polished = _face_polish(H, l, mass, caps, support, at_cap)
        if polished is not None and accepts(polished):
            return polished
        return None

    for k in range(1, config.max_iterations + 1):
        g = grad_min(y)
        w_next = proj(y - step * g)
        if float((y - w_next) @ (w_next - w)) > 0.0:
            # adaptive restart: the accelerated step stopped descending
            t = 1.0
            y = w.copy()
            w_next = proj(y - step * grad_min(y))
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w_next + ((t - 1.0) / t_next) * (w_next - w)
        w, t = w_next, t_next

        if k % config.polish_period == 0 or k == config.max_iterations:
            polished = try_polish(w)
            if polished is not None:
                return polished, k
            if accepts(w):
                return w, k
    return w, config.max_iterations
