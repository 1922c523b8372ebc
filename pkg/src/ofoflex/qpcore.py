"""
Dense strictly convex QP solver for the per-step controller problem.

Solves::

    min_w   w^T G w + 2 g^T w
    s.t.    lb <= w <= ub
            lo <= A_ineq w <= hi
            A_eq w = b_eq

with ``G`` symmetric positive definite, by a primal active-set method.  A
feasible starting point comes from a phase-1 problem that minimises the
largest constraint violation; a phase-1 value above ``FEAS_TOL`` is the
infeasibility certificate.

Internally every constraint is expanded into one-sided rows ``a^T w <= b``
(equalities first, then box upper/lower, then inequality upper/lower).
Rows with an infinite bound are dropped.  ``active_set`` and
``multipliers`` refer to the expanded row list returned by
:meth:`QpProblem.standard_form`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEAS_TOL = 1e-9
# Phase-1 regulariser on (w, t); small enough that the fixed point sits at
# t = 0 whenever the problem is feasible.
_PHASE1_REG = 1e-8
_ZERO_STEP = 1e-12


class QpError(ValueError):
    """Malformed QP data."""


class QpCyclingError(RuntimeError):
    """Active-set iteration limit hit.  Distinct from infeasibility."""


@dataclass(frozen=True)
class RowInfo:
    kind: str  # "eq", "box", "ineq"
    index: int  # row of A_eq / coordinate of w / row of A_ineq
    side: str  # "eq", "upper", "lower"


@dataclass
class QpProblem:
    G: np.ndarray
    g: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    A_ineq: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.g.size
        self.G = np.zeros((0, 0)) if n == 0 else np.atleast_2d(np.asarray(self.G, dtype=float))
        if self.G.shape != (n, n):
            raise QpError(f"G must be {n}x{n}, got {self.G.shape}")
        if not np.all(np.isfinite(self.G)) or not np.all(np.isfinite(self.g)):
            raise QpError("G and g must be finite")
        if not np.allclose(self.G, self.G.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(self.G).max(initial=0.0))):
            raise QpError("G must be symmetric")
        if n and np.linalg.eigvalsh(0.5 * (self.G + self.G.T)).min() <= 1e-12:
            raise QpError("G must be positive definite (min eigenvalue > 1e-12)")

        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise QpError("box bounds must have length n")
        if np.any(np.isnan(self.lb)) or np.any(np.isnan(self.ub)) or np.any(self.lb > self.ub):
            raise QpError("box bounds need lb <= ub")

        if self.A_ineq is None:
            self.A_ineq = np.zeros((0, n))
        self.A_ineq = _rows(self.A_ineq, n)
        m = self.A_ineq.shape[0]
        self.lo = np.full(m, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).reshape(-1)
        self.hi = np.full(m, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).reshape(-1)
        if self.lo.shape != (m,) or self.hi.shape != (m,):
            raise QpError("inequality bounds must match the number of rows")
        if not np.all(np.isfinite(self.A_ineq)):
            raise QpError("inequality coefficients must be finite")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.hi)) or np.any(self.lo > self.hi):
            raise QpError("inequality rows need lo <= hi")

        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        self.A_eq = _rows(self.A_eq, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.b_eq.shape != (self.A_eq.shape[0],):
            raise QpError("equality rhs must match the number of rows")
        if not (np.all(np.isfinite(self.A_eq)) and np.all(np.isfinite(self.b_eq))):
            raise QpError("equality rows must be finite")

    @property
    def n(self) -> int:
        return self.g.size

    def standard_form(self) -> tuple[np.ndarray, np.ndarray, int, list[RowInfo]]:
        """Expanded rows ``A w <= b``; the first ``n_eq`` rows are equalities."""
        n = self.n
        rows, rhs, info = [], [], []
        for k in range(self.A_eq.shape[0]):
            rows.append(self.A_eq[k])
            rhs.append(self.b_eq[k])
            info.append(RowInfo("eq", k, "eq"))
        eye = np.eye(n)
        for k in range(n):
            if np.isfinite(self.ub[k]):
                rows.append(eye[k])
                rhs.append(self.ub[k])
                info.append(RowInfo("box", k, "upper"))
            if np.isfinite(self.lb[k]):
                rows.append(-eye[k])
                rhs.append(-self.lb[k])
                info.append(RowInfo("box", k, "lower"))
        for k in range(self.A_ineq.shape[0]):
            if np.isfinite(self.hi[k]):
                rows.append(self.A_ineq[k])
                rhs.append(self.hi[k])
                info.append(RowInfo("ineq", k, "upper"))
            if np.isfinite(self.lo[k]):
                rows.append(-self.A_ineq[k])
                rhs.append(-self.lo[k])
                info.append(RowInfo("ineq", k, "lower"))
        A = np.array(rows, dtype=float).reshape(len(rows), n)
        return A, np.array(rhs, dtype=float), self.A_eq.shape[0], info

    def objective(self, w: np.ndarray) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.G @ w + 2.0 * self.g @ w)

    def violation(self, w: np.ndarray) -> float:
        A, b, n_eq, _ = self.standard_form()
        if A.shape[0] == 0:
            return 0.0
        r = A @ w - b
        r[:n_eq] = np.abs(r[:n_eq])
        return float(max(0.0, r.max()))


def _rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        if a.shape[1] != n:
            raise QpError(f"constraint rows must have {n} columns, got {a.shape[1]}")
        return a
    if a.size == 0:
        return a.reshape(0, n)
    return a.reshape(-1, n)


@dataclass
class QpResult:
    status: str  # "optimal" | "infeasible"
    w: np.ndarray | None
    active_set: list[int] = field(default_factory=list)
    multipliers: np.ndarray | None = None
    kkt_residual: float = np.nan
    phase1_value: float = 0.0
    certificate: np.ndarray | None = None  # phase-1 multipliers when infeasible
    rows: list[RowInfo] = field(default_factory=list)
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def active_rows(self) -> list[RowInfo]:
        return [self.rows[i] for i in self.active_set]


def _active_set_qp(Q, c, A, b, n_eq, x, working, max_iter):
    """Primal active-set for ``min 0.5 x'Qx + c'x  s.t. A x <= b`` (first n_eq rows equalities).

    ``x`` must be feasible and ``working`` a list of linearly independent
    rows active at ``x`` that contains all equalities.
    """
    n = x.size
    m = A.shape[0]
    W = list(working)
    x = x.copy()
    # after an unblocked full step x minimises over the current subspace already
    at_subspace_min = False
    for it in range(1, max_iter + 1):
        grad = Q @ x + c
        Aw = A[W]
        if W:
            # null-space of the working rows via complete QR of Aw^T
            Qf, Rf = np.linalg.qr(Aw.T, mode="complete")
            k = len(W)
            Y, Z = Qf[:, :k], Qf[:, k:]
        else:
            Z = np.eye(n)
            k = 0
        grad_scale = float(np.abs(Q @ x).max(initial=0.0) + np.abs(c).max(initial=0.0))
        p = np.zeros(n)
        stationary = at_subspace_min
        if Z.shape[1] > 0 and not stationary:
            reduced = Z.T @ grad
            if np.abs(reduced).max() <= _ZERO_STEP * grad_scale:
                stationary = True
            else:
                H = Z.T @ Q @ Z
                p = Z @ np.linalg.solve(H, -reduced)
        scale = max(1.0, float(np.abs(x).max(initial=0.0)))
        if stationary or np.abs(p).max(initial=0.0) <= _ZERO_STEP * scale:
            at_subspace_min = False
            lam = np.zeros(m)
            if k:
                # Aw^T lam_W = -grad  ->  R^T-solve via the QR factors
                lam_w = np.linalg.solve(Rf[:k, :k], -(Y.T @ grad))
                lam[W] = lam_w
            ineq_w = [i for i in W if i >= n_eq]
            if not ineq_w:
                return x, lam, W, it
            lam_ineq = lam[ineq_w]
            j = int(np.argmin(lam_ineq))
            if lam_ineq[j] >= -_ZERO_STEP * max(1.0, float(np.abs(lam).max())):
                lam[ineq_w] = np.maximum(lam_ineq, 0.0)
                return x, lam, W, it
            W.remove(ineq_w[j])
            continue

        alpha = 1.0
        blocking = -1
        Ap = A @ p
        slack = b - A @ x
        in_w = np.zeros(m, dtype=bool)
        in_w[W] = True
        for i in range(n_eq, m):
            if in_w[i] or Ap[i] <= 1e-14 * np.abs(A[i]).sum() * np.abs(p).max():
                continue
            ratio = max(slack[i], 0.0) / Ap[i]
            if ratio < alpha:
                alpha = ratio
                blocking = i
        x = x + alpha * p
        if blocking >= 0:
            W.append(blocking)
            W.sort()
        else:
            at_subspace_min = True
    raise QpCyclingError(f"active-set iteration limit ({max_iter}) reached")


def _independent_rows(A, candidates, tol=1e-10):
    chosen: list[int] = []
    for i in candidates:
        trial = A[chosen + [i]]
        if np.linalg.matrix_rank(trial, tol=tol * max(1.0, np.abs(trial).max())) == len(chosen) + 1:
            chosen.append(i)
    return chosen


def _phase1(A, b, n_eq, max_iter):
    """Minimise the largest violation ``t`` over (w, t).  Returns (value, w, multipliers)."""
    m, n = A.shape
    # rows:  a_i w - t <= b_i  (ineq),  +/- (a_i w - b_i) - t <= 0 (eq),  -t <= 0
    rows = []
    rhs = []
    for i in range(m):
        if i < n_eq:
            rows.append(np.r_[A[i], -1.0])
            rhs.append(b[i])
            rows.append(np.r_[-A[i], -1.0])
            rhs.append(-b[i])
        else:
            rows.append(np.r_[A[i], -1.0])
            rhs.append(b[i])
    rows.append(np.r_[np.zeros(n), -1.0])
    rhs.append(0.0)
    P = np.array(rows).reshape(-1, n + 1)
    q = np.array(rhs)
    x0 = np.zeros(n + 1)
    viol = -q.copy()  # P x0 - q with t = 0
    t0 = max(0.0, float(viol.max(initial=0.0)))
    x0[-1] = t0
    Q = _PHASE1_REG * np.eye(n + 1)
    c = np.zeros(n + 1)
    c[-1] = 1.0
    active = np.flatnonzero(P @ x0 - q >= -1e-14)
    W = _independent_rows(P, list(active))
    x, lam, _, _ = _active_set_qp(Q, c, P, q, 0, x0, W, max_iter)
    return max(0.0, float(x[-1])), x[:n], lam


def solve(problem: QpProblem, max_iter: int | None = None) -> QpResult:
    """Minimise ``w'Gw + 2g'w`` subject to the problem's constraints."""
    A, b, n_eq, info = problem.standard_form()
    n = problem.n
    m = A.shape[0]
    if max_iter is None:
        max_iter = 10 * (n + m) + 10
    Q = 2.0 * problem.G
    c = 2.0 * problem.g

    if n == 0:
        # nothing to choose: the rows either hold at w = () or they do not
        slack = np.concatenate([-np.abs(b[:n_eq]), b[n_eq:]])
        worst = float(max(0.0, -slack.min())) if m else 0.0
        if worst > FEAS_TOL:
            return QpResult("infeasible", None, phase1_value=worst, rows=info)
        res = QpResult("optimal", np.zeros(0), [], np.zeros(m), phase1_value=worst, rows=info)
        res.kkt_residual = verify_kkt(problem, res.w, res.multipliers)
        return res

    if m == 0:
        w = np.linalg.solve(problem.G, -problem.g)
        res = QpResult("optimal", w, [], np.zeros(0), rows=info, iterations=1)
        res.kkt_residual = verify_kkt(problem, w, res.multipliers)
        return res

    value, w0, lam1 = _phase1(A, b, n_eq, max_iter)
    if value > FEAS_TOL:
        return QpResult(
            "infeasible", None, phase1_value=value, certificate=lam1, rows=info
        )

    # snap onto the constraints that are active at the phase-1 point
    r = A @ w0 - b
    near = [i for i in range(m) if i < n_eq or r[i] >= -FEAS_TOL]
    W = _independent_rows(A, near)
    # dependent (but consistent) equalities are left out of W; they hold implicitly
    if W:
        Aw = A[W]
        corr = np.linalg.lstsq(Aw, b[W] - Aw @ w0, rcond=None)[0]
        w0 = w0 + corr
    w, lam, W, iters = _active_set_qp(Q, c, A, b, n_eq, w0, W, max_iter)
    res = QpResult("optimal", w, list(W), lam, phase1_value=value, rows=info, iterations=iters)
    res.kkt_residual = verify_kkt(problem, w, lam)
    return res


def verify_kkt(problem: QpProblem, w: np.ndarray, multipliers: np.ndarray | None) -> float:
    """Largest KKT violation of ``(w, multipliers)`` over the expanded rows.

    Takes the max of stationarity ``|2Gw + 2g + A^T lam|_inf``, primal
    infeasibility, negative inequality multipliers and ``|lam_i * slack_i|``.
    """
    A, b, n_eq, _ = problem.standard_form()
    w = np.asarray(w, dtype=float)
    lam = np.zeros(A.shape[0]) if multipliers is None else np.asarray(multipliers, dtype=float)
    if lam.shape != (A.shape[0],):
        raise QpError(f"expected {A.shape[0]} multipliers, got {lam.shape}")
    stat = 2.0 * problem.G @ w + 2.0 * problem.g + A.T @ lam
    parts = [float(np.abs(stat).max(initial=0.0))]
    if A.shape[0]:
        r = A @ w - b
        slack = b - A @ w
        parts.append(float(np.abs(r[:n_eq]).max(initial=0.0)))
        parts.append(float(np.maximum(r[n_eq:], 0.0).max(initial=0.0)))
        parts.append(float(np.maximum(-lam[n_eq:], 0.0).max(initial=0.0)))
        parts.append(float(np.abs(lam[n_eq:] * slack[n_eq:]).max(initial=0.0)))
    return max(parts)
