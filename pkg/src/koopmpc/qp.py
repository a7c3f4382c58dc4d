"""Dense convex QP solver based on operator splitting (ADMM).

Problems have the form::

    minimize    u' H u + g' u
    subject to  A_ineq u <= b_ineq
                A_eq u    = b_eq      (optional)

Note the objective carries no factor 1/2, so the gradient is ``2 H u + g``.

The iteration is the relaxed ADMM used by OSQP on ``l <= A u <= v`` with
fixed penalty ``rho`` (``1e3 rho`` on equality rows), Ruiz equilibration and
a cached Cholesky factor of ``P + sigma I + A' rho A``.  After convergence the
active set guessed from the dual iterate is used to solve the reduced KKT
system exactly ("polishing"); the polished point replaces the ADMM iterate
when it is primal/dual feasible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

INFTY = 1e20

OPTIMAL = "optimal"
MAX_ITERS = "max_iters"
INFEASIBLE = "infeasible"


def _as_matrix(M, d):
    # keep the caller's array object when possible; the solver caches its
    # factorization by identity
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != d:
        M = M.reshape(-1, d)
    return M


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_ineq: Optional[np.ndarray] = None
    b_ineq: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = self.H.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(d)
        if self.H.shape != (d, d):
            raise ValueError("H must be square")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > \
                1e-12 * max(1.0, np.max(np.abs(self.H))):
            raise ValueError("H must be symmetric")
        if self.A_ineq is None:
            self.A_ineq = np.zeros((0, d))
            self.b_ineq = np.zeros(0)
        if self.A_eq is None:
            self.A_eq = np.zeros((0, d))
            self.b_eq = np.zeros(0)
        self.A_ineq = _as_matrix(self.A_ineq, d)
        self.b_ineq = np.asarray(self.b_ineq, dtype=float).reshape(-1)
        self.A_eq = _as_matrix(self.A_eq, d)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.b_ineq.size != self.A_ineq.shape[0] or \
                self.b_eq.size != self.A_eq.shape[0]:
            raise ValueError("constraint matrix/vector size mismatch")
        for M in (self.H, self.g, self.A_ineq, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(M)):
                raise ValueError("QP data must be finite")
        if np.any(np.isnan(self.b_ineq)):
            raise ValueError("QP data must be finite")

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ self.H @ u + self.g @ u)


@dataclass
class QpSolution:
    u_star: np.ndarray
    objective: float
    primal_residual: float
    dual_residual: float
    iterations: int
    status: str
    dual_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dual_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class KktReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal_feasibility,
                   self.complementarity)


def kkt_check(p: QpProblem, sol: QpSolution) -> KktReport:
    """Stationarity, primal feasibility and complementarity residuals."""
    u = np.asarray(sol.u_star, dtype=float)
    lam = sol.dual_ineq if sol.dual_ineq.size else np.zeros(p.A_ineq.shape[0])
    nu = sol.dual_eq if sol.dual_eq.size else np.zeros(p.A_eq.shape[0])
    grad = 2 * p.H @ u + p.g + p.A_ineq.T @ lam + p.A_eq.T @ nu
    slack = p.A_ineq @ u - p.b_ineq
    viol = np.max(np.maximum(slack, 0.0), initial=0.0)
    if p.A_eq.shape[0]:
        viol = max(viol, float(np.max(np.abs(p.A_eq @ u - p.b_eq))))
    finite = p.b_ineq < INFTY
    comp = np.max(np.abs(lam[finite] * slack[finite]), initial=0.0)
    return KktReport(float(np.max(np.abs(grad), initial=0.0)), float(viol),
                     float(comp))


def _inf_norm(v):
    return float(np.abs(v).max()) if v.size else 0.0


def _same(a, b):
    # empty blocks are recreated by every QpProblem; equal shape suffices
    return a is b or (a.size == 0 and b.size == 0 and a.shape == b.shape)


class _Setup:
    """Scaled problem data and the cached factorization for one (H, A) pair."""

    def __init__(self, H, A_ineq, A_eq, rho, sigma, scaling_iters):
        d = H.shape[0]
        if d and np.linalg.eigvalsh(H).min() < -1e-8 * max(
                1.0, float(np.max(np.abs(H)))):
            raise ValueError("H is not positive semidefinite")
        self.H_ref, self.Ai_ref, self.Ae_ref = H, A_ineq, A_eq
        A = np.vstack([A_ineq, A_eq])
        D = np.ones(d)
        E = np.ones(A.shape[0])
        Ps, As = 2.0 * H, A.copy()
        for _ in range(scaling_iters):
            col = np.maximum(np.max(np.abs(Ps), axis=0, initial=0.0),
                             np.max(np.abs(As), axis=0, initial=0.0))
            dt = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
            et = 1.0 / np.sqrt(np.clip(np.max(np.abs(As), axis=1,
                                              initial=0.0), 1e-4, 1e4))
            Ps = dt[:, None] * Ps * dt[None, :]
            As = et[:, None] * As * dt[None, :]
            D *= dt
            E *= et
        col_P = np.max(np.abs(Ps), axis=0, initial=0.0)
        self.c = 1.0 / float(np.clip(np.mean(col_P) if d else 1.0, 1e-4, 1e4))
        self.D, self.E, self.A = D, E, As
        self.n_ineq = A_ineq.shape[0]
        self.rho = np.full(A.shape[0], rho)
        self.rho[self.n_ineq:] = 1e3 * rho
        self.sigma = sigma
        K = self.c * Ps + sigma * np.eye(d) + As.T @ (self.rho[:, None] * As)
        self.factor = linalg.cho_factor(K, lower=True, check_finite=False)

    def matches(self, H, A_ineq, A_eq):
        return (H is self.H_ref and _same(A_ineq, self.Ai_ref)
                and _same(A_eq, self.Ae_ref))


class QpSolver:
    """Stateful ADMM solver with a factorization cache and warm starts.

    Parameters
    ----------
    tol_primal, tol_dual : float
        Termination tolerances, relative to ``max(1, scale)`` of the
        corresponding residual terms.
    max_iters : int
    rho, sigma, alpha : float
        ADMM penalty, proximal regularization and over-relaxation.
    polish : bool
        Refine the ADMM iterate by solving the KKT system on the guessed
        active set.
    check_every : int
        Residuals and the infeasibility certificate are evaluated every
        ``check_every`` iterations.
    """

    def __init__(self, tol_primal=1e-6, tol_dual=1e-6, max_iters=4000,
                 rho=1.0, sigma=1e-6, alpha=1.6, scaling_iters=10,
                 polish=True, eps_infeasible=1e-7, check_every=5,
                 debug_path=None):
        self.tol_primal = tol_primal
        self.tol_dual = tol_dual
        self.max_iters = max_iters
        self.rho = rho
        self.sigma = sigma
        self.alpha = alpha
        self.scaling_iters = scaling_iters
        self.polish = polish
        self.eps_infeasible = eps_infeasible
        self.check_every = max(1, int(check_every))
        self.debug_path = debug_path
        self.n_factorizations = 0
        self._setup: Optional[_Setup] = None

    def _get_setup(self, p):
        s = self._setup
        if s is None or not s.matches(p.H, p.A_ineq, p.A_eq):
            s = _Setup(p.H, p.A_ineq, p.A_eq, self.rho, self.sigma,
                       self.scaling_iters)
            self._setup = s
            self.n_factorizations += 1
        return s

    def solve(self, p: QpProblem, warm=None) -> QpSolution:
        """Solve ``p``; ``warm`` is an optional ``(u, dual)`` pair.

        The dual vector stacks the inequality and equality multipliers.
        """
        s = self._get_setup(p)
        d, r = p.d, s.A.shape[0]
        H, q, As, D, E, c = p.H, p.g, s.A, s.D, s.E, s.c
        lo = np.concatenate([np.full(s.n_ineq, -np.inf), p.b_eq])
        hi = np.concatenate([np.where(p.b_ineq >= INFTY, np.inf, p.b_ineq),
                             p.b_eq])
        qs = c * D * q
        los, his = E * lo, E * hi
        rho, sigma, alpha = s.rho, s.sigma, self.alpha

        if warm is not None:
            u0, y0 = warm
            x = np.asarray(u0, dtype=float) / D
            y = np.zeros(r) if y0 is None else \
                c * np.asarray(y0, dtype=float) / E
            z = np.clip(As @ x, los, his)
        else:
            x = np.zeros(d)
            z = np.clip(np.zeros(r), los, his)
            y = np.zeros(r)

        trace = [] if self.debug_path else None
        status = MAX_ITERS
        it = 0
        pr = dr = np.inf
        for it in range(1, self.max_iters + 1):
            rhs = sigma * x - qs + As.T @ (rho * z - y)
            xt = linalg.cho_solve(s.factor, rhs, check_finite=False)
            zt = As @ xt
            x_new = alpha * xt + (1 - alpha) * x
            zr = alpha * zt + (1 - alpha) * z
            z_new = np.clip(zr + y / rho, los, his)
            y_new = y + rho * (zr - z_new)
            dy = y_new - y
            x, z, y = x_new, z_new, y_new
            if it % self.check_every and it != self.max_iters:
                continue

            # residuals in unscaled terms
            u = D * x
            Au = (As @ x) / E
            zu = z / E
            Pu = 2.0 * (H @ u)
            Atl = (As.T @ y) / (D * c)
            pr = _inf_norm(Au - zu)
            dr = _inf_norm(Pu + q + Atl)
            eps_p = self.tol_primal * max(1.0, _inf_norm(Au), _inf_norm(zu))
            eps_d = self.tol_dual * max(1.0, _inf_norm(Pu), _inf_norm(Atl),
                                        _inf_norm(q))
            if trace is not None:
                trace.append((it, pr, dr))
            if pr <= eps_p and dr <= eps_d:
                status = OPTIMAL
                break
            if r and self._certify_infeasible(s, dy, lo, hi):
                status = INFEASIBLE
                break

        u = D * x
        lam = E * y / c
        sol = QpSolution(u, p.objective(u), pr, dr, it, status,
                         lam[:s.n_ineq].copy(), lam[s.n_ineq:].copy())
        if trace is not None:
            self._dump(trace)
        if self.polish and status != INFEASIBLE:
            pol = self._polish(p, sol)
            if pol is not None:
                sol = pol
        return sol

    def _certify_infeasible(self, s, dy_scaled, lo, hi):
        c = s.c
        dy = s.E * dy_scaled / c
        n = _inf_norm(dy)
        if n == 0:
            return False
        eps = self.eps_infeasible * n
        At_dy = (s.A.T @ dy_scaled) / (s.D * c)
        if _inf_norm(At_dy) > eps:
            return False
        pos, neg = np.maximum(dy, 0), np.minimum(dy, 0)
        if np.any((pos > eps) & ~np.isfinite(hi)) or \
                np.any((neg < -eps) & ~np.isfinite(lo)):
            return False
        support = np.sum(np.where(np.isfinite(hi), hi, 0) * pos) + \
            np.sum(np.where(np.isfinite(lo), lo, 0) * neg)
        return support < -eps

    def _polish(self, p: QpProblem, sol: QpSolution):
        """Exact solve on the active set guessed from the dual iterate."""
        lam = sol.dual_ineq
        slack = p.A_ineq @ sol.u_star - p.b_ineq
        active = (lam + slack > 0) & (p.b_ineq < INFTY)
        for _ in range(10):
            res = self._kkt_solve(p, active)
            if res is None:
                return None
            u, lam_a, nu = res
            lam_full = np.zeros(p.A_ineq.shape[0])
            lam_full[active] = lam_a
            viol = p.A_ineq @ u - p.b_ineq
            scale = max(1.0, _inf_norm(p.b_ineq[p.b_ineq < INFTY]))
            bad_primal = (viol > 1e-9 * scale) & ~active
            bad_dual = (lam_full < -1e-9 * max(1.0, _inf_norm(lam_a))) \
                & active
            if not bad_primal.any() and not bad_dual.any():
                cand = QpSolution(u, p.objective(u), 0.0, 0.0,
                                  sol.iterations, OPTIMAL, lam_full, nu,
                                  polished=True)
                rep = kkt_check(p, cand)
                cand.primal_residual = rep.primal_feasibility
                cand.dual_residual = rep.stationarity
                if rep.stationarity > 1e-9 * max(1.0, _inf_norm(p.g)) or \
                        rep.primal_feasibility > self.tol_primal * scale:
                    return None
                return cand
            active = (active & ~bad_dual) | bad_primal
        return None

    @staticmethod
    def _kkt_solve(p, active):
        A_act = np.vstack([p.A_ineq[active], p.A_eq])
        b_act = np.concatenate([p.b_ineq[active], p.b_eq])
        d, k = p.d, A_act.shape[0]
        K = np.zeros((d + k, d + k))
        K[:d, :d] = 2.0 * p.H
        K[:d, d:] = A_act.T
        K[d:, :d] = A_act
        rhs = np.concatenate([-p.g, b_act])
        try:
            sol = linalg.solve(K, rhs, assume_a="sym", check_finite=False)
        except (linalg.LinAlgError, ValueError):
            sol = linalg.lstsq(K, rhs, check_finite=False)[0]
        if not np.all(np.isfinite(sol)):
            return None
        if _inf_norm(K @ sol - rhs) > 1e-9 * max(1.0, _inf_norm(rhs)):
            return None
        n_a = int(active.sum())
        return sol[:d], sol[d:d + n_a], sol[d + n_a:]

    def _dump(self, trace):
        with open(self.debug_path, "w") as fh:
            fh.write("iter,primal_residual,dual_residual\n")
            for it, pr, dr in trace:
                fh.write(f"{it},{pr!r},{dr!r}\n")


def solve_qp(p: QpProblem, tol_primal=1e-6, tol_dual=1e-6, max_iters=4000,
             warm=None, **kwargs) -> QpSolution:
    """One-shot convenience wrapper around :class:`QpSolver`."""
    return QpSolver(tol_primal, tol_dual, max_iters, **kwargs).solve(p, warm)
