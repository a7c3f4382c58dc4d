"""Linear MPC on lifted predictors: condensing, objective translation, and
receding-horizon closed-loop simulation.

The sparse problem over ``z_0..z_Np`` and ``u_0..u_{Np-1}``::

    minimize  z_Np' Q_Np z_Np + q_Np' z_Np
              + sum_i z_i' Q_i z_i + u_i' R_i u_i + q_i' z_i + r_i' u_i
    s.t.      z_{i+1} = A z_i + B u_i
              E_i z_i + F_i u_i <= b_i,   E_Np z_Np <= b_Np

is condensed to the dense problem in ``U = [u_0; ...; u_{Np-1}]``::

    minimize  U' H U + h' U + z_0' G U
    s.t.      L U + M z_0 <= c

whose data depend only on the model and the stage data, never on ``z_0``.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dictionary import BasisFn, make_delay_vector
from .predictor import local_linearization
from .qp import INFEASIBLE, INFTY, QpProblem, QpSolver

log = logging.getLogger(__name__)

VACUOUS = 1e30


def _psd(M, name, tol=1e-9):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    sym = 0.5 * (M + M.T)
    if np.max(np.abs(M - M.T), initial=0.0) > 1e-9 * max(
            1.0, np.max(np.abs(M), initial=0.0)):
        raise ValueError(f"{name} must be symmetric")
    if M.size and np.linalg.eigvalsh(sym).min() < -tol * max(
            1.0, np.max(np.abs(M))):
        raise ValueError(f"{name} must be positive semidefinite")
    return sym


def _stages(value, count, shape, name):
    """Broadcast a constant or per-stage list to ``count`` arrays."""
    if value is None:
        return [np.zeros(shape) for _ in range(count)]
    if isinstance(value, (list, tuple)) and len(value) == count and \
            np.ndim(value[0]) == len(shape):
        out = [np.asarray(v, dtype=float) for v in value]
    else:
        v = np.asarray(value, dtype=float)
        if v.ndim == 0 and len(shape) == 2 and shape[0] == shape[1]:
            v = v * np.eye(shape[0])
        out = [v.copy() for _ in range(count)]
    for v in out:
        if v.shape != shape:
            raise ValueError(f"{name} stage has shape {v.shape}, "
                             f"expected {shape}")
    return out


@dataclass
class MpcSpec:
    """Stage data of the sparse MPC problem.

    ``Q, q, E, F, b`` have ``Np + 1`` entries (the last one terminal, where
    ``F`` must be zero); ``R, r`` have ``Np`` entries.  Constraint blocks may
    have different row counts per stage.
    """

    Np: int
    Q: list
    R: list
    q: list
    r: list
    E: list
    F: list
    b: list

    @classmethod
    def build(cls, N, m, Np, Q=None, R=None, q=None, r=None, Q_N=None,
              q_N=None, E=None, F=None, b=None, E_N=None, b_N=None):
        """Assemble a spec from constant (or per-stage) stage data.

        ``E, F, b`` apply to stages ``0..Np-1``; ``E_N, b_N`` to the terminal
        stage.  Any of them may be omitted.
        """
        if Np < 1:
            raise ValueError("horizon must be at least 1")
        Qs = _stages(Q, Np, (N, N), "Q")
        Qs.append(_stages(Q if Q_N is None else Q_N, 1, (N, N), "Q_N")[0])
        qs = _stages(q, Np, (N,), "q")
        qs.append(_stages(q if q_N is None else q_N, 1, (N,), "q_N")[0])
        Rs = _stages(R, Np, (m, m), "R")
        rs = _stages(r, Np, (m,), "r")
        nc = 0
        for M in (E, F):
            if M is not None:
                staged = isinstance(M, (list, tuple)) and len(M) == Np \
                    and np.ndim(M[0]) == 2
                nc = np.atleast_2d(M[0] if staged else M).shape[0]
        Es = _stages(E, Np, (nc, N), "E")
        Fs = _stages(F, Np, (nc, m), "F")
        bs = _stages(b, Np, (nc,), "b")
        ncN = 0 if E_N is None else np.atleast_2d(E_N).shape[0]
        Es.append(np.zeros((ncN, N)) if E_N is None
                  else np.atleast_2d(np.asarray(E_N, dtype=float)))
        Fs.append(np.zeros((ncN, m)))
        bs.append(np.zeros(0) if b_N is None
                  else np.asarray(b_N, dtype=float).reshape(ncN))
        return cls(Np, Qs, Rs, qs, rs, Es, Fs, bs)

    def validate(self, N, m):
        Np = self.Np
        if len(self.Q) != Np + 1 or len(self.q) != Np + 1 or \
                len(self.R) != Np or len(self.r) != Np or \
                len(self.E) != Np + 1 or len(self.F) != Np + 1 or \
                len(self.b) != Np + 1:
            raise ValueError("stage lists have inconsistent lengths")
        for i in range(Np + 1):
            if np.shape(self.Q[i]) != (N, N) or np.shape(self.q[i]) != (N,):
                raise ValueError(f"stage {i} state cost has wrong shape")
            _psd(self.Q[i], f"Q[{i}]")
            nc = np.asarray(self.b[i]).size
            if np.size(self.E[i]) != nc * N or np.size(self.F[i]) != nc * m:
                raise ValueError(f"stage {i} constraint shapes disagree")
        for i in range(Np):
            if np.shape(self.R[i]) != (m, m) or np.shape(self.r[i]) != (m,):
                raise ValueError(f"stage {i} input cost has wrong shape")
            _psd(self.R[i], f"R[{i}]")
        if np.any(np.asarray(self.F[Np]) != 0):
            raise ValueError("terminal stage cannot constrain the input")

    def padded_constraints(self, N, m):
        """Constraint blocks padded to a uniform row count with vacuous rows."""
        nc = max(np.asarray(b).size for b in self.b)
        Es, Fs, bs = [], [], []
        for E, F, b in zip(self.E, self.F, self.b):
            b = np.asarray(b, dtype=float).reshape(-1)
            k = b.size
            Ep = np.zeros((nc, N))
            Fp = np.zeros((nc, m))
            bp = np.full(nc, VACUOUS)
            Ep[:k] = np.asarray(E, dtype=float).reshape(k, N)
            Fp[:k] = np.asarray(F, dtype=float).reshape(k, m)
            bp[:k] = b
            Es.append(Ep)
            Fs.append(Fp)
            bs.append(bp)
        return nc, Es, Fs, bs


@dataclass
class DenseQp:
    """Condensed problem data; see module docstring."""

    H: np.ndarray
    h: np.ndarray
    G: np.ndarray
    L: np.ndarray
    M: np.ndarray
    c: np.ndarray
    Np: int
    m: int
    nc: int
    const_Q: list = field(default_factory=list, repr=False)
    const_q: list = field(default_factory=list, repr=False)

    def problem(self, z0, h=None) -> QpProblem:
        """QP for lifted initial state ``z0`` (optionally another ``h``).

        ``H`` and ``L`` are passed through as the same objects every call.
        """
        z0 = np.asarray(z0, dtype=float)
        g = (self.h if h is None else h) + self.G.T @ z0
        return QpProblem(self.H, g, self.L, self.c - self.M @ z0)

    def objective(self, U, z0, h=None) -> float:
        """Dense objective including the ``z0``-only constant terms."""
        U = np.asarray(U, dtype=float)
        z0 = np.asarray(z0, dtype=float)
        hh = self.h if h is None else h
        val = U @ self.H @ U + hh @ U + z0 @ self.G @ U
        if self.const_Q:
            val += sum(z0 @ Q @ z0 + q @ z0 for Q, q in
                       zip(self.const_Q, self.const_q))
        return float(val)


def prediction_blocks(A, B, Np):
    """Powers ``A^i`` and block rows ``B_i`` of the prediction matrices.

    ``z_i = A^i z_0 + B_i U`` for ``i = 0..Np``.
    """
    N, m = B.shape
    pows = [np.eye(N)]
    rows = [np.zeros((N, m * Np))]
    for i in range(Np):
        pows.append(A @ pows[-1])
        Bi = A @ rows[-1]
        Bi[:, i * m:(i + 1) * m] += B
        rows.append(Bi)
    return pows, rows


def _model_matrices(model):
    if isinstance(model, tuple):
        A, B = model
    else:
        A, B = model.A, model.B
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    return A, B


def condense(model, spec: MpcSpec) -> DenseQp:
    """Eliminate the lifted states from the sparse problem.

    ``model`` is a :class:`LiftedModel` or an ``(A, B)`` pair.

    ``H = R + B'QB``, ``h = B'q + r``, ``G = 2 A'QB``, ``L = F + EB``,
    ``M = EA``, ``c = [b_0; ...; b_Np]`` with bold symbols the stacked
    prediction and block-diagonal stage matrices.
    """
    A, B = _model_matrices(model)
    N, m = B.shape
    Np = spec.Np
    spec.validate(N, m)
    pows, rows = prediction_blocks(A, B, Np)
    d = m * Np
    H = np.zeros((d, d))
    h = np.zeros(d)
    G = np.zeros((N, d))
    for i in range(Np):
        sl = slice(i * m, (i + 1) * m)
        H[sl, sl] += spec.R[i]
        h[sl] += spec.r[i]
    for i in range(Np + 1):
        QB = spec.Q[i] @ rows[i]
        H += rows[i].T @ QB
        h += rows[i].T @ spec.q[i]
        G += 2.0 * pows[i].T @ QB
    H = 0.5 * (H + H.T)
    nc, Es, Fs, bs = spec.padded_constraints(N, m)
    L = np.zeros((nc * (Np + 1), d))
    Mz = np.zeros((nc * (Np + 1), N))
    for i in range(Np + 1):
        rs = slice(i * nc, (i + 1) * nc)
        L[rs] = Es[i] @ rows[i]
        if i < Np:
            L[rs, i * m:(i + 1) * m] += Fs[i]
        Mz[rs] = Es[i] @ pows[i]
    c = np.concatenate(bs) if bs else np.zeros(0)
    c = np.where(c >= VACUOUS, INFTY * 10, c)
    const_Q = [pows[i].T @ spec.Q[i] @ pows[i] for i in range(Np + 1)]
    const_q = [pows[i].T @ spec.q[i] for i in range(Np + 1)]
    return DenseQp(H, h, G, L, Mz, c, Np, m, nc,
                   const_Q=[sum(const_Q)], const_q=[sum(const_q)])


def sparse_objective(model, spec: MpcSpec, z0, U) -> float:
    """Evaluate the sparse objective by rolling out ``z`` explicitly."""
    A, B = _model_matrices(model)
    m = B.shape[1]
    U = np.asarray(U, dtype=float).reshape(spec.Np, m)
    z = np.asarray(z0, dtype=float)
    J = 0.0
    for i in range(spec.Np):
        J += z @ spec.Q[i] @ z + spec.q[i] @ z + U[i] @ spec.R[i] @ U[i] \
            + spec.r[i] @ U[i]
        z = A @ z + B @ U[i]
    J += z @ spec.Q[-1] @ z + spec.q[-1] @ z
    return float(J)


def sparse_problem(model, spec: MpcSpec, z0) -> QpProblem:
    """The sparse QP in ``w = [U; z_1; ...; z_Np]`` with dynamics as equalities.

    Constant terms in ``z0`` are dropped.  Used to cross-check
    :func:`condense`.
    """
    A, B = _model_matrices(model)
    N, m = B.shape
    Np = spec.Np
    z0 = np.asarray(z0, dtype=float)
    nu, nz = m * Np, N * Np
    n = nu + nz
    H = np.zeros((n, n))
    g = np.zeros(n)

    def zs(i):  # column slice of z_i, i >= 1
        return slice(nu + (i - 1) * N, nu + i * N)

    for i in range(Np):
        us = slice(i * m, (i + 1) * m)
        H[us, us] += spec.R[i]
        g[us] += spec.r[i]
    for i in range(1, Np + 1):
        H[zs(i), zs(i)] += spec.Q[i]
        g[zs(i)] += spec.q[i]
    Aeq = np.zeros((nz, n))
    beq = np.zeros(nz)
    for i in range(Np):
        rs = slice(i * N, (i + 1) * N)
        Aeq[rs, zs(i + 1)] = np.eye(N)
        Aeq[rs, i * m:(i + 1) * m] = -B
        if i == 0:
            beq[rs] = A @ z0
        else:
            Aeq[rs, zs(i)] = -A
    rows, rhs = [], []
    for i in range(Np + 1):
        E = np.asarray(spec.E[i], dtype=float)
        b = np.asarray(spec.b[i], dtype=float).reshape(-1)
        if b.size == 0:
            continue
        E = E.reshape(b.size, N)
        F = np.asarray(spec.F[i], dtype=float).reshape(b.size, m)
        row = np.zeros((b.size, n))
        if i < Np:
            row[:, i * m:(i + 1) * m] = F
        if i == 0:
            rhs.append(b - E @ z0)
        else:
            row[:, zs(i)] = E
            rhs.append(b)
        rows.append(row)
    Ain = np.vstack(rows) if rows else np.zeros((0, n))
    bin_ = np.concatenate(rhs) if rhs else np.zeros(0)
    return QpProblem(0.5 * (H + H.T), g, Ain, bin_, Aeq, beq)


# -- objective translation ---------------------------------------------------

@dataclass
class TrackingSpec:
    """Output tracking ``sum (Cz - y_r)'Q(Cz - y_r) + u'Ru`` with bounds.

    ``reference`` maps a step index to ``y_r`` (or is an array indexed by
    step, clamped at the end).
    """

    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    reference: object
    Q_N: Optional[np.ndarray] = None
    u_bounds: Optional[tuple] = None
    y_bounds: Optional[tuple] = None

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        ny = self.C.shape[0]
        self.Q = _psd(np.asarray(self.Q, dtype=float) * np.ones((1, 1))
                      if np.ndim(self.Q) == 0 else self.Q, "Q")
        if self.Q.shape == (1, 1) and ny > 1:
            self.Q = self.Q[0, 0] * np.eye(ny)
        QN = self.Q if self.Q_N is None else self.Q_N
        self.Q_N = _psd(np.asarray(QN, dtype=float) * np.ones((1, 1))
                        if np.ndim(QN) == 0 else QN, "Q_N")
        if self.Q_N.shape == (1, 1) and ny > 1:
            self.Q_N = self.Q_N[0, 0] * np.eye(ny)
        self.R = _psd(np.atleast_2d(np.asarray(self.R, dtype=float)), "R")

    @property
    def ny(self) -> int:
        return self.C.shape[0]

    def ref(self, k) -> np.ndarray:
        if callable(self.reference):
            v = self.reference(k)
        else:
            arr = np.asarray(self.reference, dtype=float)
            if arr.ndim == 0:
                v = arr
            else:
                v = arr[min(int(k), arr.shape[0] - 1)]
        return np.broadcast_to(np.asarray(v, dtype=float), (self.ny,))


def _bound_rows(M, bounds):
    """Rows ``[M; -M]`` and rhs ``[hi; -lo]`` for finite bounds only."""
    lo, hi = bounds
    k = M.shape[0]
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (k,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (k,))
    rows, rhs = [], []
    for j in range(k):
        if np.isfinite(hi[j]):
            rows.append(M[j])
            rhs.append(hi[j])
        if np.isfinite(lo[j]):
            rows.append(-M[j])
            rhs.append(-lo[j])
    if not rows:
        return np.zeros((0, M.shape[1])), np.zeros(0)
    return np.array(rows), np.array(rhs)


def tracking_constraints(track: TrackingSpec, N, m):
    """Per-stage ``(E, F, b)`` for input and output bounds, plus terminal."""
    Eu = np.zeros((0, N))
    Fu, bu = (_bound_rows(np.eye(m), track.u_bounds) if track.u_bounds
              else (np.zeros((0, m)), np.zeros(0)))
    Eu = np.zeros((Fu.shape[0], N))
    Ey, by = (_bound_rows(track.C, track.y_bounds) if track.y_bounds
              else (np.zeros((0, N)), np.zeros(0)))
    E = np.vstack([Eu, Ey])
    F = np.vstack([Fu, np.zeros((Ey.shape[0], m))])
    b = np.concatenate([bu, by])
    return E, F, b, Ey, by


def translate_tracking(track: TrackingSpec, model, Np: int, k: int = 0
                       ) -> MpcSpec:
    """Expand the tracking objective at time ``k`` into sparse stage data.

    ``Q_i = C'QC`` and ``q_i = -2 C'Q y_r(k + i)``; constants are dropped.
    """
    A, B = _model_matrices(model)
    N, m = B.shape
    if track.C.shape[1] != N:
        raise ValueError("tracking output map does not match the model")
    C = track.C
    QQ = C.T @ track.Q @ C
    QN = C.T @ track.Q_N @ C
    qs = [-2.0 * C.T @ track.Q @ track.ref(k + i) for i in range(Np)]
    qN = -2.0 * C.T @ track.Q_N @ track.ref(k + Np)
    E, F, b, Ey, by = tracking_constraints(track, N, m)
    # z_0 is data, so output bounds start at stage 1
    nu = F.shape[0] - Ey.shape[0]
    Es = [E[:nu]] + [E] * (Np - 1)
    Fs = [F[:nu]] + [F] * (Np - 1)
    bs = [b[:nu]] + [b] * (Np - 1)
    spec = MpcSpec.build(N, m, Np, Q=QQ, R=track.R, q=qs, Q_N=QN, q_N=qN,
                         E_N=Ey, b_N=by)
    spec.E[:Np], spec.F[:Np], spec.b[:Np] = Es, Fs, bs
    return spec


def reference_gain(model, track: TrackingSpec, Np: int) -> np.ndarray:
    """Matrix ``T`` with ``h(k) = h0 + T [y_r(k); ...; y_r(k+Np)]``."""
    A, B = _model_matrices(model)
    _, rows = prediction_blocks(A, B, Np)
    C = track.C
    blocks = []
    for i in range(Np + 1):
        Qi = track.Q if i < Np else track.Q_N
        blocks.append(-2.0 * rows[i].T @ (C.T @ Qi))
    return np.hstack(blocks)


@dataclass
class NmpcTranslation:
    """Lifting functions and selector data produced by :func:`translate_nmpc`.

    ``functions`` must be placed at the front of the dictionary; then stage
    ``i`` uses ``q_i = e[cost_index[i]]`` and constraint rows selecting
    ``constraint_index[i]``.
    """

    functions: list
    cost_index: list
    constraint_index: list
    c_u: list
    R: list
    r: list
    Np: int

    def spec(self, N: int, m: int) -> MpcSpec:
        Np = self.Np
        if N < len(self.functions):
            raise ValueError("dictionary smaller than the translated part")
        q, E, F, b = [], [], [], []
        for i in range(Np + 1):
            qi = np.zeros(N)
            if self.cost_index[i] is not None:
                qi[self.cost_index[i]] = 1.0
            q.append(qi)
            idx = self.constraint_index[i]
            Ei = np.zeros((len(idx), N))
            Ei[np.arange(len(idx)), idx] = 1.0
            E.append(Ei)
            if i < Np:
                F.append(np.asarray(self.c_u[i], dtype=float).reshape(
                    len(idx), m))
            else:
                F.append(np.zeros((len(idx), m)))
            b.append(np.zeros(len(idx)))
        Q = [np.zeros((N, N)) for _ in range(Np + 1)]
        R = [np.asarray(Ri, dtype=float).reshape(m, m) for Ri in self.R]
        r = [np.asarray(ri, dtype=float).reshape(m) for ri in self.r]
        return MpcSpec(Np, Q, R, q, r, E, F, b)


def translate_nmpc(Np: int, m: int, stage_cost=None, terminal_cost=None,
                   state_constraint=None, terminal_constraint=None,
                   input_constraint=None, n_constraints: int = 1, R=None,
                   r=None) -> NmpcTranslation:
    """Translate nonlinear costs/constraints into lifting functions.

    Each distinct cost ``l_i`` becomes one lifting function selected by a
    unit ``q_i``; each component of a state constraint ``c_x_i`` becomes one
    lifting function selected by a row of ``E_i`` with ``F_i = c_u_i'`` and
    ``b_i = 0``.  Per-stage arguments accept a single callable (shared by all
    stages) or a list.  Vector constraints need ``n_constraints``.
    """
    def per_stage(v, count):
        if v is None or callable(v):
            return [v] * count
        v = list(v)
        if len(v) != count:
            raise ValueError("per-stage list has the wrong length")
        return v

    costs = per_stage(stage_cost, Np) + [terminal_cost]
    cons = per_stage(state_constraint, Np) + [terminal_constraint]
    functions, keys = [], {}

    def add(key, make):
        if key not in keys:
            keys[key] = len(functions)
            functions.append(make())
        return keys[key]

    cost_index = [None if l is None else
                  add((id(l), None), lambda l=l: BasisFn.custom(l))
                  for l in costs]
    constraint_index = []
    for cx in cons:
        if cx is None:
            constraint_index.append([])
            continue
        if n_constraints == 1:
            constraint_index.append([add((id(cx), None), lambda cx=cx:
                                         BasisFn.custom(cx))])
        else:
            constraint_index.append([
                add((id(cx), j), lambda cx=cx, j=j: BasisFn.custom(
                    lambda x: np.asarray(cx(x))[j], f"c{j}"))
                for j in range(n_constraints)])
    if input_constraint is None:
        c_u = [np.zeros((len(ix), m)) for ix in constraint_index[:Np]]
    else:
        c_u = [np.asarray(c, dtype=float).reshape(len(ix), m)
               for c, ix in zip(per_stage(input_constraint, Np)
                                if not isinstance(input_constraint,
                                                  np.ndarray)
                                else [input_constraint] * Np,
                                constraint_index[:Np])]
    R = [np.zeros((m, m))] * Np if R is None else [
        np.asarray(R, dtype=float).reshape(m, m)] * Np
    r = [np.zeros(m)] * Np if r is None else [
        np.asarray(r, dtype=float).reshape(m)] * Np
    return NmpcTranslation(functions, cost_index, constraint_index, c_u, R,
                           r, Np)


# -- controllers ------------------------------------------------------------

def _shift(vec, block, nblocks):
    if vec is None or vec.size == 0:
        return vec
    v = vec.reshape(nblocks, -1) if block else vec
    out = np.concatenate([v[1:], v[-1:]])
    return out.reshape(-1)


class KoopmanMpc:
    """Tracking MPC on a lifted model with precomputed dense data.

    Condensing happens once in the constructor; each :meth:`control` call
    lifts the measurement, forms ``g = h(k) + G' z0`` and solves.  For
    input-output models (``model.delay`` set) the controller keeps the
    output/input history needed to form the delay vector.
    """

    def __init__(self, model, track: TrackingSpec, Np: int,
                 solver: Optional[QpSolver] = None, warm_start=True):
        self.model = model
        self.track = track
        self.Np = Np
        spec = translate_tracking(track, model, Np, 0)
        # the reference enters only through h(k); see h_at
        spec.q = [np.zeros(model.N) for _ in range(Np + 1)]
        self.dense = condense(model, spec)
        self.n_condense = 1
        self.ref_gain = reference_gain(model, track, Np)
        self.solver = solver or QpSolver()
        self.warm_start = warm_start
        self._warm = None
        self._hist_y = None
        self._hist_u = None
        self.feedback = "state" if model.delay is None else "output"

    def reset(self, y_history=None, u_history=None):
        """Reset warm start and, for delay models, the measurement history.

        Histories are newest-first; missing entries are filled by repeating
        the oldest given output and zero inputs.
        """
        self._warm = None
        if self.model.delay is not None:
            n_d, _ = self.model.delay
            self._hist_y = deque(y_history or [], maxlen=n_d + 1)
            self._hist_u = deque(u_history or [], maxlen=max(n_d, 1))

    def lifted_state(self, measurement):
        if self.model.delay is None:
            return self.model.lift(measurement)
        n_d, _ = self.model.delay
        y = np.atleast_1d(np.asarray(measurement, dtype=float))
        if self._hist_y is None:
            self.reset()
        self._hist_y.appendleft(y)
        while len(self._hist_y) < n_d + 1:
            self._hist_y.append(self._hist_y[-1])
        while len(self._hist_u) < n_d:
            self._hist_u.append(np.zeros(self.model.m))
        zeta = make_delay_vector(list(self._hist_y),
                                 list(self._hist_u)[:n_d]).values
        return self.model.lift(zeta)

    def h_at(self, k):
        refs = np.concatenate([self.track.ref(k + i)
                               for i in range(self.Np + 1)])
        return self.dense.h + self.ref_gain @ refs

    def control(self, k, measurement):
        z0 = self.lifted_state(measurement)
        p = self.dense.problem(z0, self.h_at(k))
        sol = self.solver.solve(p, self._warm if self.warm_start else None)
        m = self.model.m
        u = sol.u_star[:m].copy()
        if sol.status != INFEASIBLE:
            self._warm = (_shift(sol.u_star, True, self.Np),
                          _shift(sol.dual_ineq, True, self.Np + 1))
        if self.model.delay is not None:
            self._hist_u.appendleft(u)
        return u, sol


class LinearizedMpc:
    """MPC on a local linearization re-computed at every measured state.

    The affine model ``x+ = f(x_k, 0) + Jx (x - x_k) + Ju u`` is written in
    the augmented state ``[x; 1]`` and condensed afresh each step.
    """

    def __init__(self, f_discrete, n, m, output_map, track_weights: dict,
                 Np: int, solver_factory=QpSolver):
        self.f = f_discrete
        self.n, self.m = n, m
        self.Cy = np.atleast_2d(np.asarray(output_map, dtype=float))
        self.weights = track_weights
        self.Np = Np
        self.solver_factory = solver_factory
        self.n_condense = 0
        self.solver = None

    def reset(self):
        pass

    def control(self, k, x):
        x = np.asarray(x, dtype=float)
        f0, Jx, Ju = local_linearization(self.f, x, np.zeros(self.m))
        n = self.n
        A = np.zeros((n + 1, n + 1))
        A[:n, :n] = Jx
        A[:n, n] = f0 - Jx @ x
        A[n, n] = 1.0
        B = np.vstack([Ju, np.zeros((1, self.m))])
        C = np.hstack([self.Cy, np.zeros((self.Cy.shape[0], 1))])
        track = TrackingSpec(C, **self.weights)
        spec = translate_tracking(track, (A, B), self.Np, k)
        dense = condense((A, B), spec)
        self.n_condense += 1
        self.solver = self.solver_factory()
        z0 = np.append(x, 1.0)
        sol = self.solver.solve(dense.problem(z0))
        return sol.u_star[:self.m].copy(), sol


@dataclass
class ClosedLoopResult:
    t: np.ndarray
    y: np.ndarray
    u: np.ndarray
    x: np.ndarray
    solve_ms: np.ndarray
    qp_iters: np.ndarray
    status: list
    infeasible_step: Optional[int] = None

    @property
    def completed(self) -> bool:
        return self.infeasible_step is None

    def write_csv(self, path):
        """Header ``step,t,y...,u...,solve_ms,qp_iters,status``."""
        ny = self.y.shape[0]
        m = self.u.shape[0]
        cols = (["step", "t"] + [f"y{i}" for i in range(ny)]
                + [f"u{i}" for i in range(m)]
                + ["solve_ms", "qp_iters", "status"])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(len(self.status)):
                vals = [str(k), repr(float(self.t[k]))]
                vals += [repr(float(v)) for v in self.y[:, k]]
                vals += [repr(float(v)) for v in self.u[:, k]]
                vals += [repr(float(self.solve_ms[k])),
                         str(int(self.qp_iters[k])), self.status[k]]
                fh.write(",".join(vals) + "\n")


def closed_loop(plant_step: Callable, controller, x0, steps: int, Ts: float,
                measure: Callable = None, clock=time.perf_counter
                ) -> ClosedLoopResult:
    """Receding-horizon simulation.

    Each step measures the plant, asks ``controller.control(k, y)`` for an
    input (the first block of the optimal sequence) and advances the plant.
    A run stops at the first infeasible QP.
    """
    measure = measure or (lambda x: np.asarray(x, dtype=float))
    x = np.asarray(x0, dtype=float)
    xs, ys, us, ms, its, status = [x], [], [], [], [], []
    infeasible = None
    for k in range(steps):
        y = np.atleast_1d(measure(x))
        t0 = clock()
        feedback = y if getattr(controller, "feedback", "state") == \
            "output" else x
        u, sol = controller.control(k, feedback)
        ms.append(1e3 * (clock() - t0))
        ys.append(y)
        its.append(sol.iterations)
        if sol.status == INFEASIBLE:
            status.append(f"infeasible at step {k}")
            us.append(np.full(np.size(u), np.nan))
            infeasible = k
            log.info("QP infeasible at step %d", k)
            break
        status.append(sol.status)
        us.append(u)
        x = plant_step(x, u)
        xs.append(x)
    n_log = len(status)
    return ClosedLoopResult(
        t=Ts * np.arange(n_log), y=np.array(ys).T.reshape(-1, n_log),
        u=np.array(us).T.reshape(-1, n_log), x=np.array(xs).T,
        solve_ms=np.array(ms), qp_iters=np.array(its), status=status,
        infeasible_step=infeasible)
