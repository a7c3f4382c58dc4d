"""Least-squares fitting of lifted linear predictors ``z+ = Az + Bu (+ Dw)``.

The regression is carried out through the Gram matrix of the stacked
regressors ``Z = [X_lift; U; W]`` so memory and cost of the solve do not grow
with the number of samples.  Lifting is done in fixed-size column chunks and
accumulated in a fixed order, so results are bit-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .dictionary import Dictionary

CHUNK = 8192
MODEL_HEADER = "koopman-model v1"


@dataclass
class DataSet:
    """Snapshot triple ``(X, Y, U)`` with optional disturbances ``W``.

    Columns are samples satisfying ``Y[:, j] = f(X[:, j], U[:, j])``; they
    need not come from a single trajectory.  ``traj``/``step`` are optional
    provenance labels.
    """

    X: np.ndarray
    Y: np.ndarray
    U: np.ndarray
    W: Optional[np.ndarray] = None
    traj: Optional[np.ndarray] = None
    step: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if self.W is not None:
            self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        K = self.X.shape[1]
        if K < 1:
            raise ValueError("a dataset needs at least one sample")
        if self.Y.shape != self.X.shape:
            raise ValueError("X and Y must have the same shape")
        for name, M in (("U", self.U), ("W", self.W)):
            if M is not None and M.shape[1] != K:
                raise ValueError(f"{name} must have {K} columns")
        for name in ("traj", "step"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                if v.shape != (K,):
                    raise ValueError(f"{name} labels must have length {K}")
                setattr(self, name, v)

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    def labels(self):
        traj = self.traj if self.traj is not None else np.zeros(self.K, int)
        step = self.step if self.step is not None else np.arange(self.K)
        return traj, step

    def subset(self, cols) -> "DataSet":
        cols = np.asarray(cols)
        return DataSet(self.X[:, cols], self.Y[:, cols], self.U[:, cols],
                       None if self.W is None else self.W[:, cols],
                       None if self.traj is None else self.traj[cols],
                       None if self.step is None else self.step[cols])

    def check_finite(self):
        for M in (self.X, self.Y, self.U, self.W):
            if M is not None and not np.all(np.isfinite(M)):
                raise ValueError("dataset contains non-finite values")


@dataclass
class LiftedModel:
    """Lifted linear predictor with its dictionary.

    ``delay`` is ``None`` for full-state models and ``(n_d, n_h)`` for
    input-output models whose dictionary acts on delay vectors.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    dictionary: Dictionary
    D: Optional[np.ndarray] = None
    delay: Optional[tuple] = None

    def __post_init__(self):
        N = self.dictionary.N
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(N, -1)
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if self.A.shape != (N, N):
            raise ValueError(f"A must be {N}x{N}")
        if self.C.shape[1] != N:
            raise ValueError(f"C must have {N} columns")
        if self.D is not None:
            self.D = np.asarray(self.D, dtype=float).reshape(N, -1)
        for M in (self.A, self.B, self.C, self.D):
            if M is not None and not np.all(np.isfinite(M)):
                raise ValueError("model matrices must be finite")

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def lift(self, x):
        return self.dictionary(x)


@dataclass
class FitReport:
    residual_lift: float
    residual_proj: float
    rank_deficient: bool
    regularization_used: float
    K: int = 0
    normal_eq_residual: float = 0.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> str:
        return (f"K={self.K} residual_lift={self.residual_lift:.6g} "
                f"residual_proj={self.residual_proj:.6g} "
                f"rank_deficient={self.rank_deficient} "
                f"ridge={self.regularization_used:.3g} "
                f"normal_eq_residual={self.normal_eq_residual:.3g}")


def lift_dataset(dictionary: Dictionary, data: DataSet):
    """Return ``(X_lift, Y_lift)`` with ``X_lift[:, j] = psi(x_j)``."""
    if dictionary.input_dim != data.n:
        raise ValueError(f"dictionary expects dimension "
                         f"{dictionary.input_dim}, data has {data.n}")
    return dictionary(data.X), dictionary(data.Y)


def normal_equation_data(X_lift, Y_lift, U, W=None):
    """Gram matrix ``G = Z Z^T`` and ``V = Y_lift Z^T`` for ``Z = [X_lift; U; W]``."""
    blocks = [np.atleast_2d(X_lift), np.atleast_2d(U)]
    if W is not None:
        blocks.append(np.atleast_2d(W))
    Z = np.vstack(blocks)
    Y_lift = np.atleast_2d(Y_lift)
    return Z @ Z.T, Y_lift @ Z.T


def _chunks(K, size=CHUNK):
    for start in range(0, K, size):
        yield slice(start, min(start + size, K))


def _accumulate(dictionary, data):
    """Chunked accumulation of the normal-equation data."""
    N = dictionary.N
    p = N + data.m + (0 if data.W is None else data.W.shape[0])
    G = np.zeros((p, p))
    V = np.zeros((N, p))
    XZ = np.zeros((data.n, N))
    for sl in _chunks(data.K):
        Xl = dictionary(data.X[:, sl])
        Yl = dictionary(data.Y[:, sl])
        W = None if data.W is None else data.W[:, sl]
        Gc, Vc = normal_equation_data(Xl, Yl, data.U[:, sl], W)
        G += Gc
        V += Vc
        XZ += data.X[:, sl] @ Xl.T
    return G, V, XZ


def _solve_gram(G, V, ridge):
    """Solve ``M G = V``; returns ``(M, rank_deficient)``.

    Cholesky when ``G (+ ridge I)`` is safely positive definite and the
    solve leaves a negligible residual, otherwise the
    minimum-norm solution from an SVD-based least-squares solve with the
    singular-value cutoff at machine precision.  Larger cutoffs were tried
    and leave a visible normal-equation residual on badly scaled RBF lifts.
    """
    p = G.shape[0]
    Gr = G + ridge * np.eye(p) if ridge > 0 else G
    try:
        cf = linalg.cho_factor(Gr, lower=True, check_finite=False)
        diag = np.diag(cf[0])
        if diag.min() > 1e-7 * diag.max():
            M = linalg.cho_solve(cf, V.T, check_finite=False).T
            # one refinement sweep against the unregularized system
            if ridge == 0:
                M += linalg.cho_solve(cf, (V - M @ G).T,
                                      check_finite=False).T
            # the pivot test misses near-collinear lifts; trust the residual
            if np.abs(V - M @ Gr).max(initial=0.0) <= \
                    1e-10 * (1.0 + np.abs(V).max(initial=0.0)):
                return M, False
    except linalg.LinAlgError:
        pass
    M = linalg.lstsq(Gr, V.T, check_finite=False)[0].T
    return M, ridge == 0


def _residuals(dictionary, data, M, C):
    N = dictionary.N
    r_lift = 0.0
    r_proj = 0.0
    for sl in _chunks(data.K):
        Xl = dictionary(data.X[:, sl])
        Yl = dictionary(data.Y[:, sl])
        blocks = [Xl, data.U[:, sl]]
        if data.W is not None:
            blocks.append(data.W[:, sl])
        R = Yl - M @ np.vstack(blocks)
        r_lift += float(np.sum(R * R))
        if C is not None:
            P = data.X[:, sl] - C @ Xl
            r_proj += float(np.sum(P * P))
    return np.sqrt(r_lift), np.sqrt(r_proj)


def fit_model(dictionary: Dictionary, data: DataSet,
              method: str = "normal_equations", ridge: float = 0.0):
    """Fit ``(A, B[, D])`` and ``C`` by least squares.

    Parameters
    ----------
    dictionary : Dictionary
        Lifting functions; ``input_dim`` must equal the data dimension.
    data : DataSet
        Snapshot data.  When ``W`` is present a disturbance matrix ``D`` is
        fitted as well.
    method : {'normal_equations', 'pseudoinverse'}
        Normal equations work on the ``(N+m) x (N+m)`` Gram matrix and are
        the default; the pseudoinverse route forms the full lifted data and
        truncates singular values below ``1e-12 * sigma_max``.
    ridge : float
        Optional Tikhonov weight added to the Gram matrix.

    Returns
    -------
    model : LiftedModel
    report : FitReport
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if dictionary.input_dim != data.n:
        raise ValueError(f"dictionary expects dimension "
                         f"{dictionary.input_dim}, data has {data.n}")
    data.check_finite()
    N, m = dictionary.N, data.m
    G, V, XZ = _accumulate(dictionary, data)
    if method == "normal_equations":
        M, deficient = _solve_gram(G, V, ridge)
    elif method == "pseudoinverse":
        X_lift, Y_lift = lift_dataset(dictionary, data)
        blocks = [X_lift, data.U] + ([] if data.W is None else [data.W])
        Z = np.vstack(blocks)
        if ridge > 0:
            Z = np.hstack([Z, np.sqrt(ridge) * np.eye(Z.shape[0])])
            Y_lift = np.hstack([Y_lift, np.zeros((N, Z.shape[0]))])
        s = linalg.svdvals(Z)
        rcond = 1e-12
        M = Y_lift @ np.linalg.pinv(Z, rcond=rcond)
        deficient = ridge == 0 and (Z.shape[1] < Z.shape[0]
                                    or s.min() <= rcond * s.max())
    else:
        raise ValueError(f"unknown method {method!r}")

    A, B = M[:, :N], M[:, N:N + m]
    D = M[:, N + m:] if data.W is not None else None
    if dictionary.includes_state_prefix:
        C = np.hstack([np.eye(data.n), np.zeros((data.n, N - data.n))])
    else:
        C, _ = _solve_gram(G[:N, :N], XZ, 0.0)
    r_lift, r_proj = _residuals(dictionary, data, M,
                                None if dictionary.includes_state_prefix
                                else C)
    ne = float(np.max(np.abs(V - M @ G))) if V.size else 0.0
    report = FitReport(r_lift, r_proj, bool(deficient), float(ridge),
                       K=data.K, normal_eq_residual=ne,
                       extra={"G": G, "V": V})
    return LiftedModel(A, B, C, dictionary, D), report


def fit_io_model(dictionary: Dictionary, io_data: DataSet, n_d: int,
                 n_h: int, method: str = "normal_equations",
                 ridge: float = 0.0):
    """Fit a predictor on delay vectors ``zeta`` (see ``delay_embed``).

    ``C`` regresses the newest output block ``zeta[:n_h]`` on the lifted
    delay vector; when the dictionary starts with the delay coordinates the
    solution is the selection ``[I, 0]``.
    """
    m = io_data.m
    if io_data.n != (n_d + 1) * n_h + n_d * m:
        raise ValueError("io data dimension does not match (n_d, n_h, m)")
    model, report = fit_model(dictionary, io_data, method, ridge)
    N = dictionary.N
    if dictionary.includes_state_prefix:
        C = np.hstack([np.eye(n_h), np.zeros((n_h, N - n_h))])
    else:
        G = report.extra["G"][:N, :N]
        YZ = np.zeros((n_h, N))
        for sl in _chunks(io_data.K):
            YZ += io_data.X[:n_h, sl] @ dictionary(io_data.X[:, sl]).T
        C, _ = _solve_gram(G, YZ, 0.0)
    return LiftedModel(model.A, model.B, C, dictionary, model.D,
                       delay=(n_d, n_h)), report


# -- model files ------------------------------------------------------------

def _matrix_text(M):
    rows = [", ".join(format(float(v), ".17g") for v in row)
            for row in np.atleast_2d(M)]
    return "[" + ", ".join("[" + r + "]" for r in rows) + "]"


def save_model(model: LiftedModel, path):
    """Write the ``koopman-model v1`` text format.

    First line is the header; the rest is a JSON document with fields
    ``n, m, N, n_w, input_dim, delay, dictionary, A, B, C[, D]``.  Matrices are
    row-major lists at 17 significant digits.
    """
    d = model.dictionary
    n_w = 0 if model.D is None else model.D.shape[1]
    head = {
        "n": model.n, "m": model.m, "N": model.N, "n_w": n_w,
        "input_dim": d.input_dim,
        "delay": None if model.delay is None else list(model.delay),
        "dictionary": d.to_records(),
    }
    body = json.dumps(head, indent=1)[:-2]
    mats = [("A", model.A), ("B", model.B), ("C", model.C)]
    if model.D is not None:
        mats.append(("D", model.D))
    body += "".join(f',\n "{k}": {_matrix_text(M)}' for k, M in mats)
    body += "\n}\n"
    with open(path, "w") as fh:
        fh.write(MODEL_HEADER + "\n" + body)


def load_model(path) -> LiftedModel:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != MODEL_HEADER:
            raise ValueError(f"{path}: not a {MODEL_HEADER} file")
        doc = json.loads(fh.read())
    d = Dictionary.from_records(doc["input_dim"], doc["dictionary"])
    N, m, n = doc["N"], doc["m"], doc["n"]
    A = np.array(doc["A"], dtype=float).reshape(N, N)
    B = np.array(doc["B"], dtype=float).reshape(N, m)
    C = np.array(doc["C"], dtype=float).reshape(n, N)
    D = None
    if doc.get("n_w"):
        D = np.array(doc["D"], dtype=float).reshape(N, doc["n_w"])
    delay = tuple(doc["delay"]) if doc.get("delay") else None
    return LiftedModel(A, B, C, d, D, delay=delay)
