"""Prediction with lifted linear models and the classical comparators.

Three families of open-loop predictors are provided:

* the lifted predictor ``z+ = Az + Bu, x = Cz`` started from ``z0 = psi(x0)``;
* local linearization of a discrete map about a fixed point ``x_lin``;
* truncated Carleman linearization of a polynomial vector field.

:func:`compare_predictors` runs any of them against a reference simulator on
seeded random initial conditions and reports the relative RMSE.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .dynamics import BLOWUP, rk4_step

log = logging.getLogger(__name__)

SATURATION = 1e30


@dataclass
class Trajectory:
    """Sampled trajectory: ``values[:, k]`` at time ``k * Ts``.

    ``inputs`` has one column fewer than ``values``.
    """

    values: np.ndarray
    inputs: np.ndarray
    Ts: float

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if not self.Ts > 0:
            raise ValueError("Ts must be positive")
        if self.inputs.shape[1] != self.values.shape[1] - 1:
            raise ValueError("need exactly one input per transition")

    @property
    def times(self) -> np.ndarray:
        return self.Ts * np.arange(self.values.shape[1])

    def __len__(self):
        return self.values.shape[1]


def rmse(predicted, truth) -> float:
    """Relative root-mean-square error in percent.

    ``100 * sqrt(sum_k |p_k - t_k|^2) / sqrt(sum_k |t_k|^2)`` over aligned
    samples (columns).

    Parameters
    ----------
    predicted, truth : Trajectory or array_like, shape (n, T)

    Raises
    ------
    ValueError
        If shapes differ or the truth is identically zero.
    """
    p = predicted.values if isinstance(predicted, Trajectory) else predicted
    t = truth.values if isinstance(truth, Trajectory) else truth
    p = np.atleast_2d(np.asarray(p, dtype=float))
    t = np.atleast_2d(np.asarray(t, dtype=float))
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    den = np.sqrt(np.sum(t * t))
    if den == 0:
        raise ValueError("RMSE undefined for an all-zero truth")
    return float(100.0 * np.sqrt(np.sum((p - t) ** 2)) / den)


def _inputs(u_seq, m=None):
    u = np.asarray(u_seq, dtype=float)
    if u.ndim == 1:
        u = u[None, :] if m in (None, 1) else u.reshape(m, -1)
    if not np.all(np.isfinite(u)):
        raise ValueError("input sequence must be finite")
    return u


def rollout_z(A, B, z0, u_seq) -> np.ndarray:
    """Lifted states ``z_0..z_T`` of ``z+ = Az + Bu`` as columns."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    u = _inputs(u_seq, B.shape[1])
    if u.shape[0] != B.shape[1]:
        raise ValueError("input dimension does not match B")
    Z = np.empty((A.shape[0], u.shape[1] + 1))
    Z[:, 0] = z0
    for k in range(u.shape[1]):
        Z[:, k + 1] = A @ Z[:, k] + B @ u[:, k]
    return Z


def rollout_lifted(model, x0, u_seq) -> np.ndarray:
    """Predicted outputs ``C z_k`` with ``z_0 = psi(x0)``.

    Returns an array of shape ``(n, T + 1)``.  For a delay model ``x0`` is
    the initial delay vector.
    """
    Z = rollout_z(model.A, model.B, model.lift(x0), u_seq)
    return model.C @ Z


def local_linearization(f, x, u, eps=1e-6):
    """Central-difference Jacobians of the discrete map ``f`` at ``(x, u)``.

    Returns ``(f(x, u), Jx, Ju)``; the step in coordinate ``j`` is
    ``eps * (1 + |x_j|)``.
    """
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    f0 = np.asarray(f(x, u), dtype=float)
    n, m = x.size, u.size
    Jx = np.empty((f0.size, n))
    Ju = np.empty((f0.size, m))
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(n):
            h = eps * (1.0 + abs(x[j]))
            e = np.zeros(n)
            e[j] = h
            Jx[:, j] = (f(x + e, u) - f(x - e, u)) / (2 * h)
        for j in range(m):
            h = eps * (1.0 + abs(u[j]))
            e = np.zeros(m)
            e[j] = h
            Ju[:, j] = (f(x, u + e) - f(x, u - e)) / (2 * h)
    if not (np.all(np.isfinite(Jx)) and np.all(np.isfinite(Ju))):
        raise FloatingPointError("non-finite Jacobian")
    return f0, Jx, Ju


def local_linearization_predictor(f_discrete, x_lin, x0, u_seq,
                                  output=None) -> np.ndarray:
    """Roll out ``x+ = f(x_lin, 0) + Jx (x - x_lin) + Ju u`` from ``x0``.

    Values are clamped to ``+-1e30`` so that divergent rollouts stay finite.
    ``output`` optionally maps the predicted states to outputs.
    """
    x_lin = np.asarray(x_lin, dtype=float)
    u = _inputs(u_seq)
    f0, Jx, Ju = local_linearization(f_discrete, x_lin, np.zeros(u.shape[0]))
    X = np.empty((x_lin.size, u.shape[1] + 1))
    X[:, 0] = x0
    offset = f0 - Jx @ x_lin
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(u.shape[1]):
            X[:, k + 1] = np.clip(offset + Jx @ X[:, k] + Ju @ u[:, k],
                                  -SATURATION, SATURATION)
    return X if output is None else output(X)


# -- Carleman linearization -------------------------------------------------

def monomial_exponents(n: int, degree: int, constant_last=True) -> list:
    """All multi-indices of total degree ``<= degree`` in graded order.

    Degree-one monomials come first in coordinate order, so the first ``n``
    entries are the state itself.
    """
    out = []
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), d):
            a = [0] * n
            for i in combo:
                a[i] += 1
            out.append(tuple(a))
    const = (0,) * n
    return out + [const] if constant_last else [const] + out


@dataclass
class CarlemanModel:
    """Truncated Carleman system ``zdot = G z + B u`` on monomials."""

    degree: int
    exponents: list
    generator: np.ndarray
    B: np.ndarray

    @property
    def size(self) -> int:
        return len(self.exponents)

    @property
    def n(self) -> int:
        return len(self.exponents[0])

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        return np.array([np.prod(x ** np.array(a)) for a in self.exponents])

    def predict(self, x0, u_seq, Ts) -> tuple:
        """RK4 rollout at ``Ts``; returns ``(states, saturated)``.

        Components are clamped to ``+-1e30`` after each step.  ``saturated``
        reports divergence: some predicted state left ``+-BLOWUP``, the
        threshold at which data campaigns abandon a trajectory.
        """
        u = _inputs(u_seq, self.B.shape[1])
        G, B = self.generator, self.B

        def rhs(z, uk):
            return G @ z + B @ uk

        z = self.lift(x0)
        X = np.empty((self.n, u.shape[1] + 1))
        X[:, 0] = z[:self.n]
        saturated = False
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(u.shape[1]):
                z = rk4_step(rhs, z, u[:, k], Ts, check=False)
                z = np.nan_to_num(z, nan=SATURATION, posinf=SATURATION,
                                  neginf=-SATURATION)
                if np.any(np.abs(z) >= SATURATION):
                    saturated = True
                    z = np.clip(z, -SATURATION, SATURATION)
                X[:, k + 1] = z[:self.n]
        saturated = saturated or bool(np.any(np.abs(X) >= BLOWUP))
        return X, saturated


def build_carleman(poly, degree: int, input_channel: Optional[int] = None,
                   m: int = 1) -> CarlemanModel:
    """Carleman linearization of a polynomial drift with additive input.

    Parameters
    ----------
    poly : sequence of dict
        ``poly[j]`` maps exponent tuples to coefficients of ``xdot_j``.
    degree : int
        Truncation degree; products above it are discarded.
    input_channel : int, optional
        State component the (scalar) input enters.  ``B`` is the unit vector
        on the lifted coordinate of that monomial and nothing else.

    Returns
    -------
    CarlemanModel
        With ``C(n + d, d)`` lifted coordinates, the constant monomial last.
    """
    if degree < 1:
        raise ValueError("degree must be at least 1")
    n = len(poly)
    for comp in poly:
        for a in comp:
            if len(a) != n or any(int(e) != e or e < 0 for e in a):
                raise ValueError("poly must hold nonnegative integer "
                                 "exponents of length n")
    exps = monomial_exponents(n, degree)
    index = {a: i for i, a in enumerate(exps)}
    G = np.zeros((len(exps), len(exps)))
    for row, a in enumerate(exps):
        for j in range(n):
            if a[j] == 0:
                continue
            for beta, coef in poly[j].items():
                tgt = tuple(a[i] - (i == j) + beta[i] for i in range(n))
                if sum(tgt) <= degree:
                    G[row, index[tgt]] += a[j] * coef
    B = np.zeros((len(exps), m))
    if input_channel is not None:
        e = [0] * n
        e[input_channel] = 1
        B[index[tuple(e)], 0] = 1.0
    return CarlemanModel(degree, exps, G, B)


# -- forcing signals ---------------------------------------------------------

def square_wave(steps: int, Ts: float, period: float = 0.3,
                amplitude: float = 1.0) -> np.ndarray:
    """Square wave starting at ``+amplitude``; returns shape ``(1, steps)``."""
    half = int(round(period / (2 * Ts)))
    if half < 1:
        raise ValueError("period too short for the sampling time")
    k = np.arange(steps)
    return amplitude * np.where((k // half) % 2 == 0, 1.0, -1.0)[None, :]


def prbs(rng: np.random.Generator, steps: int, m: int = 1,
         switch_prob: float = 0.5) -> np.ndarray:
    """Pseudo-random binary sequence with values in ``{-1, 1}``.

    The level flips at each step with probability ``switch_prob``.
    """
    flips = rng.random((m, steps)) < switch_prob
    flips[:, 0] = False
    start = np.where(rng.random((m, 1)) < 0.5, -1.0, 1.0)
    parity = np.cumsum(flips, axis=1) % 2
    return start * np.where(parity == 0, 1.0, -1.0)


# -- comparison harness ------------------------------------------------------

@dataclass
class Trial:
    """One comparison trial: initial condition, input, true trajectory."""

    index: int
    x0: np.ndarray
    u: np.ndarray
    truth: np.ndarray
    context: dict = field(default_factory=dict)


@dataclass
class Comparison:
    names: list
    rmse: Dict[str, np.ndarray]
    saturated: Dict[str, np.ndarray]
    failed: Dict[str, np.ndarray]

    def mean(self, name) -> float:
        vals = self.rmse[name][~self.failed[name]]
        return float(np.mean(vals)) if vals.size else float("nan")

    def summary(self) -> Dict[str, float]:
        return {k: self.mean(k) for k in self.names}

    def write_csv(self, trials_path, summary_path=None):
        with open(trials_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["predictor", "trial", "rmse_percent"])
            for name in self.names:
                for i, v in enumerate(self.rmse[name]):
                    w.writerow([name, i, repr(float(v))])
        if summary_path is not None:
            with open(summary_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["predictor", "mean_rmse_percent"])
                for name in self.names:
                    w.writerow([name, repr(self.mean(name))])


def compare_predictors(trials: Sequence[Trial],
                       predictors: Dict[str, Callable]) -> Comparison:
    """Evaluate each predictor on every trial.

    A predictor is called as ``pred(trial)`` and returns either an array
    shaped like ``trial.truth`` or a pair ``(array, saturated)``.  Exceptions
    from a predictor mark that trial as failed (RMSE ``nan``) and are logged.
    """
    names = list(predictors)
    T = len(trials)
    res = {k: np.full(T, np.nan) for k in names}
    sat = {k: np.zeros(T, dtype=bool) for k in names}
    fail = {k: np.zeros(T, dtype=bool) for k in names}
    for i, trial in enumerate(trials):
        for name, pred in predictors.items():
            try:
                out = pred(trial)
                if isinstance(out, tuple):
                    out, sat[name][i] = out
                res[name][i] = rmse(out, trial.truth)
            except (FloatingPointError, ValueError, np.linalg.LinAlgError
                    ) as exc:
                fail[name][i] = True
                log.warning("predictor %s failed on trial %d: %s", name, i,
                            exc)
    return Comparison(names, res, sat, fail)


def simulate(f_discrete, x0, u_seq, output=None) -> np.ndarray:
    """Reference trajectory of a discrete map; columns ``x_0..x_T``."""
    u = _inputs(u_seq)
    x = np.asarray(x0, dtype=float)
    X = np.empty((x.size, u.shape[1] + 1))
    X[:, 0] = x
    for k in range(u.shape[1]):
        x = f_discrete(x, u[:, k])
        X[:, k + 1] = x
    return X if output is None else output(X)
