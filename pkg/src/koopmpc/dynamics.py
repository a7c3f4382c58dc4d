"""Benchmark systems, fixed-step integrators and data-collection campaigns.

All state arrays follow the one-sample-per-column convention: a state batch
has shape ``(n, B)`` and an input batch ``(m, B)``.  Right-hand sides also
accept plain 1-D vectors.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .edmd import DataSet

log = logging.getLogger(__name__)

BLOWUP = 1e6


class IntegrationError(FloatingPointError):
    """Raised when an integrator produces non-finite values."""


@dataclass(frozen=True)
class OdeSystem:
    """Continuous-time controlled system ``xdot = rhs(x, u)``."""

    name: str
    n: int
    m: int
    rhs: Callable
    input_box: tuple
    state_box: tuple
    output: Optional[Callable] = None
    n_out: int = 0

    def measure(self, x):
        x = np.asarray(x, dtype=float)
        return x if self.output is None else self.output(x)


def rk4_step(rhs, x, u, Ts, check=True):
    """Classical Runge-Kutta 4 step with zero-order-hold input.

    ``rhs`` may be an :class:`OdeSystem` or a callable ``(x, u) -> xdot``.
    """
    if Ts <= 0:
        raise ValueError("Ts must be positive")
    f = rhs.rhs if isinstance(rhs, OdeSystem) else rhs
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = f(x, u)
    k2 = f(x + 0.5 * Ts * k1, u)
    k3 = f(x + 0.5 * Ts * k2, u)
    k4 = f(x + Ts * k3, u)
    xn = x + (Ts / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if check and not np.all(np.isfinite(xn)):
        raise IntegrationError("non-finite state in RK4 step")
    return xn


def discretize(system: OdeSystem, Ts: float):
    """Return the RK4 transition map ``f(x, u)`` of ``system``."""
    def f(x, u):
        return rk4_step(system, x, u, Ts, check=False)
    return f


# -- forced Van der Pol ----------------------------------------------------

def vdp_rhs(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    u0 = u[0] if u.ndim == x.ndim else u
    x1, x2 = x[0], x[1]
    return np.stack([2.0 * x2, -0.8 * x1 + 2.0 * x2 - 10.0 * x1 ** 2 * x2 + u0])


VAN_DER_POL = OdeSystem("vdp", 2, 1, vdp_rhs,
                        input_box=((-1.0, 1.0),),
                        state_box=((-1.0, 1.0), (-1.0, 1.0)))

# Polynomial form of the drift for Carleman: per component {exponents: coeff}.
VDP_POLY = (
    {(0, 1): 2.0},
    {(1, 0): -0.8, (0, 1): 2.0, (2, 1): -10.0},
)


# -- bilinear DC motor ------------------------------------------------------

MOTOR_PARAMS = dict(La=0.314, Ra=12.345, km=0.253, J=0.00441, B=0.00732,
                    tau_l=1.47, ua=60.0)
MOTOR_INPUT_SCALE = 4.0


def motor_rhs(x, u, p=MOTOR_PARAMS):
    """Bilinear motor with the input scaled from [-1, 1] to [-4, 4].

    Returns ``(xdot, y)`` with ``y = x2`` the angular velocity.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    u0 = (u[0] if u.ndim == x.ndim else u) * MOTOR_INPUT_SCALE
    x1, x2 = x[0], x[1]
    dx1 = -(p["Ra"] / p["La"]) * x1 - (p["km"] / p["La"]) * x2 * u0 \
        + p["ua"] / p["La"]
    dx2 = -(p["B"] / p["J"]) * x2 + (p["km"] / p["J"]) * x1 * u0 \
        - p["tau_l"] / p["J"]
    return np.stack([dx1, dx2]), x2


def motor_output(x):
    return np.asarray(x, dtype=float)[1:2]


MOTOR = OdeSystem("motor", 2, 1, lambda x, u: motor_rhs(x, u)[0],
                  input_box=((-1.0, 1.0),),
                  state_box=((-1.0, 1.0), (-1.0, 1.0)),
                  output=motor_output, n_out=1)

SYSTEMS = {"vdp": VAN_DER_POL, "motor": MOTOR}


# -- Korteweg-de Vries ------------------------------------------------------

class KdvModel:
    """Periodic KdV ``y_t + y y_x + y_xxx = sum_i u_i v_i`` on [-pi, pi).

    Split-step integrator: RK4 half step of the nonlinear advection plus
    forcing, exact spectral step of the dispersion, another RK4 half step.
    Products are dealiased with the 2/3 rule.
    """

    def __init__(self, n: int = 128, dt: float = 0.01,
                 centers=(-np.pi / 2, 0.0, np.pi / 2), width: float = 25.0):
        if n < 4 or n % 2:
            raise ValueError("grid size must be even and at least 4")
        self.n = n
        self.dt = dt
        self.x = -np.pi + 2 * np.pi * np.arange(n) / n
        self.k = np.fft.rfftfreq(n, d=1.0 / n)
        self._ik = 1j * self.k
        self._ik[-1] = 0.0  # Nyquist mode has no odd derivative
        self._dealias = self.k < n / 3.0
        self._disp = np.exp(1j * self.k ** 3 * dt)
        self._disp[-1] = 1.0  # keeps the step unitary after irfft
        self.profiles = np.exp(-width * (self.x[None, :] - np.asarray(
            centers)[:, None]) ** 2)
        self.m = len(centers)

    def derivative(self, y):
        return np.fft.irfft(self._ik * np.fft.rfft(y, axis=-1), n=self.n,
                            axis=-1)

    def _nonlinear(self, y, forcing):
        y2 = np.fft.rfft(y * y, axis=-1) * self._dealias
        return -0.5 * np.fft.irfft(self._ik * y2, n=self.n, axis=-1) + forcing

    def _half_step(self, y, forcing):
        h = 0.5 * self.dt
        k1 = self._nonlinear(y, forcing)
        k2 = self._nonlinear(y + 0.5 * h * k1, forcing)
        k3 = self._nonlinear(y + 0.5 * h * k2, forcing)
        k4 = self._nonlinear(y + h * k3, forcing)
        return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def linear_step(self, y):
        """Exact dispersion step; unitary on the spectrum."""
        return np.fft.irfft(self._disp * np.fft.rfft(y, axis=-1), n=self.n,
                            axis=-1)

    def step(self, y, u, check=True):
        """Advance one ``dt``.

        ``y`` has shape ``(n,)`` or ``(B, n)`` (grid along the last axis) and
        ``u`` shape ``(m,)`` or ``(B, m)``.
        """
        y = np.asarray(y, dtype=float)
        u = np.asarray(u, dtype=float)
        forcing = u @ self.profiles
        y = self._half_step(y, forcing)
        y = self.linear_step(y)
        y = self._half_step(y, forcing)
        if check and not np.all(np.isfinite(y)):
            raise IntegrationError("KdV solution blew up")
        return y

    def initial_profiles(self):
        x = self.x
        return np.stack([np.exp(-(x - np.pi / 2) ** 2),
                         -np.sin(x / 2) ** 2,
                         np.exp(-(x + np.pi / 2) ** 2)])


_DEFAULT_KDV = None


def kdv_step(y, u, dt=0.01):
    """One split step on the default 128-point grid."""
    global _DEFAULT_KDV
    if _DEFAULT_KDV is None or _DEFAULT_KDV.n != np.shape(y)[-1] \
            or _DEFAULT_KDV.dt != dt:
        _DEFAULT_KDV = KdvModel(np.shape(y)[-1], dt)
    return _DEFAULT_KDV.step(y, u)


# -- campaigns --------------------------------------------------------------

@dataclass(frozen=True)
class CampaignSpec:
    """Random-input data campaign.

    Each trajectory ``j`` draws its initial condition and inputs from its own
    generator seeded with ``(seed, j)``, so results do not depend on how
    trajectories are scheduled.
    """

    n_traj: int = 200
    steps: int = 1000
    Ts: float = 0.01
    seed: int = 0
    init_box: Optional[tuple] = None
    input_box: Optional[tuple] = None

    def __post_init__(self):
        if self.n_traj < 1 or self.steps < 1 or not self.Ts > 0:
            raise ValueError("campaign sizes and Ts must be positive")


def _box(box):
    box = np.atleast_2d(np.asarray(box, dtype=float))
    return box[:, 0], box[:, 1]


def _traj_rng(seed, j):
    return np.random.default_rng([int(seed), int(j)])


def simulate_campaign(step, n_traj, steps, seed, draw_x0, draw_u):
    """Run ``n_traj`` batched trajectories; returns states and inputs.

    Returns ``xs`` of shape ``(steps + 1, n, B)``, ``us`` ``(steps, m, B)``
    and the boolean mask of trajectories that stayed bounded.
    """
    rngs = [_traj_rng(seed, j) for j in range(n_traj)]
    x0 = np.stack([draw_x0(r) for r in rngs], axis=1)
    us = np.stack([draw_u(r, steps) for r in rngs], axis=2)  # (steps, m, B)
    xs = np.empty((steps + 1,) + x0.shape)
    xs[0] = x0
    ok = np.ones(n_traj, dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(steps):
            xs[k + 1] = step(xs[k], us[k])
            bad = ~np.all(np.isfinite(xs[k + 1]) & (np.abs(xs[k + 1]) <= BLOWUP),
                          axis=0)
            if bad.any():
                ok &= ~bad
                xs[k + 1][:, bad] = 0.0
    for j in np.flatnonzero(~ok):
        log.warning("trajectory %d blew up and was dropped", j)
    return xs, us, ok


def _assemble(xs, us, ok):
    steps = us.shape[0]
    keep = np.flatnonzero(ok)
    # columns ordered by (trajectory, step)
    X = xs[:-1][:, :, keep].transpose(1, 2, 0).reshape(xs.shape[1], -1)
    Y = xs[1:][:, :, keep].transpose(1, 2, 0).reshape(xs.shape[1], -1)
    U = us[:, :, keep].transpose(1, 2, 0).reshape(us.shape[1], -1)
    traj = np.repeat(keep, steps)
    step = np.tile(np.arange(steps), keep.size)
    return DataSet(X, Y, U, traj=traj, step=step)


def collect_data(system: OdeSystem, spec: CampaignSpec = CampaignSpec()):
    """Random-input campaign on an ODE system discretized with RK4.

    Initial states are uniform on ``spec.init_box`` (default: the system's
    state box) and inputs are uniform per step on the input box.
    """
    lo, hi = _box(spec.init_box or system.state_box)
    ulo, uhi = _box(spec.input_box or system.input_box)
    xs, us, ok = simulate_campaign(
        lambda x, u: rk4_step(system, x, u, spec.Ts, check=False),
        spec.n_traj, spec.steps, spec.seed,
        lambda r: lo + (hi - lo) * r.random(system.n),
        lambda r, s: ulo + (uhi - ulo) * r.random((s, system.m)))
    return _assemble(xs, us, ok)


def collect_kdv_data(model: KdvModel, spec: CampaignSpec):
    """KdV campaign from random convex combinations of the three profiles."""
    if abs(spec.Ts - model.dt) > 1e-15:
        raise ValueError("campaign Ts must equal the KdV model dt")
    prof = model.initial_profiles()

    def step(x, u):
        return model.step(x.T, u.T, check=False).T

    xs, us, ok = simulate_campaign(
        step, spec.n_traj, spec.steps, spec.seed,
        lambda r: r.dirichlet(np.ones(3)) @ prof,
        lambda r, s: -1.0 + 2.0 * r.random((s, model.m)))
    return _assemble(xs, us, ok)


def delay_embed(data: DataSet, n_d: int, output=None) -> DataSet:
    """Turn a trajectory campaign into delay-embedded samples.

    Requires ``traj``/``step`` labels with consecutive steps.  For each
    trajectory with outputs ``y_0..y_T`` and inputs ``u_0..u_{T-1}`` this
    emits ``zeta_k = [y_k, u_{k-1}, y_{k-1}, ..., u_{k-n_d}, y_{k-n_d}]`` for
    ``k = n_d..T-1`` with successor ``zeta_{k+1}`` and input ``u_k``.
    """
    if data.traj is None or data.step is None:
        raise ValueError("delay embedding needs trajectory labels")
    out_fn = (lambda x: x) if output is None else output
    Xs, Ys, Us, trs, sts = [], [], [], [], []
    for j in np.unique(data.traj):
        cols = np.flatnonzero(data.traj == j)
        cols = cols[np.argsort(data.step[cols])]
        if np.any(np.diff(data.step[cols]) != 1):
            raise ValueError(f"trajectory {j} has non-consecutive steps")
        T = cols.size
        if T <= n_d:
            continue
        ys = np.concatenate([out_fn(data.X[:, cols]),
                             out_fn(data.Y[:, cols[-1:]])], axis=1)
        us = data.U[:, cols]
        parts = [ys[:, n_d:T + 1]]
        for i in range(1, n_d + 1):
            parts.append(us[:, n_d - i:T + 1 - i])
            parts.append(ys[:, n_d - i:T + 1 - i])
        zeta = np.concatenate(parts, axis=0)  # columns k = n_d..T
        Xs.append(zeta[:, :-1])
        Ys.append(zeta[:, 1:])
        Us.append(us[:, n_d:T])
        trs.append(np.full(T - n_d, j))
        sts.append(np.arange(n_d, T))
    return DataSet(np.concatenate(Xs, axis=1), np.concatenate(Ys, axis=1),
                   np.concatenate(Us, axis=1), traj=np.concatenate(trs),
                   step=np.concatenate(sts))


# -- dataset files ----------------------------------------------------------

MAGIC = b"KMPCDATA"
BINARY_VERSION = 1


def _blocks(data: DataSet):
    blocks = [("X", data.X), ("Y", data.Y), ("U", data.U)]
    if data.W is not None:
        blocks.append(("W", data.W))
    return blocks


def write_dataset_csv(data: DataSet, path):
    """Long format: one row per scalar, header ``kind,traj,step,idx,value``."""
    traj, step = data.labels()
    with open(path, "w", newline="") as fh:
        fh.write("kind,traj,step,idx,value\n")
        for kind, M in _blocks(data):
            for j in range(data.K):
                t, s = int(traj[j]), int(step[j])
                fh.write("".join(f"{kind},{t},{s},{i},{float(M[i, j])!r}\n"
                                 for i in range(M.shape[0])))


def read_dataset_csv(path) -> DataSet:
    rows = {}
    labels = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["kind", "traj", "step", "idx", "value"]:
            raise ValueError(f"{path}: not a dataset CSV")
        for rec in reader:
            if len(rec) != 5:
                raise ValueError(f"{path}: malformed row {rec!r}")
            kind, t, s, i, v = rec
            key = (int(t), int(s))
            labels.setdefault(key, len(labels))
            rows.setdefault(kind, []).append((labels[key], int(i), float(v)))
    if not {"X", "Y", "U"} <= rows.keys():
        raise ValueError(f"{path}: missing X, Y or U block")
    K = len(labels)
    mats = {}
    for kind, recs in rows.items():
        arr = np.array(recs)
        dim = int(arr[:, 1].max()) + 1
        M = np.full((dim, K), np.nan)
        M[arr[:, 1].astype(int), arr[:, 0].astype(int)] = arr[:, 2]
        if np.isnan(M).any():
            raise ValueError(f"{path}: incomplete {kind} block")
        mats[kind] = M
    keys = sorted(labels, key=labels.get)
    traj = np.array([k[0] for k in keys])
    step = np.array([k[1] for k in keys])
    return DataSet(mats["X"], mats["Y"], mats["U"], mats.get("W"),
                   traj=traj, step=step)


def write_dataset_binary(data: DataSet, path):
    """Little-endian columnar layout.

    16-byte header: magic ``KMPCDATA``, uint32 version, uint32 flags (bit 0:
    W present).  Then uint64 ``n, m, n_w, K``, int64 traj and step labels, and
    float64 blocks X, Y, U[, W] each stored row-major.
    """
    traj, step = data.labels()
    has_w = data.W is not None
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", BINARY_VERSION, int(has_w)))
        fh.write(struct.pack("<4Q", data.n, data.m,
                             data.W.shape[0] if has_w else 0, data.K))
        fh.write(np.asarray(traj, dtype="<i8").tobytes())
        fh.write(np.asarray(step, dtype="<i8").tobytes())
        for _, M in _blocks(data):
            fh.write(np.ascontiguousarray(M, dtype="<f8").tobytes())


def read_dataset_binary(path) -> DataSet:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 48 or buf[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic header")
    version, flags = struct.unpack_from("<II", buf, 8)
    if version != BINARY_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    n, m, n_w, K = struct.unpack_from("<4Q", buf, 16)
    off = 48
    need = off + 16 * K + 8 * K * (2 * n + m + n_w)
    if len(buf) != need:
        raise ValueError(f"{path}: truncated or oversized file")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += 8 * count
        return arr.copy()

    traj = take(K, "<i8")
    step = take(K, "<i8")
    X = take(n * K, "<f8").reshape(n, K)
    Y = take(n * K, "<f8").reshape(n, K)
    U = take(m * K, "<f8").reshape(m, K)
    W = take(n_w * K, "<f8").reshape(n_w, K) if flags & 1 else None
    return DataSet(X, Y, U, W, traj=traj, step=step)


def write_dataset(data, path, fmt="csv"):
    if fmt == "csv":
        write_dataset_csv(data, path)
    elif fmt == "binary":
        write_dataset_binary(data, path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def read_dataset(path) -> DataSet:
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == MAGIC:
        return read_dataset_binary(path)
    return read_dataset_csv(path)
