"""Reference experiments: predictor comparisons and closed-loop scenarios.

Every function here is deterministic given its seeds.  The defaults are the
desk-scale settings used by the CLI and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dictionary import make_delay_vector, make_kdv_dictionary, \
    make_rbf_dictionary
from .dynamics import (MOTOR, VAN_DER_POL, VDP_POLY, CampaignSpec, KdvModel,
                       collect_data, collect_kdv_data, delay_embed,
                       discretize, motor_output)
from .edmd import fit_io_model, fit_model
from .mpc import ClosedLoopResult, KoopmanMpc, LinearizedMpc, TrackingSpec, \
    closed_loop
from .predictor import (Comparison, Trial, build_carleman, compare_predictors,
                        local_linearization_predictor, prbs, rollout_lifted,
                        simulate, square_wave)

TS = 0.01
VDP_HORIZON = 200        # 2 s of square-wave forcing
MOTOR_HORIZON = 100      # 1 s
TABLE2_SIZES = (5, 10, 25, 50, 75, 100)

MOTOR_NP = 100
MOTOR_Q = 1.0
MOTOR_R = 0.01
MOTOR_STEPS = 300
MOTOR_SCENARIOS = {
    1: dict(x0=(0.0, 0.6), y_bounds=None,
            reference={"piecewise": [[0.0, 0.5], [1.0, -0.5], [2.0, 0.0]]}),
    2: dict(x0=(-0.1, 0.1), y_bounds=(-0.4, 0.4),
            reference={"cosine": {"amplitude": 0.5, "period": 3.0}}),
}

KDV_NP = 10
KDV_STEPS = 800
KDV_REFERENCE = {"piecewise": [[0.0, 0.1], [2.0, 0.0], [4.0, -0.1],
                               [6.0, 0.0]]}


# -- references --------------------------------------------------------------

def make_reference(spec, Ts: float = TS, ny: int = 1):
    """Reference ``k -> y_r`` from a config mapping.

    ``{"piecewise": [[t0, v0], [t1, v1], ...]}`` holds ``v_i`` from time
    ``t_i`` on (``t0`` must be 0); ``{"cosine": {"amplitude": a, "period":
    T, "offset": c}}`` gives ``c + a cos(2 pi t / T)``; a bare number is a
    constant.  Values are broadcast to ``ny`` outputs.
    """
    if isinstance(spec, (int, float)):
        val = float(spec)
        return lambda k: np.full(ny, val)
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError("reference must be a number or a one-key mapping")
    (kind, args), = spec.items()
    if kind == "piecewise":
        pts = np.asarray(args, dtype=float).reshape(-1, 2)
        if pts[0, 0] != 0 or np.any(np.diff(pts[:, 0]) <= 0):
            raise ValueError("piecewise reference times must start at 0 "
                             "and increase")
        starts = np.round(pts[:, 0] / Ts).astype(int)
        vals = pts[:, 1]

        def ref(k):
            return np.full(ny, vals[np.searchsorted(starts, k, "right") - 1])
        return ref
    if kind == "cosine":
        unknown = set(args) - {"amplitude", "period", "offset"}
        if unknown:
            raise ValueError(f"unknown cosine keys {sorted(unknown)}")
        a = float(args.get("amplitude", 1.0))
        T = float(args["period"])
        c = float(args.get("offset", 0.0))
        return lambda k: np.full(ny, c + a * np.cos(2 * np.pi * k * Ts / T))
    raise ValueError(f"unknown reference kind {kind!r}")


def reference_steps(spec, Ts: float = TS):
    """Step indices and values of a piecewise-constant reference."""
    pts = np.asarray(spec["piecewise"], dtype=float).reshape(-1, 2)
    return np.round(pts[:, 0] / Ts).astype(int), pts[:, 1]


# -- Van der Pol -------------------------------------------------------------

def vdp_data(seed: int = 0, n_traj: int = 200, steps: int = 1000):
    return collect_data(VAN_DER_POL, CampaignSpec(n_traj, steps, TS, seed))


def vdp_model(data, n_rbf: int = 100, seed: int = 0):
    return fit_model(make_rbf_dictionary(2, n_rbf, seed=seed), data)


def vdp_trials(n_trials: int = 100, horizon: int = VDP_HORIZON,
               seed: int = 0):
    """Trials with ``x0 ~ U([-1, 1]^2)`` and the 0.3 s square wave."""
    f = discretize(VAN_DER_POL, TS)
    u = square_wave(horizon, TS, period=0.3)
    trials = []
    for i in range(n_trials):
        x0 = np.random.default_rng(seed + i).uniform(-1.0, 1.0, 2)
        trials.append(Trial(i, x0, u, simulate(f, x0, u)))
    return trials


def vdp_predictors(model=None, carleman_degree: int = 14):
    """Named predictors for the Van der Pol comparison."""
    f = discretize(VAN_DER_POL, TS)
    car = build_carleman(VDP_POLY, carleman_degree, input_channel=1)
    preds = {}
    if model is not None:
        preds["koopman"] = lambda t: rollout_lifted(model, t.x0, t.u)
    preds["local_linearization_x0"] = lambda t: \
        local_linearization_predictor(f, t.x0, t.x0, t.u)
    preds["local_linearization_0"] = lambda t: \
        local_linearization_predictor(f, np.zeros(2), t.x0, t.u)
    preds["carleman"] = lambda t: car.predict(t.x0, t.u, TS)
    return preds


def vdp_table1(data=None, n_trials: int = 100, horizon: int = VDP_HORIZON,
               seed: int = 0, n_rbf: int = 100):
    """Average RMSE of the four predictors; returns ``(comparison, model)``."""
    data = vdp_data(seed) if data is None else data
    model, _ = vdp_model(data, n_rbf, seed)
    trials = vdp_trials(n_trials, horizon, seed)
    return compare_predictors(trials, vdp_predictors(model)), model


def vdp_table2(data=None, sizes: Sequence[int] = TABLE2_SIZES,
               n_trials: int = 100, horizon: int = VDP_HORIZON,
               seed: int = 0) -> Comparison:
    """Koopman RMSE as a function of the number of RBFs."""
    data = vdp_data(seed) if data is None else data
    trials = vdp_trials(n_trials, horizon, seed)
    preds = {}
    for s in sizes:
        model, _ = vdp_model(data, s, seed)
        preds[f"koopman_{s}"] = (lambda mdl: lambda t: rollout_lifted(
            mdl, t.x0, t.u))(model)
    return compare_predictors(trials, preds)


# -- bilinear motor ----------------------------------------------------------

def motor_data(seed: int = 0, n_traj: int = 200, steps: int = 1000):
    return collect_data(MOTOR, CampaignSpec(n_traj, steps, TS, seed))


def motor_model(data=None, n_rbf: int = 100, seed: int = 0, n_d: int = 1):
    """Input-output predictor on ``zeta = [y_k, u_{k-1}, y_{k-1}]``."""
    data = motor_data(seed) if data is None else data
    io = delay_embed(data, n_d, output=motor_output)
    dim = (n_d + 1) + n_d
    return fit_io_model(make_rbf_dictionary(dim, n_rbf, seed=seed), io,
                        n_d, 1)


def motor_trials(n_trials: int = 100, horizon: int = MOTOR_HORIZON,
                 seed: int = 0):
    """PRBS trials.

    Each trial draws ``x_{-1} ~ U([-1, 1]^2)`` and a PRBS of ``horizon + 1``
    values; the first value drives ``x_{-1} -> x_0`` so that the delay vector
    at ``k = 0`` is made of genuine measurements.
    """
    f = discretize(MOTOR, TS)
    trials = []
    for i in range(n_trials):
        rng = np.random.default_rng(seed + i)
        x_prev = rng.uniform(-1.0, 1.0, 2)
        u_all = prbs(rng, horizon + 1)
        x0 = f(x_prev, u_all[:, 0])
        u = u_all[:, 1:]
        zeta = make_delay_vector([motor_output(x0), motor_output(x_prev)],
                                 [u_all[:, 0]]).values
        truth = simulate(f, x0, u, output=motor_output)
        trials.append(Trial(i, x0, u, truth, {"zeta": zeta}))
    return trials


def motor_table3(model=None, n_trials: int = 100,
                 horizon: int = MOTOR_HORIZON, seed: int = 0) -> Comparison:
    model = motor_model(seed=seed)[0] if model is None else model
    f = discretize(MOTOR, TS)
    preds = {
        "koopman": lambda t: rollout_lifted(model, t.context["zeta"], t.u),
        "local_linearization_x0": lambda t: local_linearization_predictor(
            f, t.x0, t.x0, t.u, output=motor_output),
    }
    return compare_predictors(motor_trials(n_trials, horizon, seed), preds)


def motor_track(scenario: dict, C, Q=MOTOR_Q, R=MOTOR_R):
    return TrackingSpec(C, Q, R, make_reference(scenario["reference"]),
                        u_bounds=scenario.get("u_bounds", (-1.0, 1.0)),
                        y_bounds=scenario.get("y_bounds"))


def motor_controller(kind: str, scenario: dict, model=None,
                     Np: int = MOTOR_NP, Q=MOTOR_Q, R=MOTOR_R):
    """K-MPC on the lifted model or L-MPC on the true dynamics."""
    if kind == "koopman":
        return KoopmanMpc(model, motor_track(scenario, np.eye(1, model.N),
                                             Q, R), Np)
    if kind == "linearized":
        weights = dict(Q=Q, R=R,
                       reference=make_reference(scenario["reference"]),
                       u_bounds=scenario.get("u_bounds", (-1.0, 1.0)),
                       y_bounds=scenario.get("y_bounds"))
        return LinearizedMpc(discretize(MOTOR, TS), 2, 1, [[0.0, 1.0]],
                             weights, Np)
    raise ValueError(f"unknown controller {kind!r}")


def motor_closed_loop(kind: str, scenario, model=None, steps=MOTOR_STEPS,
                      Np: int = MOTOR_NP, Q=MOTOR_Q, R=MOTOR_R):
    """Run one motor scenario; ``scenario`` is 1, 2 or a settings mapping."""
    sc = MOTOR_SCENARIOS[scenario] if isinstance(scenario, int) else scenario
    ctrl = motor_controller(kind, sc, model, Np, Q, R)
    res = closed_loop(discretize(MOTOR, TS), ctrl, sc["x0"], steps, TS,
                      measure=motor_output)
    return res, ctrl


# -- KdV ---------------------------------------------------------------------

def kdv_model(n_traj: int = 1000, steps: int = 200, seed: int = 0,
              kdv: Optional[KdvModel] = None):
    kdv = KdvModel() if kdv is None else kdv
    data = collect_kdv_data(kdv, CampaignSpec(n_traj, steps, kdv.dt, seed))
    return fit_model(make_kdv_dictionary(kdv.n), data)


def kdv_closed_loop(model, reference=None, steps: int = KDV_STEPS,
                    Np: int = KDV_NP, y0=None, kdv=None):
    """Track a constant-in-space reference with ``Q = I``, ``R = 0``.

    Starts from the flat profile ``y = 0`` unless ``y0`` is given.
    """
    kdv = KdvModel() if kdv is None else kdv
    n = kdv.n
    ref = make_reference(KDV_REFERENCE if reference is None else reference,
                         kdv.dt, n)
    track = TrackingSpec(model.C, np.eye(n), np.zeros((kdv.m, kdv.m)), ref,
                         u_bounds=(-1.0, 1.0))
    ctrl = KoopmanMpc(model, track, Np)
    y0 = np.zeros(n) if y0 is None else np.asarray(y0, dtype=float)
    res = closed_loop(lambda y, u: kdv.step(y, u), ctrl, y0, steps, kdv.dt)
    return res, ctrl


@dataclass
class StepCheck:
    start: int
    target: float
    magnitude: float
    error_after_1s: float

    @property
    def ok(self) -> bool:
        return self.error_after_1s <= 0.1 * self.magnitude


def step_tracking(res: ClosedLoopResult, reference=None, Ts: float = TS,
                  settle: float = 1.0):
    """Spatial-mean error one second after each reference step."""
    starts, vals = reference_steps(KDV_REFERENCE if reference is None
                                   else reference, Ts)
    mean = res.y.mean(axis=0)
    lag = int(round(settle / Ts))
    out = []
    prev = mean[0]
    for s, v in zip(starts, vals):
        k = min(s + lag, mean.size - 1)
        out.append(StepCheck(int(s), float(v), float(abs(v - prev)),
                             float(abs(mean[k] - v))))
        prev = v
    return out
