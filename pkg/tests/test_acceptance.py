"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, collected in the pytest terminal
summary.  Full-size campaigns run here, so this module takes a few minutes.
"""

import time

import numpy as np
import pytest

from conftest import random_stable_system, report
from oracles import active_set_enumeration, random_strictly_convex_qp
from koopmpc import experiments as ex
from koopmpc.dictionary import identity_dictionary, make_rbf_dictionary
from koopmpc.dynamics import MOTOR, discretize, motor_output
from koopmpc.edmd import DataSet, fit_model
from koopmpc.mpc import (KoopmanMpc, MpcSpec, closed_loop, condense,
                         sparse_objective, sparse_problem)
from koopmpc.qp import OPTIMAL, QpProblem, QpSolver, kkt_check, solve_qp


class RecordingSolver(QpSolver):
    """QP solver that remembers which matrix objects it was handed."""

    def __init__(self, **kw):
        super().__init__(**kw)
        self.seen = []

    def solve(self, p, warm=None):
        self.seen.append((id(p.H), id(p.A_ineq)))
        return super().solve(p, warm)


@pytest.fixture(scope="module")
def table1(vdp_data):
    return ex.vdp_table1(vdp_data)


@pytest.fixture(scope="module")
def motor_scenario2(motor_fit):
    model, _ = motor_fit
    sc = ex.MOTOR_SCENARIOS[2]
    solver = RecordingSolver()
    ctrl = KoopmanMpc(model, ex.motor_track(sc, np.eye(1, model.N)),
                      ex.MOTOR_NP, solver=solver)
    dense_c = ctrl.dense.c
    res = closed_loop(discretize(MOTOR, ex.TS), ctrl, sc["x0"],
                      ex.MOTOR_STEPS, ex.TS, measure=motor_output)
    lin, _ = ex.motor_closed_loop("linearized", 2)
    return res, ctrl, dense_c, lin


@pytest.fixture(scope="module")
def kdv_run(kdv_fit):
    model, _ = kdv_fit
    return ex.kdv_closed_loop(model)


def test_criterion_1_vdp_table1(table1):
    comp, model = table1
    s = comp.summary()
    ok = (model.N == 102 and 15 <= s["koopman"] <= 40
          and s["local_linearization_0"] >= 300
          and s["local_linearization_x0"] >= 500
          and s["carleman"] >= 1e6 and comp.saturated["carleman"].any()
          and not any(comp.failed[k].any() for k in comp.names))
    detail = ", ".join(f"{k}={v:.4g}%" for k, v in s.items())
    assert report(1, "Van der Pol prediction table", ok, detail)


def test_criterion_2_rbf_count_trend(vdp_data):
    comp = ex.vdp_table2(vdp_data)
    s = comp.summary()
    ok = s["koopman_100"] * 1.5 <= s["koopman_5"]
    detail = ", ".join(f"{k.split('_')[1]}: {v:.3g}%" for k, v in s.items())
    assert report(2, "RMSE shrinks with the number of RBFs", ok, detail)


def test_criterion_3_motor_table3(motor_fit):
    model, _ = motor_fit
    comp = ex.motor_table3(model)
    k, ll = comp.mean("koopman"), comp.mean("local_linearization_x0")
    ok = 20 <= k <= 60 and k < ll
    assert report(3, "motor prediction table", ok,
                  f"koopman={k:.4g}%, local_linearization={ll:.4g}%")


@pytest.mark.xfail(strict=True, reason=(
    "with the literal motor parameters no admissible input keeps |y| <= 0.4 "
    "on the first step from x0 = (-0.1, 0.1); see the decisions ledger"))
def test_criterion_4_motor_output_constraint(motor_scenario2):
    res, _, _, lin = motor_scenario2
    k_ok = res.completed and len(res.status) == ex.MOTOR_STEPS
    max_y = float(np.abs(res.y).max())
    l_ok = not lin.completed
    ok = k_ok and max_y <= 0.4 + 1e-3 and l_ok
    detail = (f"K-MPC completed={k_ok}, max|y|={max_y:.4g}; "
              f"L-MPC infeasible at step {lin.infeasible_step}")
    assert report(4, "motor output-constrained tracking", ok, detail)


def test_criterion_5_condensation_oracle():
    t0 = time.perf_counter()
    worst_u = worst_f = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        N, m, Np = (int(r.integers(1, 7)), int(r.integers(1, 3)),
                    int(r.integers(1, 6)))
        A, B = random_stable_system(r, N, m)
        M = r.standard_normal((N, N))
        spec = MpcSpec.build(
            N, m, Np, Q=M @ M.T, R=0.1 * np.eye(m), q=r.standard_normal(N),
            r=r.standard_normal(m), E=np.vstack([np.zeros((2 * m, N)),
                                                 np.eye(N)[:1]]),
            F=np.vstack([np.eye(m), -np.eye(m), np.zeros((1, m))]),
            b=np.concatenate([np.ones(2 * m), [5.0]]))
        z0 = r.uniform(-1, 1, N)
        dense = condense((A, B), spec)
        a = solve_qp(dense.problem(z0))
        b = solve_qp(sparse_problem((A, B), spec, z0))
        assert a.status == OPTIMAL and b.status == OPTIMAL
        Ub = b.u_star[:m * Np]
        worst_u = max(worst_u, float(np.abs(a.u_star - Ub).max()))
        fa = dense.objective(a.u_star, z0)
        fb = sparse_objective((A, B), spec, z0, Ub)
        worst_f = max(worst_f, abs(fa - fb) / max(1.0, abs(fb)))
    elapsed = time.perf_counter() - t0
    ok = worst_u <= 1e-6 and worst_f <= 1e-8 and elapsed <= 10
    assert report(5, "dense and sparse MPC optima agree", ok,
                  f"max |dU|={worst_u:.2g}, max rel objective gap="
                  f"{worst_f:.2g}, {elapsed:.2f} s")


def test_criterion_6_exact_linear_recovery():
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        N, m = int(r.integers(1, 8)), int(r.integers(1, 4))
        A, B = random_stable_system(r, N, m)
        K = 10 * (N + m)
        X, U = r.standard_normal((N, K)), r.standard_normal((m, K))
        model, _ = fit_model(identity_dictionary(N),
                             DataSet(X, A @ X + B @ U, U))
        worst = max(worst, np.abs(model.A - A).max(),
                    np.abs(model.B - B).max())
    r = np.random.default_rng(99)
    X = r.uniform(-1, 1, (2, 300))
    U = r.uniform(-1, 1, (1, 300))
    d = make_rbf_dictionary(2, 10, seed=1)
    model, _ = fit_model(d, DataSet(X, np.tanh(X) + U, U))
    c_ok = np.array_equal(model.C, np.hstack([np.eye(2), np.zeros((2, 10))]))
    ok = worst <= 1e-8 and c_ok
    assert report(6, "exact recovery of linear systems", ok,
                  f"max parameter error={worst:.2g}, C=[I,0] exact={c_ok}")


def test_criterion_7_normal_equations(vdp_data, motor_fit, kdv_fit, table1):
    fits = {"vdp": ex.vdp_model(vdp_data)[1], "motor": motor_fit[1],
            "kdv": kdv_fit[1]}
    for seed in range(10):
        r = np.random.default_rng(seed)
        X = r.uniform(-1, 1, (2, 500))
        U = r.uniform(-1, 1, (1, 500))
        fits[f"random{seed}"] = fit_model(
            make_rbf_dictionary(2, 20, seed=seed),
            DataSet(X, np.vstack([X[1], -X[0] * X[1] ** 2 + U[0]]), U))[1]
    ratios = {}
    for name, rep in fits.items():
        G, V = rep.extra["G"], rep.extra["V"]
        ratios[name] = rep.normal_eq_residual / (1 + np.abs(V).max())
    ok = max(ratios.values()) <= 1e-8
    detail = ", ".join(f"{k}={v:.2g}" for k, v in ratios.items()
                       if not k.startswith("random"))
    worst_random = max(v for k, v in ratios.items() if k.startswith("random"))
    assert report(7, "normal equations hold on every fit", ok,
                  f"{detail}, worst random={worst_random:.2g}")


def test_criterion_8_qp_oracle():
    gap = kkt = 0.0
    for seed in range(200):
        r = np.random.default_rng(1000 + seed)
        d, nr = int(r.integers(1, 7)), int(r.integers(1, 11))
        H, g, A, b = random_strictly_convex_qp(r, d, nr)
        _, f_ref = active_set_enumeration(H, g, A, b)
        p = QpProblem(H, g, A, b)
        sol = solve_qp(p)
        gap = max(gap, abs(sol.objective - f_ref) / max(1.0, abs(f_ref)))
        kkt = max(kkt, kkt_check(p, sol).max())
    ok = gap <= 1e-8 and kkt <= 1e-6
    assert report(8, "QP solver against active-set enumeration", ok,
                  f"max objective gap={gap:.2g}, max KKT residual={kkt:.2g}")


def test_criterion_9_kdv_tracking(kdv_fit, kdv_run):
    model, _ = kdv_fit
    res, ctrl = kdv_run
    checks = ex.step_tracking(res)
    steps_ok = res.completed and all(c.ok for c in checks)
    worst_ms = float(res.solve_ms.max())
    ok = model.N == 385 and ctrl.Np == 10 and steps_ok and worst_ms <= 10
    errs = ", ".join(f"{c.error_after_1s:.2g}/{c.magnitude:.2g}"
                     for c in checks)
    assert report(9, "KdV mean-value tracking", ok,
                  f"error/step after 1 s: {errs}; solve ms median="
                  f"{np.median(res.solve_ms):.2f}, max={worst_ms:.2f}")


def test_criterion_10_offline_online_split(motor_scenario2, kdv_run):
    res, ctrl, dense_c, _ = motor_scenario2
    kres, kctrl = kdv_run
    seen = set(ctrl.solver.seen)
    same_objects = seen == {(id(ctrl.dense.H), id(ctrl.dense.L))}
    ok = (same_objects and ctrl.dense.c is dense_c
          and ctrl.n_condense == 1 and ctrl.solver.n_factorizations == 1
          and kctrl.n_condense == 1 and kctrl.solver.n_factorizations == 1
          and len(ctrl.solver.seen) == len(res.status))
    assert report(10, "dense data built once and reused", ok,
                  f"motor: {len(ctrl.solver.seen)} solves on one (H, L) pair,"
                  f" {ctrl.solver.n_factorizations} factorization; kdv: "
                  f"{len(kres.status)} solves, "
                  f"{kctrl.solver.n_factorizations} factorization")
