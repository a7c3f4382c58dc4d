import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from koopmpc.dynamics import (MOTOR, VAN_DER_POL, CampaignSpec,
                              IntegrationError, KdvModel, collect_data,
                              collect_kdv_data, delay_embed, discretize,
                              motor_output, motor_rhs, read_dataset,
                              rk4_step, vdp_rhs, write_dataset)
from koopmpc.edmd import DataSet

decay = lambda x, u: -x  # noqa: E731


def test_rk4_exponential():
    x1 = rk4_step(decay, np.array([1.0]), np.zeros(1), 0.01)
    assert x1[0] == pytest.approx(0.9900498337491681, abs=1e-10)


def test_rk4_constant_input_exact():
    x1 = rk4_step(lambda x, u: u, np.zeros(1), np.array([2.0]), 0.01)
    assert x1[0] == 0.02


def test_rk4_zero_field():
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(
        rk4_step(lambda x, u: np.zeros_like(x), x, np.zeros(1), 0.1), x)


def test_rk4_bad_step():
    with pytest.raises(ValueError):
        rk4_step(decay, np.ones(1), np.zeros(1), 0.0)


def test_rk4_reports_blowup():
    with pytest.raises(IntegrationError):
        rk4_step(lambda x, u: x * np.inf, np.ones(1), np.zeros(1), 0.1)


def _global_error(Ts):
    x = np.array([1.0])
    for _ in range(round(1.0 / Ts)):
        x = rk4_step(decay, x, np.zeros(1), Ts)
    return abs(x[0] - math.exp(-1.0))


def test_rk4_fourth_order():
    ratio = _global_error(0.1) / _global_error(0.05)
    assert 14 <= ratio <= 18


def test_vdp_rhs_values():
    np.testing.assert_allclose(vdp_rhs([1.0, 1.0], [0.0]), [2.0, -8.8],
                               rtol=1e-15)
    np.testing.assert_array_equal(vdp_rhs([0.0, 0.0], [1.0]), [0.0, 1.0])
    np.testing.assert_array_equal(vdp_rhs([0.0, 0.0], [0.0]), [0.0, 0.0])


def test_vdp_origin_is_equilibrium():
    f = discretize(VAN_DER_POL, 0.01)
    x = np.zeros(2)
    for _ in range(500):
        x = f(x, np.zeros(1))
    np.testing.assert_array_equal(x, 0.0)


def test_motor_rhs_at_rest():
    xdot, y = motor_rhs([0.0, 0.0], [0.0])
    np.testing.assert_allclose(xdot, [191.08280254777071, -333.33333333333337],
                               rtol=1e-14)
    assert y == 0.0


def test_motor_output_map():
    np.testing.assert_array_equal(motor_output([0.7, -0.3]), [-0.3])


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
       st.floats(0, 1))
def test_motor_affine_in_input(x1, x2, ua, ub, t):
    x = [x1, x2]
    fa, fb = motor_rhs(x, [ua])[0], motor_rhs(x, [ub])[0]
    fm = motor_rhs(x, [(1 - t) * ua + t * ub])[0]
    np.testing.assert_allclose(fm, (1 - t) * fa + t * fb, rtol=1e-12,
                               atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_rhs_finite_on_boxes(x1, x2, u):
    assert np.all(np.isfinite(vdp_rhs([x1, x2], [u])))
    assert np.all(np.isfinite(MOTOR.rhs(np.array([x1, x2]), np.array([u]))))


def test_kdv_spectral_derivative():
    k = KdvModel()
    np.testing.assert_allclose(k.derivative(np.sin(k.x)), np.cos(k.x),
                               atol=1e-10)


def test_kdv_constant_is_equilibrium():
    k = KdvModel()
    y = np.full(k.n, 0.37)
    np.testing.assert_allclose(k.step(y, np.zeros(3)), y, atol=1e-14)


def test_kdv_linear_step_is_unitary():
    k = KdvModel()
    y = np.random.default_rng(0).standard_normal(k.n)
    assert np.linalg.norm(k.linear_step(y)) == pytest.approx(
        np.linalg.norm(y), rel=1e-13)


def test_kdv_mean_conserved():
    k = KdvModel()
    y = k.initial_profiles().T @ np.array([0.5, 0.2, 0.3])
    m0 = y.mean()
    for _ in range(100):
        y = k.step(y, np.zeros(3))
    assert abs(y.mean() - m0) <= 1e-8


def test_kdv_profiles_and_grid():
    k = KdvModel()
    assert k.n == 128 and k.m == 3
    assert k.x[0] == -np.pi and k.x[-1] < np.pi
    i = np.argmax(k.profiles, axis=1)
    np.testing.assert_allclose(k.x[i], [-np.pi / 2, 0.0, np.pi / 2],
                               atol=2 * np.pi / 128)


def test_kdv_batched_matches_single():
    k = KdvModel()
    r = np.random.default_rng(1)
    Y = 0.3 * r.standard_normal((4, k.n))
    U = r.uniform(-1, 1, (4, 3))
    batch = k.step(Y, U)
    for b in range(4):
        np.testing.assert_allclose(batch[b], k.step(Y[b], U[b]), atol=1e-13)


def test_kdv_rejects_odd_grid():
    with pytest.raises(ValueError):
        KdvModel(n=127)


def test_campaign_shape_and_determinism():
    spec = CampaignSpec(n_traj=5, steps=20, seed=3)
    a = collect_data(VAN_DER_POL, spec)
    b = collect_data(VAN_DER_POL, spec)
    assert a.X.shape == (2, 100) and a.U.shape == (1, 100)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.U, b.U)
    assert np.all(np.abs(a.X[:, a.step == 0]) <= 1)
    assert np.all(np.abs(a.U) <= 1)


def test_single_sample_campaign():
    d = collect_data(VAN_DER_POL, CampaignSpec(n_traj=1, steps=1))
    assert d.K == 1


def test_campaign_columns_resimulate():
    d = collect_data(MOTOR, CampaignSpec(n_traj=10, steps=50, seed=1))
    f = discretize(MOTOR, 0.01)
    for j in np.random.default_rng(0).choice(d.K, 100, replace=False):
        np.testing.assert_array_equal(f(d.X[:, j], d.U[:, j]), d.Y[:, j])


def test_kdv_campaign_small():
    k = KdvModel()
    d = collect_kdv_data(k, CampaignSpec(n_traj=3, steps=4, seed=0))
    assert d.X.shape == (128, 12) and d.U.shape == (3, 12)
    j = 5
    np.testing.assert_allclose(k.step(d.X[:, j], d.U[:, j]), d.Y[:, j],
                               atol=1e-14)
    with pytest.raises(ValueError):
        collect_kdv_data(k, CampaignSpec(n_traj=1, steps=1, Ts=0.02))


def test_campaign_spec_validation():
    with pytest.raises(ValueError):
        CampaignSpec(n_traj=0)


def test_delay_embed_layout():
    d = collect_data(MOTOR, CampaignSpec(n_traj=2, steps=5, seed=0))
    e = delay_embed(d, 1, output=motor_output)
    assert e.X.shape == (3, 8)
    first = np.flatnonzero((d.traj == 0))
    y = d.X[1, first]
    u = d.U[0, first]
    np.testing.assert_array_equal(e.X[:, 0], [y[1], u[0], y[0]])
    np.testing.assert_array_equal(e.Y[:, 0], [y[2], u[1], y[1]])
    assert e.U[0, 0] == u[1]


def test_delay_embed_needs_labels():
    with pytest.raises(ValueError):
        delay_embed(DataSet(np.zeros((1, 3)), np.zeros((1, 3)),
                            np.zeros((1, 3))), 1)


@pytest.mark.parametrize("fmt", ["csv", "binary"])
def test_dataset_round_trip(tmp_path, fmt):
    d = collect_data(VAN_DER_POL, CampaignSpec(n_traj=3, steps=7, seed=2))
    path = tmp_path / f"data.{fmt}"
    write_dataset(d, path, fmt)
    back = read_dataset(path)
    for name in ("X", "Y", "U", "traj", "step"):
        np.testing.assert_array_equal(getattr(back, name), getattr(d, name))


def test_binary_magic(tmp_path):
    d = collect_data(VAN_DER_POL, CampaignSpec(n_traj=1, steps=2))
    path = tmp_path / "d.bin"
    write_dataset(d, path, "binary")
    assert path.read_bytes()[:8] == b"KMPCDATA"
    path.write_bytes(b"NOTMAGIC" + path.read_bytes()[8:])
    with pytest.raises(ValueError):
        read_dataset(path)


def test_csv_header(tmp_path):
    d = collect_data(VAN_DER_POL, CampaignSpec(n_traj=1, steps=2))
    path = tmp_path / "d.csv"
    write_dataset(d, path, "csv")
    assert path.read_text().splitlines()[0] == "kind,traj,step,idx,value"
