import csv

import numpy as np
import pytest

from ftsos.sim import compile_system, integrate, simulate_system, sweep, system_rhs
from ftsos.sysparse import eval_rhs, load_system, parse_system

CUBE = parse_system('system "cube"\nvars x\nx\' = -sgnpow(x,1/3)\n')
LINEAR = parse_system('system "lin"\nvars x\nx\' = -x\n')


def test_cube_root_settling_time():
    tr = simulate_system(CUBE, [1.0])
    assert tr.settled
    assert 1.5 - 0.02 <= tr.settle_time <= 1.5 + tr.dwell + 0.02


@pytest.mark.parametrize("x0", [0.1, 0.5, 1.7, -0.8])
def test_cube_root_closed_form(x0):
    tr = simulate_system(CUBE, [x0], settle_tol=1e-6)
    exact = 1.5 * abs(x0) ** (2 / 3)
    assert abs(tr.settle_time - exact) <= 0.02


def test_exponential_never_settles():
    tr = simulate_system(LINEAR, [1.0], t_max=5.0, settle_tol=1e-6)
    assert not tr.settled
    assert tr.final_state[0] == pytest.approx(np.exp(-5.0), rel=1e-8)


def test_exponential_crossing_time():
    tr = simulate_system(LINEAR, [1.0], t_max=20.0, dt=1e-3, settle_tol=1e-6)
    assert tr.settle_time == pytest.approx(np.log(1e6), abs=0.01)


def test_origin_settles_immediately():
    assert simulate_system(LINEAR, [0.0]).settle_time == 0.0


def test_settle_window_invariant():
    tr = simulate_system(load_system("ex1"), [0.5, -0.5], t_max=6.0, stop_on_settle=False)
    assert tr.settled
    inside = (tr.t >= tr.settle_time) & (tr.t <= tr.settle_time + tr.dwell)
    assert np.all(np.linalg.norm(tr.x[inside], axis=1) <= tr.settle_tol)


def test_sweep_is_deterministic():
    runs = sweep(system_rhs(load_system("ex1")), [[0.3, -0.7]] * 3, dt=1e-3, t_max=3.0)
    for tr in runs[1:]:
        assert np.array_equal(tr.x, runs[0].x)
        assert np.array_equal(tr.t, runs[0].t)


def test_example1_random_points_settle():
    rhs = system_rhs(load_system("ex1"))
    X0 = np.random.default_rng(0).uniform(-1, 1, size=(10, 2))
    assert all(tr.settled for tr in sweep(rhs, X0, t_max=10.0))


@pytest.mark.parametrize("s0", [1.0, -1.0])
def test_supertwist_settles_both_signs(s0):
    tr = simulate_system(load_system("supertwist"), [s0, 0.0], dt=1e-4, t_max=5.0, settle_tol=1e-4)
    assert tr.settled


def test_supertwist_odd_symmetry():
    sys = load_system("supertwist")
    a = simulate_system(sys, [1.0, 0.0], dt=1e-3, t_max=1.0, stop_on_settle=False)
    b = simulate_system(sys, [-1.0, 0.0], dt=1e-3, t_max=1.0, stop_on_settle=False)
    assert np.allclose(a.x, -b.x, atol=1e-12)


def test_step_halving_convergence():
    a = simulate_system(CUBE, [1.0], dt=2e-4)
    b = simulate_system(CUBE, [1.0], dt=1e-4)
    assert abs(a.settle_time - b.settle_time) < 2 * 2e-4


def test_compiled_matches_reference():
    sys = load_system("ex2")
    drift, inputs = compile_system(sys)
    for x in np.random.default_rng(1).uniform(-2, 2, size=(30, 2)):
        u = 0.7
        f = np.asarray(drift(x)) + np.asarray(inputs(x)).reshape(2, 1)[:, 0] * u
        assert np.allclose(f, eval_rhs(sys, x, [u]), rtol=1e-13, atol=1e-14)


def test_feedback_enters_rhs():
    sys = parse_system('system "si"\nvars x\ninputs u\nx\' = u\n')
    tr = simulate_system(sys, [1.0], controller=lambda x: -x, dt=1e-3, t_max=1.0, stop_on_settle=False)
    assert tr.final_state[0] == pytest.approx(np.exp(-1.0), rel=1e-9)


def test_nonfinite_state_reported():
    with np.errstate(over="ignore", invalid="ignore"):
        tr = integrate(lambda x: x ** 3, [10.0], dt=0.1, t_max=5.0)
    assert tr.status == "nonfinite"
    assert "step" in tr.message


@pytest.mark.parametrize("dt, t_max", [(0.0, 1.0), (1e-3, -1.0)])
def test_invalid_steps(dt, t_max):
    with pytest.raises(ValueError):
        integrate(lambda x: -x, [1.0], dt=dt, t_max=t_max)


def test_csv_export(tmp_path):
    sys = load_system("ex1")
    V = lambda x: float(x @ x)  # noqa: E731
    tr = simulate_system(sys, [0.2, 0.1], dt=1e-3, t_max=0.05, V=V, control=lambda x: np.array([0.0]))
    path = tr.to_csv(tmp_path / "traj.csv", every=10)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x1", "x2", "V", "u1"]
    assert len(rows) - 1 == len(range(0, len(tr.t), 10))
    first = [float(v) for v in rows[1]]
    assert first[:3] == [0.0, 0.2, 0.1]
    for v in rows[2]:
        assert float(v) == float(f"{float(v):.17g}")
        assert len(v.split("e")[0].replace("-", "").replace(".", "").lstrip("0")) <= 17


def test_energy_consistency_along_trajectory():
    from ftsos.recast import recast
    from ftsos.poly import Polynomial
    sys = load_system("ex1")
    rs = recast(sys)
    V = Polynomial(rs.nvars, {(2, 0, 0, 0): 1.0, (0, 2, 0, 0): 2.0, (1, 1, 0, 0): 0.5})
    tr = simulate_system(sys, [0.8, -0.6], dt=1e-4, t_max=0.3, stop_on_settle=False)
    vals = V.evaluate_many(rs.lift_many(tr.x))
    numeric = np.gradient(vals, tr.t)
    exact = rs.vdot(V, tr.x)
    mid = slice(5, -5)
    assert np.allclose(numeric[mid], exact[mid], rtol=1e-4, atol=1e-8)
