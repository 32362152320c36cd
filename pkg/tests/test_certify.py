import math

import numpy as np
import pytest

from ftsos.certify import (Certificate, certify_cor1, certify_thm1, certify_thm2, load_certificate,
                           settling_bound, settling_time_bound, validate)
from ftsos.sim import simulate_system
from ftsos.soscompile import Infeasible
from ftsos.sysparse import load_system, parse_polynomial, parse_system

CUBE = parse_system('system "cube"\nvars x\nx\' = -sgnpow(x,1/3)\n')
LINEAR = parse_system('system "lin"\nvars x\nx\' = -x\n')
CUBIC = parse_system('system "cubic"\nvars x\nx\' = -x^3\n')
UNSTABLE = parse_system('system "up"\nvars x\nx\' = x\n')
REFERENCE_V = "4.945*x1^2 + 1.159*x1*x2 + 4.494*x2^2"
BUNDLED_QUADRATIC = "paper_quad.cert"  # file name fixed by the CLI interface


@pytest.fixture(scope="module")
def ex1_thm1():
    return certify_thm1(load_system("ex1"), c=1.0, degV=4)


def test_thm1_example1_certified(ex1_thm1):
    cert = ex1_thm1
    assert isinstance(cert, Certificate)
    assert cert.alpha == 0.0 and cert.c == 1.0
    assert cert.max_residual <= 1e-6
    rep = validate(load_system("ex1"), cert.V, 1.0, 0.0, box=2.0, n_samples=20000)
    assert rep.ok, rep.summary()


def test_thm1_linear_needs_exclusion():
    # x' = -x has Vdot -> 0 at the origin, so a constant decrease rate is impossible there
    assert isinstance(certify_thm1(LINEAR, c=1.0, degV=2, r_excl=0.0), Infeasible)


def test_thm1_cube_root_certified():
    cert = certify_thm1(CUBE, c=0.5, degV=4)
    assert isinstance(cert, Certificate)
    assert validate(CUBE, cert.V, 0.5, 0.0, box=2.0, n_samples=5000).ok


@pytest.mark.parametrize("kwargs", [dict(c=0.0), dict(c=1.0, degV=3), dict(c=1.0, r_excl=-1.0)])
def test_thm1_argument_checks(kwargs):
    with pytest.raises(ValueError):
        certify_thm1(LINEAR, **kwargs)


def test_thm2_example1():
    cert = certify_thm2(load_system("ex1"), c=1.0, degV=2)
    assert isinstance(cert, Certificate)
    assert cert.info["iterations"] <= 30
    assert cert.level == 1.0 and cert.alpha == 1.0
    rep = validate(load_system("ex1"), cert.V, 1.0, 1.0, box=2.0, level=1.0, n_samples=20000)
    assert rep.ok, rep.summary()


def test_reference_quadratic_is_exponentially_decreasing():
    rep = validate(load_system("ex1"), parse_polynomial(REFERENCE_V, ["x1", "x2"]), 0.0, 1.0, box=2.0,
                   level=1.0, n_samples=20000)
    assert rep.chat[1.0] > 0
    Q = np.array([[4.945, 1.159 / 2], [1.159 / 2, 4.494]])
    assert np.all(np.linalg.eigvalsh(Q) > 0)


def test_cubic_decay_is_not_finite_time():
    # x' = -x^3 with V = x^2 gives Vdot = -2 V^2: no exponent below 1 fits near zero
    rep = validate(CUBIC, parse_polynomial("x^2", ["x"]), 0.0, 0.0, box=1.0, n_samples=4000)
    assert rep.alpha_hat is None or rep.alpha_hat >= 1.0
    assert all(v <= 1e-3 for a, v in rep.chat.items() if a < 1)


def test_unstable_quadratic_violates():
    rep = validate(UNSTABLE, parse_polynomial("x^2", ["x"]), 1.0, 0.5, box=1.0, n_samples=1000)
    assert not rep.ok and rep.max_violation > 0


def test_cor1_cube_root_rate():
    cert = certify_cor1(CUBE, 2, 3)
    assert isinstance(cert, Certificate)
    assert cert.alpha == pytest.approx(2 / 3)
    assert cert.c >= 2 - 1e-3
    # V = x^2 exactly: Vdot = -2 |x|^(4/3) = -2 V^(2/3)
    assert validate(CUBE, cert.V, cert.c - 1e-3, cert.alpha, box=2.0, n_samples=5000).ok


@pytest.mark.parametrize("p, q", [(3, 3), (4, 3), (0, 2)])
def test_cor1_rejects_bad_exponents(p, q):
    with pytest.raises(ValueError):
        certify_cor1(CUBE, p, q)


def test_cor1_bound_dominates_simulation():
    cert = certify_cor1(CUBE, 2, 3)
    for x0 in np.random.default_rng(0).uniform(0.05, 2.0, size=5):
        tr = simulate_system(CUBE, [x0], settle_tol=1e-6)
        assert tr.settle_time <= settling_bound(cert, [x0]) + 1e-3


@pytest.mark.parametrize("V0, c, alpha, expected", [
    (4.0, 2.0, 0.0, 2.0),
    (1.0, 2.0, 2 / 3, 1.5),
    (8.0, 1.0, 2 / 3, 6.0),
    (0.0, 1.0, 0.5, 0.0),
])
def test_settling_time_formula(V0, c, alpha, expected):
    assert settling_time_bound(V0, c, alpha) == pytest.approx(expected)


@pytest.mark.parametrize("c, alpha", [(1.0, 1.0), (0.0, 0.5), (1.0, -0.1)])
def test_settling_time_formula_rejects(c, alpha):
    with pytest.raises(ValueError):
        settling_time_bound(1.0, c, alpha)


def test_validator_monotone_in_rate(ex1_thm1):
    # a certificate valid at c also passes at c / 2
    rep = validate(load_system("ex1"), ex1_thm1.V, 0.5, 0.0, box=2.0, n_samples=5000)
    assert rep.ok


def test_validator_sample_determinism(ex1_thm1):
    a = validate(load_system("ex1"), ex1_thm1.V, 1.0, 0.0, n_samples=2000, seed=3)
    b = validate(load_system("ex1"), ex1_thm1.V, 1.0, 0.0, n_samples=2000, seed=3)
    assert a.max_violation == b.max_violation and a.chat == b.chat


def test_certificate_round_trip(ex1_thm1, tmp_path):
    stamp = "2000-01-01T00:00:00Z"
    path = ex1_thm1.save(tmp_path / "ex1.cert", timestamp=stamp)
    assert path.read_text() == ex1_thm1.to_text(stamp)
    back = load_certificate(path, load_system("ex1"))
    assert back.method == "thm1" and back.c == 1.0 and back.alpha == 0.0
    assert back.exclusion_radius == ex1_thm1.exclusion_radius
    assert (back.V - ex1_thm1.V).max_abs_coef() <= 1e-15 * max(1.0, ex1_thm1.V.max_abs_coef())
    x = [0.3, -0.4]
    assert back.value(x) == pytest.approx(ex1_thm1.value(x), rel=1e-14)


def test_hand_written_certificate():
    cert = load_certificate("variables: x1 x2\nV: x1^2 + x2^2\n")
    assert cert.value([3.0, 4.0]) == 25.0
    with pytest.raises(ValueError):
        load_certificate("c: 1\nnot a field line\n")


def test_settling_bound_outside_level():
    cert = load_certificate("variables: x\nV: x^2\nc: 1\nalpha: 0.5\nlevel: 1\n")
    assert settling_bound(cert, [0.5]) == pytest.approx(2 * 0.5)
    with pytest.raises(ValueError):
        settling_bound(cert, [2.0])


def test_bundled_quadratic_certificate():
    from importlib import resources
    text = resources.files("ftsos").joinpath("systems", BUNDLED_QUADRATIC).read_text()
    cert = load_certificate(text, load_system("ex1"))
    assert math.isclose(cert.value([1.0, 0.0]), 4.945)
