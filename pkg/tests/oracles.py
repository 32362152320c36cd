"""Independent constructions shared by the unit and acceptance tests."""
import numpy as np

from ftsos.poly import Polynomial, monomial_basis
from ftsos.soscompile import SosProgram

MOTZKIN = Polynomial(2, {(4, 2): 1.0, (2, 4): 1.0, (2, 2): -3.0, (0, 0): 1.0})


def random_sos(rng, nvars=None, half_deg=None, nsquares=None):
    """``sum q_i^2`` with random ``q_i`` of degree ``half_deg`` (at most 3 vars, degree <= 6)."""
    nvars = nvars or int(rng.integers(1, 4))
    half_deg = half_deg or int(rng.integers(1, 4))
    nsquares = nsquares or int(rng.integers(1, 4))
    basis = monomial_basis(nvars, half_deg)
    total = Polynomial.zero(nvars)
    for _ in range(nsquares):
        q = Polynomial(nvars, {m: rng.normal() for m in basis})
        total = total + q * q
    return total


def s_procedure_instance(rng):
    """Random ``p0`` and the half-disk ``{1 - |x|^2 >= 0, x1 >= 0}``."""
    x1 = Polynomial.variable(2, 0)
    x2 = Polynomial.variable(2, 1)
    p0 = Polynomial(2, {m: rng.normal() for m in monomial_basis(2, 4, 1)})
    p0 = p0 + float(rng.uniform(0.0, 4.0))
    return p0, [1 - x1 * x1 - x2 * x2, x1]


def s_procedure_program(p0, constraints):
    """``p0 - sum s_i p_i`` SOS with SOS multipliers ``s_i`` (quadratic)."""
    prog = SosProgram(p0.nvars)
    expr = p0
    mults = []
    for k, g in enumerate(constraints):
        s = prog.new_sos(f"s{k}", monomial_basis(p0.nvars, 1))
        mults.append(f"s{k}")
        expr = s * g * -1.0 + expr
    prog.add_sos(expr, "p0")
    return prog, mults


def sample_set(constraints, n, rng, box=1.0):
    pts = []
    while sum(len(p) for p in pts) < n:
        X = rng.uniform(-box, box, size=(4 * n, constraints[0].nvars))
        keep = np.all([g.evaluate_many(X) >= 0 for g in constraints], axis=0)
        pts.append(X[keep])
    return np.vstack(pts)[:n]
