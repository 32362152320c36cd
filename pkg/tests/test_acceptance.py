"""End-to-end acceptance checks, one test and one PASS/FAIL line per criterion."""
import json
import math
import time

import numpy as np

from oracles import MOTZKIN, random_sos, s_procedure_instance, s_procedure_program, sample_set
from ftsos.certify import certify_cor1, load_certificate, settling_bound, validate
from ftsos.cli import EXIT_OK, run
from ftsos.poly import variables
from ftsos.region import RegionEstimate, check_region, estimate_region
from ftsos.sdp import SdpProblem, solve
from ftsos.sim import integrate, simulate_system, system_rhs
from ftsos.soscompile import GramCertificate, Infeasible, check_sos
from ftsos.synth import closed_loop, load_controller
from ftsos.sysparse import load_system, parse_system

CUBE = parse_system('system "cube"\nvars x\nx\' = -sgnpow(x,1/3)\n')
BASIN = parse_system('system "basin"\nvars x\nx\' = -sgnpow(x,1/3) + x^3\n')


class Checks:
    """Sub-checks of one criterion, folded into a single verdict line."""

    def __init__(self):
        self.items = []

    def __call__(self, name, ok, detail=""):
        self.items.append((name, bool(ok), detail))
        return bool(ok)

    @property
    def ok(self):
        return all(ok for _, ok, _ in self.items)

    def detail(self):
        return "; ".join(f"{n} {'ok' if ok else 'FAILED'}" + (f" ({d})" if d else "") for n, ok, d in self.items)


def timed_cli(argv):
    t0 = time.perf_counter()
    code = run(argv)
    return code, time.perf_counter() - t0


def summary(out, stem, command):
    return json.loads((out / f"{stem}_{command}.summary.json").read_text())


def test_ac1_example1_constant_rate(tmp_path, verdict):
    ck = Checks()
    code, secs = timed_cli(["certify", "--method", "thm1", "--system", "ex1", "--c", "1", "--degv", "4",
                            "--out", str(tmp_path), "--quiet"])
    ck("certificate", code == EXIT_OK, f"exit {code}")
    ck("runtime < 60 s", secs < 60, f"{secs:.1f} s")
    if code == EXIT_OK:
        cert = load_certificate(tmp_path / "ex1_thm1.cert", load_system("ex1"))
        rep = validate(cert.rs, cert.V, 1.0, 0.0, box=2.0, n_samples=100000, r_excl=cert.exclusion_radius,
                       tol=1e-6)
        ck("validator", rep.ok and rep.n_samples == 100000,
           f"{len(rep.violations)} violations in {rep.n_samples} samples, max {rep.max_violation:.2e}")
    verdict("AC1", ck.ok, ck.detail())


def test_ac2_example1_exponential_rate(tmp_path, verdict):
    ck = Checks()
    code, _ = timed_cli(["certify", "--method", "thm2", "--system", "ex1", "--c", "1", "--degv", "2",
                         "--max-alt", "30", "--out", str(tmp_path), "--quiet"])
    ck("quadratic V", code == EXIT_OK, f"exit {code}")
    if code == EXIT_OK:
        cert = load_certificate(tmp_path / "ex1_thm2.cert", load_system("ex1"))
        its = int(cert.info["iterations"])
        ck("alternations <= 30", its <= 30, f"{its}")
        ck("degree 2", cert.V.degree == 2)
    code, _ = timed_cli(["validate", "--system", "ex1", "--v-file", "paper_quad.cert", "--alpha", "1",
                         "--out", str(tmp_path), "--quiet"])
    s = summary(tmp_path, "ex1", "validate")
    chat = s["chat"]["1.0"]
    ck("fitted c at alpha 1", code == EXIT_OK and chat > 0, f"{chat:.4g}")
    eig = s["eigenvalues"]
    ck("positive definite", all(v > 0 for v in eig), " ".join(f"{v:.4g}" for v in eig))
    verdict("AC2", ck.ok, ck.detail())


def test_ac3_example2_synthesis(tmp_path, verdict):
    ck = Checks()
    sys = load_system("ex2")
    code, secs = timed_cli(["synthesize", "--method", "global", "--system", "ex2", "--out", str(tmp_path),
                            "--quiet"])
    ck("CLF certificate", code == EXIT_OK, f"exit {code}")
    ck("runtime < 120 s", secs < 120, f"{secs:.1f} s")
    if code == EXIT_OK:
        ctrl = load_controller(tmp_path / "ex2_global.ctrl", sys)
        cert = load_certificate(tmp_path / "ex2_clf-global.cert", sys)
        x0 = [0.5, 0.5]
        bound = ctrl.value(x0) / cert.c
        horizon = 1.05 * bound
        closed = integrate(closed_loop(sys, ctrl), x0, t_max=horizon, settle_tol=1e-3)
        ck("closed loop settles within V(x0)/c + 5%", closed.settled and closed.settle_time <= horizon,
           f"T = {closed.settle_time:.4g}, bound {bound:.4g}" if closed.settled else f"bound {bound:.4g}")
        opened = integrate(system_rhs(sys), x0, t_max=horizon, settle_tol=1e-3)
        ck("open loop does not settle", not opened.settled,
           f"|x(T)| = {np.linalg.norm(opened.final_state):.3g}")
    verdict("AC3", ck.ok, ck.detail())


def test_ac4_supertwist(tmp_path, verdict):
    ck = Checks()
    t0 = time.perf_counter()
    code, _ = timed_cli(["simulate", "--system", "supertwist", "--x0", "1", "--settle-tol", "1e-4",
                         "--out", str(tmp_path), "--quiet"])
    s = summary(tmp_path, "supertwist", "simulate")
    T = s["settle_time"]
    ck("simulation settles", code == EXIT_OK and T is not None, "none" if T is None else f"T = {T:.4g}")
    code, _ = timed_cli(["certify", "--method", "thm1", "--system", "supertwist", "--c", "0.1", "--degv", "6",
                         "--out", str(tmp_path), "--quiet"])
    ck("degree-6 certificate, validator clean", code == EXIT_OK, f"exit {code}")
    secs = time.perf_counter() - t0
    ck("runtime < 300 s", secs < 300, f"{secs:.1f} s")
    verdict("AC4", ck.ok, ck.detail())


def test_ac5_settling_time_oracle(verdict):
    ck = Checks()
    tr = simulate_system(CUBE, [1.0])
    ck("settling time in [1.48, 1.62]", tr.settled and 1.48 <= tr.settle_time <= 1.62,
       f"{tr.settle_time:.5g}" if tr.settled else "none")
    cert = certify_cor1(CUBE, 2, 3)
    ok = not isinstance(cert, Infeasible)
    ck("rate c >= 2 - 1e-3", ok and cert.c >= 2 - 1e-3, f"c = {cert.c:.6f}" if ok else str(cert))
    worst = -math.inf
    for x0 in np.random.default_rng(5).uniform(0.0, 2.0, size=10):
        x0 = max(float(x0), 1e-3)
        closed_form = 1.5 * x0 ** (2 / 3)
        bound = settling_bound(cert, [x0]) if ok else closed_form
        t = simulate_system(CUBE, [x0]).settle_time
        worst = max(worst, t - min(bound, closed_form))
    ck("bound dominates 10 simulations", worst <= 0, f"max(T_sim - bound) = {worst:.2e}")
    verdict("AC5", ck.ok, ck.detail())


def test_ac6_sos_sdp_core(verdict):
    ck = Checks()
    rng = np.random.default_rng(2024)
    worst, failures = 0.0, 0
    for _ in range(200):
        p = random_sos(rng)
        cert = check_sos(p)
        if isinstance(cert, GramCertificate) and cert.residual <= 1e-6:
            worst = max(worst, cert.residual)
        else:
            failures += 1
    ck("200 random SOS certified", failures == 0, f"{failures} failures, worst residual {worst:.1e}")
    ck("Motzkin rejected", isinstance(check_sos(MOTZKIN), Infeasible))

    errs = []
    p = SdpProblem([1])
    p.add_constraint([(0, 0, 0, 1.0)], rhs=1.0)
    p.objective = [(0, 0, 0, -1.0)]
    errs.append(abs(-solve(p).objective - 1.0))
    p = SdpProblem([2])
    t = p.add_free("t")
    p.add_constraint([(0, 0, 0, 1.0)], rhs=1.0)
    p.add_constraint([(0, 1, 1, 1.0)], rhs=1.0)
    p.add_constraint([(0, 0, 1, 1.0)], [(t, -1.0)], rhs=0.0)
    p.free_objective[t] = 1.0
    errs.append(abs(solve(p).u[0] - 1.0))
    A = np.array([[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 4.0]])
    p = SdpProblem([3])
    t = p.add_free("t")
    for i in range(3):
        for j in range(i, 3):
            p.add_constraint([(0, i, j, 1.0)], [(t, 1.0)] if i == j else [], rhs=A[i, j])
    p.free_objective[t] = 1.0
    errs.append(abs(solve(p).u[0] - (3 - math.sqrt(3))))
    ck("3 analytic SDPs to 1e-7", max(errs) <= 1e-7, f"max error {max(errs):.1e}")

    violations, feasible = 0, 0
    for k in range(20):
        rng = np.random.default_rng(100 + k)
        p0, cons = s_procedure_instance(rng)
        prog, _ = s_procedure_program(p0, cons)
        if prog.solve().feasible:
            feasible += 1
            X = sample_set(cons, 10000, rng)
            violations += int(np.sum(p0.evaluate_many(X) < -1e-7))
    ck("S-procedure soundness", violations == 0, f"{feasible}/20 certified, {violations} violations")
    verdict("AC6", ck.ok, ck.detail())


def test_ac7_region_of_reaching(verdict):
    ck = Checks()
    x, = variables(1)
    est = estimate_region(BASIN, x * x, degV=4)
    ok = isinstance(est, RegionEstimate)
    ck("estimate", ok)
    if ok:
        ck("0.25 <= beta < 1", 0.25 <= est.beta < 1.0, f"beta = {est.beta:.4f}")
        ck("containment", est.containment["violations"] == 0, f"{int(est.containment['samples'])} samples")
        chk = check_region(est, BASIN, n_traj=20)
        ck("20 boundary trajectories settle", chk.settled == 20 and chk.ok, f"{chk.settled}/20")
    verdict("AC7", ck.ok, ck.detail())
