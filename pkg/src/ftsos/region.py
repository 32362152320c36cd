"""Inner estimates of the region of reaching as Lyapunov sublevel sets.

For a shape polynomial ``p`` the largest ``beta`` is sought such that some
``V`` satisfies

* ``V - l1`` is SOS (positivity, and boundedness of ``{V <= 1}``),
* ``{p <= beta}`` lies inside ``{V <= 1}``,
* ``Vdot <= -c V - l2`` on ``{V <= 1}``.

The two containments are bilinear in ``V`` and the multipliers ``s6``,
``s8``; for each trial ``beta`` they are handled by alternation, and
``beta`` itself by bisection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .certify import Certificate, _ball, _standard, _with_manifold, radial_bound, sample_box
from .poly import LinPoly, Polynomial
from .recast import RecastSystem, recast
from .sdp import SdpOptions
from .sim import integrate, system_rhs
from .soscompile import GramCertificate, Infeasible, Ring, SosProgram
from .sysparse import DynSystem


@dataclass
class RegionEstimate:
    """Certified sublevel set ``{V <= 1}`` containing ``{p <= beta}``."""

    V: Polynomial
    p_shape: Polynomial
    beta: float
    c: float
    names: List[str]
    norig: int
    gram_certs: Dict[str, GramCertificate] = field(default_factory=dict)
    multipliers: Dict[str, Polynomial] = field(default_factory=dict)
    containment: Dict[str, float] = field(default_factory=dict)
    history: List[Tuple[float, bool]] = field(default_factory=list)
    rs: Optional[RecastSystem] = field(default=None, repr=False)
    system: str = ""
    monotone: List[Tuple[float, bool]] = field(default_factory=list)

    def value(self, x: Sequence[float]) -> float:
        return float(self.V.evaluate(self.rs.lift(np.asarray(x, float))))

    def shape_value(self, x: Sequence[float]) -> float:
        return float(self.p_shape.evaluate(np.asarray(x, float)))

    def as_certificate(self) -> Certificate:
        return Certificate("region", self.system, list(self.names), self.norig, self.V, self.c, 1.0, 0.0,
                           dict(self.multipliers), dict(self.gram_certs), level=1.0,
                           info={"beta": self.beta}, recast_report=self.rs.report() if self.rs else "",
                           rs=self.rs)

    def report(self) -> str:
        orig = self.names[:self.norig]
        lines = ["region:", f"  p_shape: {self.p_shape.render(orig)}", f"  beta: {self.beta:.17g}",
                 f"  c: {self.c:.17g}"]
        for k in sorted(self.containment):
            lines.append(f"  containment {k}: {self.containment[k]:.17g}")
        for b, ok in self.monotone:
            lines.append(f"  monotonicity check beta {b:.17g}: {'feasible' if ok else 'infeasible'}")
        return "\n".join(lines) + "\n"


def _default_shape(n: int) -> Polynomial:
    out = Polynomial.zero(n)
    for i in range(n):
        out = out + Polynomial.variable(n, i) ** 2
    return out


def _radius_bound(p: Polynomial, beta: float, n: int, seed: int = 0) -> float:
    """Radius of a ball containing ``{p <= beta}`` (probed along many directions)."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((2048, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radii = 1e-4 * 1.05 ** np.arange(400)
    best = 0.0
    for r in radii:
        vals = p.evaluate_many(r * d)
        inside = vals <= beta
        if inside.any():
            best = r
        elif r > 2 * max(best, 1e-4):
            break
    return 1.1 * best if best > 0 else 1e-3


class _Trial:
    """Alternation for one trial ``beta``; the multipliers persist between trials."""

    def __init__(self, rs: RecastSystem, p: Polynomial, c: float, degV: int, mult_half_deg: int,
                 eps: float, v_original_only: bool, opts: Optional[SdpOptions]):
        self.rs, self.c, self.opts = rs, c, opts
        N = rs.nvars
        self.N = N
        self.ring = Ring.from_recast(rs)
        self.p = rs.embed_original(p) if p.nvars != N else p
        self.l1 = radial_bound(rs, degV, eps)
        self.l2 = radial_bound(rs, degV, eps)
        only = list(range(rs.norig)) if v_original_only else None
        self.v_basis = _standard(self.ring, N, degV, 2, only)
        self.m_basis = _standard(self.ring, N, mult_half_deg, 0, list(range(rs.norig)))
        self.s6 = Polynomial.constant(N, 1.0)
        self.s8 = _ball(rs, 0.0)
        self.lie = lambda q: rs.lie_derivative(q).numerator

    def _add(self, prog, V, s6, s8, beta):
        rs, D, one = self.rs, self.rs.D, Polynomial.constant(self.N, 1.0)
        if isinstance(V, Polynomial):
            Vl, Vd = LinPoly.from_polynomial(V), LinPoly.from_polynomial(self.lie(V))
        else:
            Vl, Vd = V, V.apply_linear(self.lie)
        contain = Vl - one + s6 * (one * beta - self.p)
        decrease = s8 * ((one - V) * D) if isinstance(s8, LinPoly) else (Vl * (-1.0) + one) * (D * s8)
        decrease = decrease + Vd + Vl * (D * self.c) + LinPoly.from_polynomial(self.l2 * D)
        prog.add_sos(_with_manifold(prog, self.ring, rs, contain * (-1.0), "contain"), "contain")
        prog.add_sos(_with_manifold(prog, self.ring, rs, decrease * (-1.0), "decrease"), "decrease")

    def run(self, beta: float, max_alternations: int, improve_tol: float, verbose: bool = False):
        rs, N = self.rs, self.N
        start = (self.s6, self.s8)
        res = self._run(beta, max_alternations, improve_tol, verbose)
        if res is None:
            self.s6, self.s8 = start
        return res

    def _run(self, beta: float, max_alternations: int, improve_tol: float, verbose: bool = False):
        rs, N = self.rs, self.N
        best = -math.inf
        for it in range(1, max_alternations + 1):
            prog = SosProgram(N, self.ring, rs.names)
            V = prog.new_poly("V", self.v_basis)
            prog.add_sos(_with_manifold(prog, self.ring, rs, V - self.l1, "pos"), "positivity")
            self._add(prog, V, self.s6, self.s8, beta)
            res = prog.solve(mode="phase1", opts=self.opts)
            if verbose:
                print(f"[region] beta {beta:.5g} iteration {it} V-step margin {res.slack:.3e} {res.status}")
            if res.feasible:
                res.multipliers.update({"s6": self.s6, "s8": self.s8})
                return res
            if "V" not in res.values:
                return None
            Vc = res.values["V"]
            prog = SosProgram(N, self.ring, rs.names)
            s6 = prog.new_sos("s6", self.m_basis)
            s8 = prog.new_sos("s8", self.m_basis)
            self._add(prog, Vc, s6, s8, beta)
            mres = prog.solve(mode="phase1", opts=self.opts)
            if verbose:
                print(f"[region] beta {beta:.5g} iteration {it} multiplier-step margin {mres.slack:.3e}")
            if "s6" in mres.values and np.isfinite(mres.slack):
                self.s6, self.s8 = mres.values["s6"], mres.values["s8"]
            gain = max(res.slack, mres.slack) - best
            best = max(best, res.slack, mres.slack)
            if it > 1 and gain < improve_tol:
                return None
        return None


def estimate_region(sys: DynSystem, p_shape: Optional[Polynomial] = None, c: float = 0.1, degV: int = 4,
                    mult_half_deg: int = 1, beta_bracket: Tuple[float, float] = (1e-4, 100.0),
                    bisect_tol: float = 1e-3, max_alternations: int = 10, improve_tol: float = 1e-7,
                    eps: float = 1e-6, v_original_only: bool = True, n_samples: int = 100000,
                    seed: int = 0, monotone_checks: int = 3, opts: Optional[SdpOptions] = None,
                    verbose: bool = False):
    """Largest ``beta`` in ``beta_bracket`` with ``{p <= beta}`` certified inside the region of reaching.

    Bisection assumes feasibility is monotone in ``beta``; ``monotone_checks``
    interior values below the result are re-solved and recorded in
    ``RegionEstimate.monotone``.  Returns a :class:`RegionEstimate` or
    :class:`~ftsos.soscompile.Infeasible` when the bottom of the bracket is
    already infeasible.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    rs = recast(sys)
    n = rs.norig
    p = p_shape if p_shape is not None else _default_shape(n)
    if p.nvars != n:
        raise ValueError("p_shape must be a polynomial in the original states")
    lo, hi = beta_bracket
    if not 0 < lo < hi:
        raise ValueError("need 0 < beta_lo < beta_hi")
    trial = _Trial(rs, p, c, degV, mult_half_deg, eps, v_original_only, opts)
    history: List[Tuple[float, bool]] = []

    def attempt(beta):
        res = trial.run(beta, max_alternations, improve_tol, verbose)
        history.append((beta, res is not None))
        return res

    best = attempt(lo)
    if best is None:
        return Infeasible(-math.inf, "infeasible", f"no certificate at beta = {lo:g}")
    best_beta = lo
    top = attempt(hi)
    if top is not None:
        best, best_beta = top, hi
    else:
        a, b = lo, hi
        while b - a > bisect_tol:
            mid = 0.5 * (a + b)
            res = attempt(mid)
            if res is not None:
                a, best, best_beta = mid, res, mid
            else:
                b = mid
    V = best.values["V"]
    probes = [lo + (best_beta - lo) * k / (monotone_checks + 1) for k in range(1, monotone_checks + 1)]
    monotone = [(b, trial.run(b, max_alternations, improve_tol, verbose) is not None)
                for b in probes if b > lo]
    est = RegionEstimate(V, p, best_beta, float(c), list(rs.names), n, best.certificates,
                         dict(best.multipliers), {}, history, rs, sys.name, monotone)
    est.containment = containment_check(est, n_samples=n_samples, seed=seed)
    return est


def containment_check(est: RegionEstimate, n_samples: int = 100000, seed: int = 0,
                      tol: float = 1e-7) -> Dict[str, float]:
    """Sample ``{p <= beta}`` and count points with ``V > 1 + tol``."""
    n = est.norig
    R = _radius_bound(est.p_shape, est.beta, n, seed)
    X = sample_box(-R * np.ones(n), R * np.ones(n), n_samples, 0.0, seed)
    inside = est.p_shape.evaluate_many(X) <= est.beta
    X = X[inside]
    vv = est.V.evaluate_many(est.rs.lift_many(X)) if len(X) else np.zeros(0)
    return {"samples": float(len(X)), "violations": float(np.sum(vv > 1 + tol)),
            "max_V": float(vv.max()) if len(vv) else 0.0, "box_halfwidth": float(R)}


@dataclass
class RegionCheck:
    n_traj: int
    settled: int
    max_V_increase: float
    failures: List[str]

    @property
    def ok(self) -> bool:
        return not self.failures


def boundary_points(p: Polynomial, beta: float, n_points: int, seed: int = 0) -> np.ndarray:
    """Points on ``{p = beta}`` along deterministic pseudo-random directions."""
    n = p.nvars
    rng = np.random.default_rng(seed)
    R = _radius_bound(p, beta, n, seed) * 2
    pts = []
    if n == 1:
        dirs = np.array([[1.0], [-1.0]] * ((n_points + 1) // 2))[:n_points]
    else:
        dirs = rng.standard_normal((n_points, n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for d in dirs:
        f = lambda r: p.evaluate(r * d) - beta  # noqa: E731
        r = brentq(f, 0.0, R) if f(R) > 0 else R
        pts.append(r * d)
    return np.array(pts)


def check_region(est: RegionEstimate, sys: DynSystem, n_traj: int = 20, dt: float = 1e-4,
                 t_max: float = 20.0, settle_tol: float = 1e-6, step_tol: float = 1e-6,
                 seed: int = 0, beta: Optional[float] = None) -> RegionCheck:
    """Simulate from ``{p = beta}``; every run must settle with ``V`` non-increasing.

    ``beta`` defaults to the certified value (override it to probe beyond).
    """
    b = est.beta if beta is None else beta
    rhs = system_rhs(sys)
    pts = boundary_points(est.p_shape, b, n_traj, seed)
    failures: List[str] = []
    settled, worst = 0, -math.inf
    for x0 in pts:
        with np.errstate(over="ignore", invalid="ignore"):  # runs beyond the basin diverge
            tr = integrate(rhs, x0, dt=dt, t_max=t_max, settle_tol=settle_tol, V=est.value)
        inc = float(np.max(np.diff(tr.V))) if len(tr.V) > 1 else 0.0
        worst = max(worst, inc)
        if tr.settled:
            settled += 1
        else:
            failures.append(f"x0={np.round(x0, 6).tolist()} did not settle ({tr.status})")
        if inc > step_tol:
            failures.append(f"x0={np.round(x0, 6).tolist()} V increased by {inc:.3e} in one step")
    return RegionCheck(len(pts), settled, worst, failures)
