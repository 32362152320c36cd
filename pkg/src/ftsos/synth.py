"""Control Lyapunov functions and the modified Sontag feedback.

For ``x' = f0(x) + sum_i f_i(x) u_i`` write ``a = dV/dx f0``,
``b_i = dV/dx f_i`` and ``beta = sum_i b_i^2``.  A CLF must decrease where
all ``b_i`` vanish; :func:`find_clf_global` certifies

    -s1 (a + c) + sum_i p_i b_i - l2  is SOS      (times the denominator D)

and :func:`make_controller` turns ``V`` into

    u_i = -b_i (a + sqrt(a^p + beta^q)) / beta    (beta > zero_tol), else 0,

which gives ``Vdot = -sqrt(a^p + beta^q)`` in closed loop when ``p = q = 2``.
"""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .certify import _ball, _box, _standard, _with_manifold, radial_bound, sample_box
from .poly import LinPoly, Polynomial
from .recast import RecastSystem, recast
from .region import _default_shape, boundary_points, containment_check
from .sdp import SdpOptions
from .sim import compile_system
from .soscompile import GramCertificate, Infeasible, Ring, SosProgram
from .sysparse import DynSystem, parse_polynomial

CONTROLLER_VERSION = 1


@dataclass
class CLFCertificate:
    """A verified control Lyapunov function (``scope`` is ``"global"`` or ``"local"``)."""

    V: Polynomial
    c: float
    names: List[str]
    norig: int
    multipliers: Dict[str, Polynomial] = field(default_factory=dict)
    gram_certs: Dict[str, GramCertificate] = field(default_factory=dict)
    scope: str = "global"
    beta: Optional[float] = None
    p_shape: Optional[Polynomial] = None
    iterations: int = 0
    containment: Dict[str, float] = field(default_factory=dict)
    rs: Optional[RecastSystem] = field(default=None, repr=False)
    system: str = ""
    l2: Optional[Polynomial] = None
    r_excl: float = 0.0
    rho: float = 0.0

    def value(self, x: Sequence[float]) -> float:
        return float(self.V.evaluate(self.rs.lift(np.asarray(x, float))))

    @property
    def max_residual(self) -> float:
        return max((g.residual for g in self.gram_certs.values()), default=0.0)

    def settling_bound(self, x0: Sequence[float]) -> float:
        """``V(x0) / c``: the time to reach the origin when ``Vdot <= -c`` holds along the way."""
        V0 = self.value(x0)
        if self.scope == "local" and V0 > 1:
            raise ValueError(f"x0 lies outside the certified region (V = {V0:.4g} > 1)")
        return V0 / self.c

    def body(self) -> str:
        lines = [f"method: clf-{self.scope}", f"system: {self.system}",
                 f"variables: {' '.join(self.names)}", f"original: {' '.join(self.names[:self.norig])}",
                 f"c: {self.c:.17g}", "alpha: 0",
                 f"r_excl: {self.r_excl:.17g}",
                 f"level: {'1' if self.scope == 'local' else 'none'}",
                 f"info iterations: {self.iterations}"]
        if self.r_excl > 0:
            lines.append(f"info rho: {self.rho:.17g}")
        if self.beta is not None:
            lines.append(f"info beta: {self.beta:.17g}")
            lines.append(f"info p_shape: {self.p_shape.render(self.names[:self.norig])}")
        lines.append(f"V: {self.V.render(self.names)}")
        for k in sorted(self.multipliers):
            lines.append(f"multiplier {k}: {self.multipliers[k].render(self.names)}")
        for k in sorted(self.gram_certs):
            g = self.gram_certs[k]
            lines.append(f"gram {k}: size {len(g.basis)} residual {g.residual:.17g} min_eig {g.min_eig:.17g}")
            for row in np.atleast_2d(g.gram):
                if len(g.basis):
                    lines.append("  row: " + " ".join(f"{v:.17g}" for v in row))
        if self.rs is not None:
            lines.append("recast:")
            lines.extend("  " + ln for ln in self.rs.report().splitlines())
        lines.append("end")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CLF search


def _clf_parts(rs: RecastSystem, V) -> Tuple[object, List[object]]:
    """Cleared ``a`` and ``b_i`` numerators for a fixed or unknown ``V``."""
    if isinstance(V, Polynomial):
        ld = rs.lie_derivative(V)
        return ld.numerator, list(ld.input_numerators)
    a = V.apply_linear(lambda q: rs.lie_derivative(q).numerator)
    bs = [V.apply_linear(lambda q, j=j: rs.lie_derivative(q).input_numerators[j])
          for j in range(len(rs.input_fields))]
    return a, bs


def _p_basis(ring: Ring, rs: RecastSystem, deg: int):
    return _standard(ring, rs.nvars, deg, 0)


def _widest_slack(rs: RecastSystem, i: int) -> Optional[int]:
    """Index (into the recast variables) of the slack of state ``i`` with the largest root order."""
    best = None
    for k, s in enumerate(rs.slacks):
        if s.var == i and (best is None or s.q > rs.slacks[best].q):
            best = k
    return None if best is None else rs.norig + best


def root_terms(rs: RecastSystem) -> Tuple[List[Polynomial], List[Polynomial], List[float]]:
    """Per-state nonnegative monomials growing slowly and just faster than ``|x_i|``.

    For a state ``x`` with a root slack ``z`` of order ``q`` the slow term is
    ``z^2 = |x|^(2/q)`` and the fast one ``|x|^(1 + 1/q)`` (``x z`` for signed
    slacks, ``z^(q+1)`` for absolute ones).  States without slacks use ``x^2``
    for both.  Also returns the growth exponent of each slow term.
    """
    N = rs.nvars
    slow, fast, expo = [], [], []
    for i in range(rs.norig):
        k = _widest_slack(rs, i)
        xi = Polynomial.variable(N, i)
        if k is None:
            slow.append(xi * xi)
            fast.append(xi * xi)
            expo.append(2.0)
            continue
        s = rs.slacks[k - rs.norig]
        z = Polynomial.variable(N, k)
        slow.append(z * z)
        fast.append(z ** (s.q + 1) if s.kind == "abs" else xi * z)
        expo.append(2.0 / s.q)
    return slow, fast, expo


def _power_profile(rs: RecastSystem, m) -> List[Fraction]:
    """Power of each ``|x_i|`` carried by monomial ``m`` of the recast variables."""
    out = [Fraction(e) for e in m[:rs.norig]]
    for k, s in enumerate(rs.slacks):
        out[s.var] += Fraction(m[rs.norig + k], s.q)
    return out


def clf_basis(ring: Ring, rs: RecastSystem, degV: int, terms: str = "mixed"):
    """Monomials for a CLF candidate.

    ``terms`` is ``"original"`` (states only), ``"separable"`` (each monomial
    involves one state and its slacks), ``"mixed"`` (both) or ``"root"`` (the
    fast root terms of :func:`root_terms` plus all quadratic state monomials,
    a small basis that keeps the alternation tractable).  Monomials that
    are not continuously differentiable in the states (a slack-carried power of
    some ``|x_i|`` at most one) are dropped so that the feedback stays continuous.
    """
    if terms not in ("original", "separable", "mixed", "root"):
        raise ValueError(f"unknown basis kind {terms!r}")
    N = rs.nvars
    out = []
    if terms == "root":
        out = _standard(ring, N, 2, 2, list(range(rs.norig)))
        for f in root_terms(rs)[1]:
            (m,) = f.terms
            if m not in out and sum(m) <= degV:
                out.append(m)
    if terms in ("original", "mixed"):
        out += _standard(ring, N, degV, 2, list(range(rs.norig)))
    if terms in ("separable", "mixed"):
        for i in range(rs.norig):
            group = [i] + [rs.norig + k for k, s in enumerate(rs.slacks) if s.var == i]
            for m in _standard(ring, N, degV, 2, group):
                if any(m[j] for j in group[1:]) and m not in out:
                    out.append(m)
    keep = []
    for m in out:
        prof = _power_profile(rs, m)
        slack_vars = {s.var for k, s in enumerate(rs.slacks) if m[rs.norig + k]}
        if all(prof[i] > 1 for i in slack_vars):
            keep.append(m)
    return keep


def exclusion_set(rs: RecastSystem, r_excl: float) -> Tuple[Polynomial, float]:
    """``(e, rho)`` with ``e >= rho`` at every state outside the ball of radius ``r_excl``.

    ``e`` is the sum of the slow root terms, so the S-procedure term
    ``s (e - rho)`` grows no faster than the Lie derivative of a root-type V.
    """
    slow, _, expo = root_terms(rs)
    e = Polynomial.zero(rs.nvars)
    for t in slow:
        e = e + t
    t = r_excl / math.sqrt(rs.norig)
    rho = min(t ** a for a in expo)
    return e, rho


def _global_constraint(prog, ring, rs, V, ps, c, l2, r_excl=0.0, reverse_sign=False):
    a, bs = _clf_parts(rs, V)
    D = rs.D
    if isinstance(a, Polynomial):
        a = LinPoly.from_polynomial(a)
    expr = (a + LinPoly.from_polynomial(D * c)) * (1.0 if reverse_sign else -1.0)
    for p, b in zip(ps, bs):
        expr = expr + (p * b if isinstance(p, LinPoly) else b * p)
    expr = expr - LinPoly.from_polynomial(l2 * D)
    if r_excl > 0:
        e, rho = exclusion_set(rs, r_excl)
        sr = prog.new_scalar("s_r", nonneg=True)
        expr = expr - sr * (D * (e - Polynomial.constant(rs.nvars, rho)))
    prog.add_sos(_with_manifold(prog, ring, rs, expr, "clf"), "clf")


def _radial_pair(rs: RecastSystem, eps: float) -> Tuple[Polynomial, Polynomial]:
    slow, fast, _ = root_terms(rs)
    l1 = Polynomial.zero(rs.nvars)
    l2 = Polynomial.zero(rs.nvars)
    for s_, f_ in zip(slow, fast):
        l1 = l1 + f_ * eps
        l2 = l2 + s_ * eps
    return l1, l2


def default_degree(rs: RecastSystem) -> int:
    """Smallest CLF degree that contains every fast root term."""
    _, fast, _ = root_terms(rs)
    return max([2] + [f.degree for f in fast])


def _global_cert(V, mults, res, c, rs, it, name, l2, r_excl) -> CLFCertificate:
    rho = 0.0
    if r_excl > 0:
        rho = exclusion_set(rs, r_excl)[1]
        mults["s_r"] = Polynomial.constant(rs.nvars, float(res.values["s_r"]))
    return CLFCertificate(V, float(c), list(rs.names), rs.norig, mults, res.certificates, iterations=it,
                          rs=rs, system=name, l2=l2, r_excl=float(r_excl), rho=rho)


def find_clf_global(sys: DynSystem, c: float = 0.1, degV: Optional[int] = None, p_deg: int = 2,
                    r_excl: float = 1e-3, v_terms: str = "separable", max_alternations: int = 30,
                    eps: float = 1e-6, improve_tol: float = 1e-7, reverse_sign: bool = False,
                    opts: Optional[SdpOptions] = None, verbose: bool = False):
    """Search for a global CLF with ``a <= -c`` wherever every ``b_i`` vanishes.

    ``V`` and the free multipliers ``p_i`` enter bilinearly; starting from the
    sum of the fast root terms (``|x_i|^(1 + 1/q)``) the multipliers and ``V``
    are solved alternately.  ``V`` may use slack variables (see
    :func:`clf_basis`); ``degV`` defaults to :func:`default_degree`.

    The decrease condition is required only where the slow root terms sum to
    at least ``rho`` (see :func:`exclusion_set`), a neighbourhood of the origin
    inside the ball of radius ``r_excl``: at the origin every ``b_i`` vanishes
    while ``a + c = c > 0``.  ``reverse_sign=True`` uses ``+s1 (a + c)``
    instead of the decrease direction (kept for comparison only).
    """
    if sys.ninputs < 1:
        raise ValueError("the system has no inputs")
    if c <= 0:
        raise ValueError("c must be positive")
    rs = recast(sys)
    N = rs.nvars
    ring = Ring.from_recast(rs)
    degV = default_degree(rs) if degV is None else int(degV)
    l1, l2 = _radial_pair(rs, eps)
    v_basis = clf_basis(ring, rs, degV, v_terms)
    pb = _p_basis(ring, rs, p_deg)
    V_cur = _radial_pair(rs, 1.0)[0]
    best = -math.inf
    for it in range(1, max_alternations + 1):
        # multiplier step: V fixed, p_i free
        prog = SosProgram(N, ring, rs.names)
        ps = [prog.new_poly(f"p{j + 1}", pb) for j in range(sys.ninputs)]
        prog.add_sos(_with_manifold(prog, ring, rs, LinPoly.from_polynomial(V_cur - l1), "pos"), "positivity")
        _global_constraint(prog, ring, rs, V_cur, ps, c, l2, r_excl, reverse_sign)
        mres = prog.solve(mode="phase1", opts=opts)
        if verbose:
            print(f"[clf] iteration {it} multiplier-step margin {mres.slack:.3e} {mres.status}")
        if mres.feasible:
            mults = dict(mres.multipliers)
            mults.update({f"p{j + 1}": mres.values[f"p{j + 1}"] for j in range(sys.ninputs)})
            return _global_cert(V_cur, mults, mres, c, rs, it, sys.name, l2, r_excl)
        p_vals = [mres.values.get(f"p{j + 1}", Polynomial.zero(N)) for j in range(sys.ninputs)]
        # V step: multipliers fixed
        prog = SosProgram(N, ring, rs.names)
        V = prog.new_poly("V", v_basis)
        prog.add_sos(_with_manifold(prog, ring, rs, V - l1, "pos"), "positivity")
        _global_constraint(prog, ring, rs, V, p_vals, c, l2, r_excl, reverse_sign)
        res = prog.solve(mode="phase1", opts=opts)
        if verbose:
            print(f"[clf] iteration {it} V-step margin {res.slack:.3e} {res.status}")
        if res.feasible:
            mults = dict(res.multipliers)
            mults.update({f"p{j + 1}": p for j, p in enumerate(p_vals)})
            return _global_cert(res.values["V"], mults, res, c, rs, it, sys.name, l2, r_excl)
        if "V" in res.values:
            V_cur = res.values["V"]
        gain = max(res.slack, mres.slack) - best
        best = max(best, res.slack, mres.slack)
        if it > 1 and gain < improve_tol:
            return Infeasible(best, "stall", f"alternation stalled after {it} iterations (best margin {best:.3e})")
    return Infeasible(best, "infeasible", f"no CLF within {max_alternations} alternations")


class _LocalTrial:
    """One trial ``beta`` of the local CLF search (alternation over V and multipliers)."""

    def __init__(self, rs, p, c, degV, mult_half_deg, p_deg, eps, v_terms, opts, r_excl=0.0):
        self.rs, self.c, self.opts = rs, c, opts
        self.r_excl = r_excl
        N = rs.nvars
        self.N = N
        self.ring = Ring.from_recast(rs)
        self.p_orig = p
        self.p = rs.embed_original(p) if p.nvars != N else p
        if v_terms == "original":
            self.l1 = self.l2 = radial_bound(rs, degV, eps)
            self.V = _ball(rs, 0.0)
        else:
            self.l1, self.l2 = _radial_pair(rs, eps)
            self.V = _radial_pair(rs, 1.0)[0]
        self.v_basis = clf_basis(self.ring, rs, degV, v_terms)
        self.m_basis = _standard(self.ring, N, mult_half_deg, 0, list(range(rs.norig)))
        self.pb = _p_basis(self.ring, rs, p_deg)
        self.s8 = Polynomial.constant(N, 1.0)
        self.s1 = _ball(rs, 0.0)
        self.p4 = [Polynomial.zero(N) for _ in rs.input_fields]

    def _fit(self, beta):
        """Scale the current V so that it stays below 1 on sampled points of ``{p = beta}``."""
        pts = boundary_points(self.p_orig, beta, 64)
        top = max(float(self.V.evaluate(self.rs.lift(x))) for x in pts)
        if top > 1.0:
            self.V = self.V * (0.99 / top)

    def _add(self, prog, V, s8, s1, p4, beta):
        rs, D, one = self.rs, self.rs.D, Polynomial.constant(self.N, 1.0)
        Vl = V if isinstance(V, LinPoly) else LinPoly.from_polynomial(V)
        a, bs = _clf_parts(rs, V)
        a = a if isinstance(a, LinPoly) else LinPoly.from_polynomial(a)
        contain = Vl - one + s8 * (one * beta - self.p)
        if isinstance(s1, LinPoly):
            dec = s1 * ((one - V) * D)
        else:
            dec = (Vl * (-1.0) + one) * (D * s1)
        dec = dec + a + Vl * (D * self.c) + LinPoly.from_polynomial(self.l2 * D)
        for p, b in zip(p4, bs):
            dec = dec + (p * b if isinstance(p, LinPoly) else b * p)
        dec = dec * (-1.0)
        if self.r_excl > 0:
            e, rho = exclusion_set(rs, self.r_excl)
            sr = prog.new_scalar("s_r", nonneg=True)
            dec = dec - sr * (D * (e - one * rho))
        prog.add_sos(_with_manifold(prog, self.ring, rs, contain * (-1.0), "contain"), "contain")
        prog.add_sos(_with_manifold(prog, self.ring, rs, dec, "decrease"), "decrease")

    def _keep_sr(self, res):
        if self.r_excl > 0:
            res.multipliers["s_r"] = Polynomial.constant(self.N, float(res.values["s_r"]))

    def run(self, beta, max_alternations, improve_tol, verbose=False):
        saved = (self.s8, self.s1, list(self.p4), self.V)
        self._fit(beta)
        res = self._run(beta, max_alternations, improve_tol, verbose)
        if res is None:
            self.s8, self.s1, self.p4, self.V = saved
        return res

    def _run(self, beta, max_alternations, improve_tol, verbose):
        rs, N = self.rs, self.N
        best = -math.inf
        for it in range(1, max_alternations + 1):
            # multiplier step with V fixed
            prog = SosProgram(N, self.ring, rs.names)
            s8 = prog.new_sos("s8", self.m_basis)
            s1 = prog.new_sos("s1", self.m_basis)
            p4 = [prog.new_poly(f"p4_{j + 1}", self.pb) for j in range(len(self.p4))]
            prog.add_sos(_with_manifold(prog, self.ring, rs, LinPoly.from_polynomial(self.V - self.l1), "pos"),
                         "positivity")
            self._add(prog, self.V, s8, s1, p4, beta)
            mres = prog.solve(mode="phase1", opts=self.opts)
            if verbose:
                print(f"[clf-local] beta {beta:.5g} iteration {it} multiplier-step margin {mres.slack:.3e}")
            if "s8" in mres.values and np.isfinite(mres.slack):
                self.s8, self.s1 = mres.values["s8"], mres.values["s1"]
                self.p4 = [mres.values[f"p4_{j + 1}"] for j in range(len(self.p4))]
            if mres.feasible:
                mres.values["V"] = self.V
                mres.multipliers.update({f"p4_{j + 1}": p for j, p in enumerate(self.p4)})
                self._keep_sr(mres)
                return mres, it
            # V step with multipliers fixed
            prog = SosProgram(N, self.ring, rs.names)
            V = prog.new_poly("V", self.v_basis)
            prog.add_sos(_with_manifold(prog, self.ring, rs, V - self.l1, "pos"), "positivity")
            self._add(prog, V, self.s8, self.s1, self.p4, beta)
            res = prog.solve(mode="phase1", opts=self.opts)
            if verbose:
                print(f"[clf-local] beta {beta:.5g} iteration {it} V-step margin {res.slack:.3e} {res.status}")
            if "V" in res.values:
                self.V = res.values["V"]
            if res.feasible:
                res.multipliers.update({"s8": self.s8, "s1": self.s1})
                res.multipliers.update({f"p4_{j + 1}": p for j, p in enumerate(self.p4)})
                self._keep_sr(res)
                return res, it
            gain = max(res.slack, mres.slack) - best
            best = max(best, res.slack, mres.slack)
            if it > 1 and gain < improve_tol:
                return None
        return None


def find_clf_local(sys: DynSystem, c: float = 0.1, degV: Optional[int] = None,
                   p_shape: Optional[Polynomial] = None,
                   beta_bracket: Tuple[float, float] = (1e-4, 100.0), bisect_tol: float = 1e-3,
                   mult_half_deg: int = 1, p_deg: int = 2, v_terms: str = "original",
                   r_excl: float = 1e-3, V0: Optional[Polynomial] = None, max_alternations: int = 30,
                   eps: float = 1e-6, improve_tol: float = 1e-7, n_samples: int = 100000,
                   seed: int = 0, opts: Optional[SdpOptions] = None, verbose: bool = False):
    """Local CLF on ``{V <= 1}`` containing ``{p <= beta}`` with ``beta`` maximized by bisection.

    Each trial ``beta`` alternates between the multipliers and ``V`` as in
    :func:`find_clf_global`, starting from the last feasible ``V`` rescaled to
    stay below 1 on sampled points of ``{p = beta}``.  ``V0`` replaces the
    default starting point (``|x|^2``, or the fast root terms for slack
    bases); a global CLF is a natural choice.  The decrease condition is
    waived near the origin exactly as in :func:`find_clf_global`.
    """
    if sys.ninputs < 1:
        raise ValueError("the system has no inputs")
    if c <= 0:
        raise ValueError("c must be positive")
    rs = recast(sys)
    n = rs.norig
    p = p_shape if p_shape is not None else _default_shape(n)
    lo, hi = beta_bracket
    if not 0 < lo < hi:
        raise ValueError("need 0 < beta_lo < beta_hi")
    if degV is None:
        degV = 2 if v_terms == "original" else default_degree(rs)
    trial = _LocalTrial(rs, p, c, degV, mult_half_deg, p_deg, eps, v_terms, opts, r_excl)
    if V0 is not None:
        trial.V = V0
    out = trial.run(lo, max_alternations, improve_tol, verbose)
    if out is None:
        return Infeasible(-math.inf, "infeasible", f"no local CLF at beta = {lo:g}")
    best, best_beta = out, lo
    top = trial.run(hi, max_alternations, improve_tol, verbose)
    if top is not None:
        best, best_beta = top, hi
    else:
        a, b = lo, hi
        while b - a > bisect_tol:
            mid = 0.5 * (a + b)
            r = trial.run(mid, max_alternations, improve_tol, verbose)
            if r is not None:
                a, best, best_beta = mid, r, mid
            else:
                b = mid
    res, it = best
    cert = CLFCertificate(res.values["V"], float(c), list(rs.names), n, dict(res.multipliers),
                          res.certificates, "local", best_beta, p, it, rs=rs, system=sys.name, l2=trial.l2,
                          r_excl=float(r_excl), rho=exclusion_set(rs, r_excl)[1] if r_excl > 0 else 0.0)

    class _Est:  # adapter for the shared containment sampler
        pass
    est = _Est()
    est.norig, est.p_shape, est.beta, est.V, est.rs = n, p, best_beta, cert.V, rs
    cert.containment = containment_check(est, n_samples=n_samples, seed=seed)
    return cert


def clf_margin(cert: CLFCertificate, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Certified CLF inequality at states ``X`` with the true ``a`` and ``b_i``.

    Returns the value of the expression proven SOS (divided by the
    denominator) and the sum of the magnitudes of its terms, for a relative
    tolerance.  ``a`` and ``b_i`` come from the chain rule, not from the
    cleared polynomials of the program.
    """
    rs = cert.rs
    ctrl = _controller(cert.V, rs, 2, 2, 0.0)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = rs.lift_many(X)
    m = cert.multipliers
    zero = Polynomial.zero(rs.nvars)
    l2 = (cert.l2 if cert.l2 is not None else zero).evaluate_many(Z)
    V = cert.V.evaluate_many(Z)
    nin = len(rs.input_fields)
    out = np.empty(len(X))
    mag = np.empty(len(X))
    sr = float(m.get("s_r", zero).coeff((0,) * rs.nvars))
    e = exclusion_set(rs, cert.r_excl)[0].evaluate_many(Z) - cert.rho if cert.r_excl > 0 else np.zeros(len(X))
    if cert.scope == "global":
        ps = [m.get(f"p{j + 1}", zero).evaluate_many(Z) for j in range(nin)]
        for k, x in enumerate(X):
            a, b, _ = ctrl.parts(x)
            pb = sum(ps[j][k] * b[j] for j in range(nin))
            terms = [-(a + cert.c), pb, -l2[k], -sr * e[k]]
            out[k], mag[k] = sum(terms), sum(abs(t) for t in terms)
    else:
        s1 = m.get("s1", zero).evaluate_many(Z)
        ps = [m.get(f"p4_{j + 1}", zero).evaluate_many(Z) for j in range(nin)]
        for k, x in enumerate(X):
            a, b, _ = ctrl.parts(x)
            pb = sum(ps[j][k] * b[j] for j in range(nin))
            terms = [-s1[k] * (1.0 - V[k]), -a, -cert.c * V[k], -pb, -l2[k], -sr * e[k]]
            out[k], mag[k] = sum(terms), sum(abs(t) for t in terms)
    return out, mag


@dataclass
class ClfValidation:
    """Sampled check of a CLF certificate."""

    n_samples: int
    domain: str
    min_V: float
    min_margin: float
    violations: List[Tuple[Tuple[float, ...], float]]
    tol: float

    @property
    def ok(self) -> bool:
        return not self.violations and self.min_V > 0

    def summary(self) -> str:
        lines = [f"samples: {self.n_samples} in {self.domain}", f"min V: {self.min_V:.6e}",
                 f"min certified margin: {self.min_margin:.6e}  (relative tolerance {self.tol:g})",
                 f"violations: {len(self.violations)}", "result: " + ("PASS" if self.ok else "FAIL")]
        return "\n".join(lines)


def validate_clf(cert: CLFCertificate, box=2.0, n_samples: int = 20000, r_excl: float = 1e-3,
                 seed: int = 0, tol: float = 1e-6, max_report: int = 20) -> ClfValidation:
    """Sample the certified CLF inequality and ``V > 0`` on a box minus a small ball."""
    n = cert.norig
    lo, hi = _box(box, n)
    X = sample_box(lo, hi, n_samples, r_excl, seed)
    margin, mag = clf_margin(cert, X)
    vv = cert.V.evaluate_many(cert.rs.lift_many(X))
    bad = np.nonzero(~(margin >= -tol * np.maximum(1.0, mag)))[0]
    order = bad[np.argsort(margin[bad])][:max_report]
    viol = [(tuple(float(v) for v in X[k]), float(margin[k])) for k in order]
    if len(vv) and vv.min() <= 0:
        k = int(np.argmin(vv))
        viol.append((tuple(float(v) for v in X[k]), float(vv[k])))
    dom = "box " + " x ".join(f"[{a:g},{b:g}]" for a, b in zip(lo, hi))
    if r_excl > 0:
        dom += f" minus ball r={r_excl:g}"
    return ClfValidation(len(X), dom, float(vv.min()) if len(vv) else math.nan,
                         float(margin.min()) if len(margin) else math.nan, viol, tol)


def reverify(cert: CLFCertificate, V: Optional[Polynomial] = None, r_excl: float = 1e-3,
             reverse_sign: bool = False) -> bool:
    """Re-check the global CLF condition for ``V`` (default: the certificate's) with a fresh solve."""
    rs = cert.rs
    V = cert.V if V is None else V
    ring = Ring.from_recast(rs)
    N = rs.nvars
    degV = max(V.degree, 2)
    l1 = radial_bound(rs, degV, 1e-6)
    l2 = radial_bound(rs, degV, 1e-6)
    prog = SosProgram(N, ring, rs.names)
    pb = _p_basis(ring, rs, 2)
    ps = [prog.new_poly(f"p{j + 1}", pb) for j in range(len(rs.input_fields))]
    prog.add_sos(_with_manifold(prog, ring, rs, LinPoly.from_polynomial(V - l1), "pos"), "positivity")
    _global_constraint(prog, ring, rs, V, ps, cert.c, l2, r_excl, reverse_sign)
    return prog.solve(mode="phase1").feasible


# ---------------------------------------------------------------------------
# feedback law


@dataclass
class Controller:
    """Modified Sontag feedback built from a CLF.

    ``a``, ``b`` and ``beta_poly`` are the cleared polynomials over the recast
    variables: the true values are ``a / D``, ``b_i / D`` and ``beta / D^2``
    with ``D = denominator``.  Evaluation uses the chain rule through the
    slacks instead, which stays finite where ``D`` vanishes; on a coordinate
    hyperplane of a state with slacks the gradient is the mean of the
    one-sided values at distance ``1e-120``.
    """

    V: Polynomial
    a: Polynomial
    b: List[Polynomial]
    p: int
    q: int
    beta_poly: Polynomial
    zero_tol: float
    names: List[str]
    rs: RecastSystem = field(repr=False)
    denominator: Optional[Polynomial] = None

    _DELTA = 1e-120

    def __post_init__(self):
        rs = self.rs
        if self.denominator is None:
            self.denominator = rs.D
        self._grad = [g.to_function() if not g.is_zero() else None for g in self.V.gradient()]
        self._drift, self._inputs = compile_system(rs.sys)
        self._with_slack = sorted({s.var for s in rs.slacks})

    def _raw_gradient(self, x: np.ndarray) -> np.ndarray:
        rs = self.rs
        z = rs.lift(x)
        n = rs.norig
        G = np.array([f(*z) if f is not None else 0.0 for f in self._grad[:n]], dtype=float)
        for k, s in enumerate(rs.slacks):
            f = self._grad[n + k]
            if f is not None:
                G[s.var] += f(*z) * z[n + k] / (s.q * x[s.var])
        return G

    def gradient(self, x) -> np.ndarray:
        """Gradient of ``V(lift(x))`` with respect to the original states."""
        x = np.asarray(x, dtype=float)
        zeros = [i for i in self._with_slack if x[i] == 0.0]
        if not zeros:
            return self._raw_gradient(x)
        up, dn = x.copy(), x.copy()
        up[zeros] = self._DELTA
        dn[zeros] = -self._DELTA
        return 0.5 * (self._raw_gradient(up) + self._raw_gradient(dn))

    def parts(self, x) -> Tuple[float, np.ndarray, float]:
        """True ``(a, b, beta)`` at state ``x``."""
        x = np.asarray(x, dtype=float)
        G = self.gradient(x)
        a = float(G @ np.asarray(self._drift(x), dtype=float))
        cols = np.array(self._inputs(x), dtype=float).reshape(len(x), -1)
        b = G @ cols
        return a, b, float(b @ b)

    @staticmethod
    def feedback(a: float, b, beta: float, p: int = 2, q: int = 2, zero_tol: float = 1e-9) -> np.ndarray:
        """``-b (a + sqrt(a^p + beta^q)) / beta`` if ``beta > zero_tol``, else zero."""
        b = np.atleast_1d(np.asarray(b, dtype=float))
        if not beta > zero_tol:
            return np.zeros_like(b)
        return -b * (a + math.sqrt(a ** p + beta ** q)) / beta

    def __call__(self, x) -> np.ndarray:
        a, b, beta = self.parts(x)
        return self.feedback(a, b, beta, self.p, self.q, self.zero_tol)

    def closed_loop_vdot(self, x) -> float:
        a, b, beta = self.parts(x)
        return a + float(b @ self.feedback(a, b, beta, self.p, self.q, self.zero_tol))

    def value(self, x) -> float:
        return float(self.V.evaluate(self.rs.lift(np.asarray(x, dtype=float))))

    def to_text(self) -> str:
        lines = [f"# ftsos controller v{CONTROLLER_VERSION}", f"system: {self.rs.sys.name}",
                 f"variables: {' '.join(self.names)}", f"p: {self.p}", f"q: {self.q}",
                 f"zero_tol: {self.zero_tol:.17g}", f"V: {self.V.render(self.names)}",
                 f"denominator: {self.denominator.render(self.names)}",
                 f"a: {self.a.render(self.names)}"]
        for j, bj in enumerate(self.b):
            lines.append(f"b{j + 1}: {bj.render(self.names)}")
        lines.append(f"beta: {self.beta_poly.render(self.names)}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def make_controller(cert: CLFCertificate, p: int = 2, q: int = 2, zero_tol: float = 1e-9) -> Controller:
    """Build the feedback ``u_i = -b_i (a + sqrt(a^p + beta^q)) / beta`` (0 where ``beta <= zero_tol``)."""
    for e in (p, q):
        if int(e) != e or e < 2 or int(e) % 2:
            raise ValueError("p and q must be even integers >= 2")
    return _controller(cert.V, cert.rs, int(p), int(q), float(zero_tol))


def _controller(V: Polynomial, rs: RecastSystem, p: int, q: int, zero_tol: float) -> Controller:
    ld = rs.lie_derivative(V)
    b = list(ld.input_numerators)
    beta = Polynomial.zero(rs.nvars)
    for bj in b:
        beta = beta + bj * bj
    return Controller(V, ld.numerator, b, p, q, beta, zero_tol, list(rs.names), rs, ld.denominator)


def load_controller(source: Union[str, Path], sys: DynSystem) -> Controller:
    """Read a controller record; ``a``, ``b`` and ``beta`` are rebuilt from ``V`` and checked."""
    text = str(source)
    if "\n" not in text and Path(text).exists():
        text = Path(text).read_text()
    fields: Dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition(":")
        fields[k.strip()] = v.strip()
    for key in ("variables", "p", "q", "zero_tol", "V"):
        if key not in fields:
            raise ValueError(f"controller record lacks {key!r}")
    names = fields["variables"].split()
    rs = recast(sys)
    if list(rs.names) != names:
        raise ValueError("controller variables do not match the system's recast variables")
    ctrl = _controller(parse_polynomial(fields["V"], names), rs, int(fields["p"]), int(fields["q"]),
                       float(fields["zero_tol"]))
    if "a" in fields:
        stored = parse_polynomial(fields["a"], names)
        if (stored - ctrl.a).max_abs_coef() > 1e-9 * max(1.0, ctrl.a.max_abs_coef()):
            raise ValueError("stored a does not match V and the system")
    return ctrl


@dataclass
class ClosedLoop:
    """Autonomous closed-loop right-hand side ``x -> f0(x) + sum_i f_i(x) u_i(x)``."""

    sys: DynSystem
    controller: object

    def __post_init__(self):
        self._drift, self._inputs = compile_system(self.sys)

    @property
    def nstates(self) -> int:
        return self.sys.nstates

    def input(self, x) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.controller(x), dtype=float))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f = np.array(self._drift(x), dtype=float)
        if self._inputs is None:
            return f
        G = np.array(self._inputs(x), dtype=float).reshape(len(x), -1)
        return f + G @ self.input(x)


def closed_loop(sys: DynSystem, ctrl) -> ClosedLoop:
    if isinstance(ctrl, Controller) and len(ctrl.b) != sys.ninputs:
        raise ValueError("controller and system have different input counts")
    return ClosedLoop(sys, ctrl)
