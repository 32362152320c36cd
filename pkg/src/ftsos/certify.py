"""Finite-time stability certificates and their independent sampling validator.

Three certification routes are provided:

* :func:`certify_thm1` -- a global Lyapunov function with ``Vdot <= -c``
  outside a tiny ball around the origin,
* :func:`certify_thm2` -- a Lyapunov function with ``Vdot <= -c V`` on
  ``{V <= 1}`` and ``Vdot <= -c`` outside it, found by alternating between the
  Lyapunov function and the S-procedure multipliers,
* :func:`certify_cor1` -- a quadratic form ``V = w^T Q w`` with
  ``Vdot <= -c |w|^(2p/q)``, which yields the exponent ``alpha = p/q``.

Every rational quantity ``Vdot = N / D`` is handled through its numerator:
the decrease conditions are multiplied through by the denominator ``D``,
which is nonnegative on the recast manifold.
"""
from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import qmc

from .poly import LinPoly, Polynomial, monomial_basis
from .recast import RecastSystem, recast
from .sdp import SdpOptions
from .soscompile import GramCertificate, Infeasible, Ring, SosProgram, strip_square_factor
from .sysparse import DynSystem, parse_polynomial

FORMAT_VERSION = 1
DEFAULT_EPS = 1e-6
VALIDATION_TOL = 1e-6
ALPHA_GRID = tuple(k / 10 for k in range(11))
FIT_FLOOR = 1e-3


# ---------------------------------------------------------------------------
# certificate object and file format


@dataclass
class Certificate:
    """A verified Lyapunov certificate.

    ``V`` lives over the recast variables ``names`` (original states first).
    ``level`` is set for certificates whose fast-decrease guarantee is scoped
    to the sublevel set ``{V <= level}``.
    """

    method: str
    system: str
    names: List[str]
    norig: int
    V: Polynomial
    c: float
    alpha: float
    exclusion_radius: float = 0.0
    multipliers: Dict[str, Polynomial] = field(default_factory=dict)
    gram_certs: Dict[str, GramCertificate] = field(default_factory=dict)
    slack: float = float("nan")
    level: Optional[float] = None
    info: Dict[str, object] = field(default_factory=dict)
    recast_report: str = ""
    rs: Optional[RecastSystem] = field(default=None, repr=False, compare=False)

    def value(self, x0: Sequence[float]) -> float:
        """``V`` at the lift of the original state ``x0``."""
        x0 = np.asarray(x0, dtype=float)
        if self.rs is not None:
            return float(self.V.evaluate(self.rs.lift(x0)))
        if self.V.nvars != len(x0):
            raise ValueError("certificate has slack variables but no recast system attached")
        return float(self.V.evaluate(x0))

    @property
    def max_residual(self) -> float:
        return max((g.residual for g in self.gram_certs.values()), default=0.0)

    def body(self) -> str:
        """Deterministic textual body (everything except the timestamp header)."""
        lines = [
            f"method: {self.method}",
            f"system: {self.system}",
            f"variables: {' '.join(self.names)}",
            f"original: {' '.join(self.names[:self.norig])}",
            f"c: {self.c:.17g}",
            f"alpha: {self.alpha:.17g}",
            f"r_excl: {self.exclusion_radius:.17g}",
            f"level: {'none' if self.level is None else format(self.level, '.17g')}",
            f"phase1_slack: {self.slack:.17g}",
        ]
        for k in sorted(self.info):
            lines.append(f"info {k}: {_fmt(self.info[k])}")
        lines.append(f"V: {self.V.render(self.names)}")
        for k in sorted(self.multipliers):
            lines.append(f"multiplier {k}: {self.multipliers[k].render(self.names)}")
        for k in sorted(self.gram_certs):
            g = self.gram_certs[k]
            lines.append(f"gram {k}: size {len(g.basis)} residual {g.residual:.17g} "
                         f"min_eig {g.min_eig:.17g}")
            lines.append("  basis: " + " ".join(_mono_str(m, self.names) for m in g.basis))
            for row in np.atleast_2d(g.gram):
                if len(g.basis):
                    lines.append("  row: " + " ".join(f"{v:.17g}" for v in row))
        if self.recast_report:
            lines.append("recast:")
            lines.extend("  " + ln for ln in self.recast_report.splitlines())
        lines.append("end")
        return "\n".join(lines) + "\n"

    def to_text(self, timestamp: Optional[str] = None) -> str:
        if timestamp is None:
            timestamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        return f"# ftsos certificate v{FORMAT_VERSION} created {timestamp}\n" + self.body()

    def save(self, path: Union[str, Path], timestamp: Optional[str] = None) -> Path:
        path = Path(path)
        path.write_text(self.to_text(timestamp))
        return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _mono_str(m, names) -> str:
    parts = []
    for nm, e in zip(names, m):
        if e == 1:
            parts.append(nm)
        elif e > 1:
            parts.append(f"{nm}^{e}")
    return "*".join(parts) if parts else "1"


def load_certificate(source: Union[str, Path], sys: Optional[DynSystem] = None) -> Certificate:
    """Read a certificate file (or its text).

    Only the header fields, ``V`` and the multipliers are restored; Gram
    matrices are informational.  Files written by hand need just
    ``variables:`` and ``V:`` lines.  When ``sys`` is given, ``V`` is
    re-expressed over the recast variables of ``sys`` by name.
    """
    text = str(source)
    if "\n" not in text and Path(text).exists():
        text = Path(text).read_text()
    fields: Dict[str, str] = {}
    mults: Dict[str, str] = {}
    info: Dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or raw.startswith("  "):
            continue
        if line == "end":
            break
        key, sep, val = line.partition(":")
        if not sep:
            raise ValueError(f"malformed certificate line: {raw!r}")
        key, val = key.strip(), val.strip()
        if key.startswith("multiplier "):
            mults[key.split(None, 1)[1]] = val
        elif key.startswith("info "):
            info[key.split(None, 1)[1]] = val
        else:
            fields[key] = val
    if "V" not in fields or "variables" not in fields:
        raise ValueError("certificate needs 'variables:' and 'V:' lines")
    names = fields["variables"].split()
    V = parse_polynomial(fields["V"], names)
    norig = len(fields.get("original", fields["variables"]).split())
    rs = None
    if sys is not None:
        rs = recast(sys)
        V = _rename(V, names, rs.names)
        names, norig = list(rs.names), rs.norig
    level = fields.get("level", "none")
    return Certificate(
        method=fields.get("method", "external"),
        system=fields.get("system", sys.name if sys is not None else ""),
        names=names, norig=norig, V=V,
        c=float(fields.get("c", "nan")), alpha=float(fields.get("alpha", "nan")),
        exclusion_radius=float(fields.get("r_excl", "0")),
        multipliers={k: parse_polynomial(v, names if rs is None else fields["variables"].split())
                     for k, v in mults.items()} if rs is None else {},
        slack=float(fields.get("phase1_slack", "nan")),
        level=None if level == "none" else float(level),
        info=dict(info), rs=rs)


def _rename(p: Polynomial, src: Sequence[str], dst: Sequence[str]) -> Polynomial:
    pos = []
    for nm in src:
        if nm not in dst:
            raise ValueError(f"variable {nm!r} is not a (recast) variable of the system")
        pos.append(list(dst).index(nm))
    return p.embed(len(dst), pos)


# ---------------------------------------------------------------------------
# shared program pieces


def radial_bound(rs: RecastSystem, degV: int, eps: float = DEFAULT_EPS) -> Polynomial:
    """``sum_i sum_{j <= degV/2} eps * x_i^(2j)`` over the original states."""
    N = rs.nvars
    out = Polynomial.zero(N)
    for i in range(rs.norig):
        for j in range(1, max(degV // 2, 1) + 1):
            e = [0] * N
            e[i] = 2 * j
            out = out + Polynomial(N, {tuple(e): eps})
    return out


def _ball(rs: RecastSystem, r: float) -> Polynomial:
    N = rs.nvars
    out = Polynomial.constant(N, -r * r)
    for i in range(rs.norig):
        out = out + Polynomial.variable(N, i) ** 2
    return out


def _standard(ring: Ring, nvars: int, max_deg: int, min_deg: int = 0, only: Optional[Sequence[int]] = None):
    out = []
    for m in monomial_basis(nvars, max_deg, min_deg):
        if only is not None and any(e and i not in only for i, e in enumerate(m)):
            continue
        if ring.is_standard(m):
            out.append(m)
    return out


def _expr_degree(expr: LinPoly) -> int:
    return max((sum(m) for m in expr.terms), default=0)


def _with_manifold(prog: SosProgram, ring: Ring, rs: RecastSystem, expr, tag: str,
                   half: Optional[int] = None) -> LinPoly:
    """Prepare ``expr`` for an SOS constraint on the recast manifold.

    The expression is reduced modulo the equality relations, a common even
    monomial factor is divided out (sound, since it is a square), and
    ``sigma_k * g_k`` is subtracted for every inequality ``g_k >= 0``.  The
    multiplier bases are pruned with the weighted-degree windows of the
    expression.
    """
    if isinstance(expr, Polynomial):
        expr = LinPoly.from_polynomial(expr)
    expr, _ = strip_square_factor(ring.reduce_lin(expr))
    support = [m for m, d in expr.terms.items() if any(v != 0 for v in d.values())]
    if not support:
        return expr
    T = max(sum(m) for m in support)
    windows = []
    for w in ring.gradings:
        vals = [sum(a * b for a, b in zip(w, m)) for m in support]
        windows.append((w, min(vals), max(vals)))
    for k, g in enumerate(rs.G2):
        h = (T - g.degree) // 2 if half is None else half
        if h < 0:
            continue
        wg = [[sum(a * b for a, b in zip(w, m)) for m in g.terms] for w, _, _ in windows]
        basis = []
        for m in _standard(ring, rs.nvars, h):
            ok = True
            for (w, lo, hi), gw in zip(windows, wg):
                v = sum(a * b for a, b in zip(w, m))
                if 2 * v + max(gw) < lo or 2 * v + min(gw) > hi:
                    ok = False
                    break
            if ok:
                basis.append(m)
        if not basis:
            continue
        s = prog.new_sos(f"{tag}_g{k + 1}", basis)
        expr = expr - s * g
    return expr


def _lie_num(rs: RecastSystem):
    return lambda p: rs.lie_derivative(p).numerator


def _probe_points(n: int, radius: float = 1.0) -> np.ndarray:
    pts = [radius * s for s in np.eye(n)] + [-radius * s for s in np.eye(n)]
    if n > 1:
        for signs in np.ndindex(*(2,) * n):
            pts.append(radius * (1 - 2 * np.array(signs, float)) / math.sqrt(n))
    return np.array(pts)


def _linpoly_at(p: LinPoly, z: np.ndarray) -> LinPoly:
    acc: Dict = {}
    for m, d in p.terms.items():
        w = float(np.prod(z ** np.array(m)))
        for k, v in d.items():
            acc[k] = acc.get(k, 0.0) + v * w
    return LinPoly(p.nvars, {(0,) * p.nvars: acc})


def _solve_tight(prog: SosProgram, V: LinPoly, rs: RecastSystem, tighten: bool,
                 opts: Optional[SdpOptions] = None):
    """Phase-I feasibility, then (optionally) shrink ``V`` at a few probe points.

    The phase-I margin grows with the scale of ``V``; minimizing ``V`` at
    lifted probe states undoes that.  The tightened solution is kept only if
    it re-verifies.
    """
    res = prog.solve(mode="phase1", opts=opts)
    if not res.feasible or not tighten:
        return res
    size = None
    for x in _probe_points(rs.norig):
        term = _linpoly_at(V, rs.lift(x))
        size = term if size is None else size + term
    prog.maximize(size * (-1.0))
    tight = prog.solve(mode="objective", opts=opts)
    prog.objective = None
    if tight.feasible:
        tight.slack = res.slack
        return tight
    return res


def _failure(res, what: str) -> Infeasible:
    status = "fragile" if res.status == "fragile" else "infeasible"
    return Infeasible(res.slack, status, f"{what}: {res.message}")


# ---------------------------------------------------------------------------
# route 1: global decrease outside an exclusion ball


def certify_thm1(sys: DynSystem, c: float, degV: int = 4, r_excl: float = 1e-3,
                 eps: float = DEFAULT_EPS, mult_half_deg: Optional[int] = None,
                 tighten: bool = True, opts: Optional[SdpOptions] = None):
    """Search for ``V`` with ``V - l1`` SOS and ``Vdot <= -c`` for ``|x| >= r_excl``.

    Returns a :class:`Certificate`, or :class:`~ftsos.soscompile.Infeasible`
    carrying the phase-I margin.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    if degV < 2 or degV % 2:
        raise ValueError("degV must be an even integer >= 2")
    if r_excl < 0:
        raise ValueError("r_excl must be nonnegative")
    rs = recast(sys)
    N = rs.nvars
    ring = Ring.from_recast(rs)
    prog = SosProgram(N, ring, rs.names)
    V = prog.new_poly("V", _standard(ring, N, degV, 2))
    l1 = radial_bound(rs, degV, eps)
    e1 = V - l1
    e2 = (V.apply_linear(_lie_num(rs)) + rs.D * c) * (-1.0)
    if r_excl > 0:
        sr = prog.new_scalar("s_r", nonneg=True)
        e2 = e2 - sr * (rs.D * _ball(rs, r_excl))
    e1 = _with_manifold(prog, ring, rs, e1, "s1", mult_half_deg)
    e2 = _with_manifold(prog, ring, rs, e2, "s2", mult_half_deg)
    prog.add_sos(e1, "positivity")
    prog.add_sos(e2, "decrease")
    res = _solve_tight(prog, V, rs, tighten, opts)
    if not res.feasible:
        return _failure(res, "no Lyapunov function at these degrees")
    mults = dict(res.multipliers)
    if r_excl > 0:
        mults["s_r"] = Polynomial.constant(N, res.values["s_r"])
    return Certificate("thm1", sys.name, list(rs.names), rs.norig, res.values["V"], float(c), 0.0,
                       float(r_excl), mults, res.certificates, res.slack,
                       info={"degV": degV, "eps": eps}, recast_report=rs.report(), rs=rs)


# ---------------------------------------------------------------------------
# route 2: alternation between V and the S-procedure multipliers


def certify_thm2(sys: DynSystem, c: float, degV: int = 2, max_alternations: int = 30,
                 mult_half_deg: int = 1, eps: float = DEFAULT_EPS, v_original_only: bool = True,
                 improve_tol: float = 1e-7, tighten: bool = True, opts: Optional[SdpOptions] = None,
                 verbose: bool = False):
    """Search for ``V`` with ``Vdot <= -c V`` on ``{V <= 1}`` and ``Vdot <= -c`` outside.

    The multiplier ``s2`` and ``s10`` are normalized to 1 (they only scale the
    decrease terms), ``s8`` is kept at 0, and ``s4``, ``s9`` alternate with
    ``V``.  ``s4`` starts at ``|x|^2`` and ``s9`` at 1.
    """
    if c <= 0:
        raise ValueError("c must be positive")
    if degV < 2 or degV % 2:
        raise ValueError("degV must be an even integer >= 2")
    rs = recast(sys)
    N = rs.nvars
    ring = Ring.from_recast(rs)
    D = rs.D
    lie = _lie_num(rs)
    l1 = radial_bound(rs, degV, eps)
    l2 = radial_bound(rs, degV, eps)
    only = list(range(rs.norig)) if v_original_only else None
    v_basis = _standard(ring, N, degV, 2, only)
    m_basis = _standard(ring, N, mult_half_deg, 0, list(range(rs.norig)))

    s4 = _ball(rs, 0.0)
    s9 = Polynomial.constant(N, 1.0)
    V_cur: Optional[Polynomial] = None
    best = -math.inf
    history: List[float] = []

    def constraints(prog, V, s4, s9):
        one = Polynomial.constant(N, 1.0)
        Vd = V.apply_linear(lie) if isinstance(V, LinPoly) else LinPoly.from_polynomial(lie(V))
        Vl = V if isinstance(V, LinPoly) else LinPoly.from_polynomial(V)
        inside = (Vl * (-1.0) + one) * (D * s4) + Vd + Vl * (D * c) + LinPoly.from_polynomial(l2 * D)
        outside = (Vl - one) * (D * s9) + Vd + LinPoly.from_polynomial(D * c)
        e2 = _with_manifold(prog, ring, rs, inside * (-1.0), "inside")
        e3 = _with_manifold(prog, ring, rs, outside * (-1.0), "outside")
        prog.add_sos(e2, "inside")
        prog.add_sos(e3, "outside")

    for it in range(1, max_alternations + 1):
        # (a) V-step with the multipliers fixed
        prog = SosProgram(N, ring, rs.names)
        V = prog.new_poly("V", v_basis)
        prog.add_sos(_with_manifold(prog, ring, rs, V - l1, "pos"), "positivity")
        constraints(prog, V, s4, s9)
        res = _solve_tight(prog, V, rs, tighten, opts)
        history.append(res.slack)
        if verbose:
            print(f"[thm2] iteration {it} V-step margin {res.slack:.3e} {res.status}")
        if res.feasible:
            return Certificate("thm2", sys.name, list(rs.names), rs.norig, res.values["V"], float(c), 1.0,
                               0.0, {"s4": s4, "s9": s9, **res.multipliers}, res.certificates, res.slack,
                               level=1.0, info={"degV": degV, "eps": eps, "iterations": it},
                               recast_report=rs.report(), rs=rs)
        if "V" in res.values:
            V_cur = res.values["V"]
        if V_cur is None:
            break
        # (b) multiplier step with V fixed
        prog = SosProgram(N, ring, rs.names)
        s4v = prog.new_sos("s4", m_basis)
        s9v = prog.new_sos("s9", m_basis)
        one = Polynomial.constant(N, 1.0)
        Vd = LinPoly.from_polynomial(lie(V_cur))
        inside = s4v * ((one - V_cur) * D) + Vd + LinPoly.from_polynomial(V_cur * D * c + l2 * D)
        outside = s9v * ((V_cur - one) * D) + Vd + LinPoly.from_polynomial(D * c)
        prog.add_sos(_with_manifold(prog, ring, rs, inside * (-1.0), "inside"), "inside")
        prog.add_sos(_with_manifold(prog, ring, rs, outside * (-1.0), "outside"), "outside")
        mres = prog.solve(mode="phase1", opts=opts)
        if verbose:
            print(f"[thm2] iteration {it} multiplier-step margin {mres.slack:.3e} {mres.status}")
        if "s4" in mres.values:
            s4, s9 = mres.values["s4"], mres.values["s9"]
        gain = max(res.slack, mres.slack) - best
        best = max(best, res.slack, mres.slack)
        if it > 1 and gain < improve_tol:
            return Infeasible(best, "stall",
                              f"alternation stalled after {it} iterations (best margin {best:.3e})")
    return Infeasible(best, "infeasible",
                      f"no certificate within {max_alternations} alternations (best margin {best:.3e})")


# ---------------------------------------------------------------------------
# route 3: quadratic form in w with a power-law decrease


def certify_cor1(sys: DynSystem, p: int, q: int, w_choice: str = "state",
                 w: Optional[Sequence[Polynomial]] = None, eps1: float = DEFAULT_EPS,
                 min_rate: float = 1e-4, opts: Optional[SdpOptions] = None):
    """Maximize ``c`` such that ``V = w^T Q w`` satisfies ``Vdot <= -c |w|^(2p/q)``.

    ``Q - eps1 I`` is PSD and ``trace(Q) = dim(w)`` fixes the scale.  ``w`` is
    the original state (``w_choice="state"``), the drift numerators
    (``"field"``) or caller-supplied polynomials over the recast variables
    (``"custom"``).  The returned certificate records ``c_w`` (the rate in
    terms of ``|w|``) and the Lyapunov-form rate ``c = c_w / lambda_max(Q)^(p/q)``
    together with ``alpha = p/q``.  Rates below ``min_rate`` are
    indistinguishable from the coefficient-matching residual and are reported
    as infeasible.
    """
    p, q = int(p), int(q)
    if not (1 <= p < q):
        raise ValueError("need integers 1 <= p < q")
    n = sys.nstates
    r = Fraction(2 * p, q)
    one_dim = False
    if w_choice == "state" and n == 1 and r.denominator != 1:
        rs = recast(sys, extra=[(0, 0, r)])
        one_dim = True
    else:
        rs = recast(sys)
    N0 = rs.nvars
    ring0 = Ring.from_recast(rs)
    if w_choice == "state":
        W = [Polynomial.variable(N0, i) for i in range(n)]
    elif w_choice == "field":
        W = [f for f in rs.field[:n]]
        if any(not f.almost_equal(g * rs.D, 1e-12) for f, g in zip(W, rs.numerators[:n])) or not rs.D.is_constant():
            raise ValueError("w_choice='field' needs a polynomial drift (no recast slacks)")
    elif w_choice == "custom":
        if not w:
            raise ValueError("custom w requires polynomials")
        W = [wi.embed(N0, list(range(wi.nvars))) if wi.nvars < N0 else wi for wi in w]
    else:
        raise ValueError("w_choice must be 'state', 'field' or 'custom'")
    m = len(W)
    wtw = Polynomial.zero(N0)
    for wi in W:
        wtw = wtw + wi * wi

    if one_dim:
        from .recast import _express  # monomial for |x|^(2p/q)
        index = {(s.var, s.kind, s.q): n + j for j, s in enumerate(rs.slacks)}
        e = [0] * N0
        for v, k in _express(0, 0, r, index).items():
            e[v] += k
        M = Polynomial(N0, {tuple(e): 1.0})
        N, ring, Mvar = N0, ring0, None
        lift = lambda P: P  # noqa: E731
    elif r.denominator == 1 and r.numerator % 2 == 0:
        M = wtw ** (r.numerator // 2)
        N, ring, Mvar = N0, ring0, None
        lift = lambda P: P  # noqa: E731
    else:
        # M is a new variable tied by M^q = (w^T w)^p (a rewrite rule) and M >= 0
        N = N0 + 1
        lift = lambda P: P.embed(N, list(range(N0)))  # noqa: E731
        Mvar = Polynomial.variable(N, N0)
        M = Mvar
        rhs = lift(ring0.reduce(wtw ** p))
        rules = [(zi, k, tuple(rep) + (0,)) for zi, k, rep in ring0.rules]
        rules.append((N0, q, dict(rhs.terms)))
        grads: List[Tuple[int, ...]] = []
        G = [sum(col) for col in zip(*ring0.gradings)] if ring0.gradings else [1] * N0
        hs = {sum(a * b for a, b in zip(G, m)) for m in rhs.terms}
        if len(hs) == 1:
            grads = [tuple(q * g for g in G) + (hs.pop(),)]
        ring = Ring(N, rules, grads)

    names = list(rs.names) + (["M"] if Mvar is not None else [])
    prog = SosProgram(N, ring, names)
    # Gram of V over the "w" coordinates: V = sum_ij Q_ij w_i w_j with Q = P + eps1 I
    Wl = [lift(wi) for wi in W]
    P_blk = len(prog.blocks)
    prog.new_sos("Q", [tuple(1 if k == i else 0 for k in range(N)) for i in range(m)])
    terms_Q = {}
    for i in range(m):
        for j in range(i, m):
            terms_Q[(i, j)] = ("g", P_blk, i, j)
    V = LinPoly.from_polynomial(Polynomial.zero(N))
    for (i, j), key in terms_Q.items():
        factor = Wl[i] * Wl[j] * (1.0 if i == j else 2.0)
        V = V + LinPoly.combination(N, [(key, factor)])
    for i in range(m):
        V = V + LinPoly.from_polynomial(Wl[i] * Wl[i] * eps1)
    trace = LinPoly.combination(N, [(terms_Q[(i, i)], Polynomial.constant(N, 1.0)) for i in range(m)],
                                Polynomial.constant(N, m * eps1 - m))
    prog.add_eq(trace, "trace")

    cvar = prog.new_scalar("c")

    def lie_full(P: Polynomial) -> Polynomial:
        if P.nvars == N0:
            return lift(rs.lie_derivative(P).numerator)
        return lift(rs.lie_derivative(_drop_last(P, N0)).numerator)

    Vd = V.apply_linear(lie_full, N)
    D = lift(rs.D)
    expr = (Vd + cvar * (M * D)) * (-1.0)
    # manifold inequalities of the recast system, plus M >= 0
    G2 = [lift(g) for g in rs.G2] + ([Mvar] if Mvar is not None else [])
    T = _expr_degree(expr)
    for k, g in enumerate(G2):
        h = (T - g.degree) // 2
        if h >= 0:
            s = prog.new_sos(f"g{k + 1}", _standard(ring, N, h))
            expr = expr - s * g
    prog.add_sos(expr, "decrease")
    prog.maximize(cvar)
    res = prog.solve(mode="objective", opts=opts)
    if not res.feasible:
        return _failure(res, "no quadratic certificate")
    c_w = float(res.values["c"])
    if not c_w > min_rate:
        return Infeasible(c_w, "infeasible", f"best rate c = {c_w:.3e} is not above {min_rate:g}")
    Qm = np.asarray(res.sdp.X[P_blk], dtype=float) + eps1 * np.eye(m)
    Vp = Polynomial.zero(N0)
    for i in range(m):
        for j in range(m):
            Vp = Vp + W[i] * W[j] * float(Qm[i, j])
    lam_max = float(np.linalg.eigvalsh(0.5 * (Qm + Qm.T))[-1])
    alpha = p / q
    c_lyap = c_w / lam_max ** alpha
    mults: Dict[str, Polynomial] = {}
    info: Dict[str, object] = {"p": p, "q": q, "c_w": c_w, "lambda_max": lam_max, "eps1": eps1, "w": w_choice}
    for k, v in res.multipliers.items():
        if k == "Q":
            continue
        if v.nvars == N0:
            mults[k] = v
        else:
            info[f"multiplier {k} over ({', '.join(names)})"] = v.render(names)
    return Certificate("cor1", sys.name, list(rs.names), rs.norig, Vp, c_lyap, alpha, 0.0, mults,
                       dict(res.certificates), float("nan"), info=info, recast_report=rs.report(), rs=rs)


def _drop_last(P: Polynomial, n: int) -> Polynomial:
    terms = {}
    for m, c in P.terms.items():
        if any(m[n:]):
            raise ValueError("polynomial depends on the auxiliary variable")
        terms[m[:n]] = c
    return Polynomial(n, terms)


# ---------------------------------------------------------------------------
# sampling validator


@dataclass
class ValidationReport:
    """Outcome of checking ``Vdot <= -c V^alpha`` at quasi-random samples."""

    n_samples: int
    domain: str
    c: float
    alpha: float
    min_V: float
    max_violation: float
    chat: Dict[float, float]
    alpha_hat: Optional[float]
    violations: List[Tuple[Tuple[float, ...], float]]
    n_nonfinite: int = 0
    tol: float = VALIDATION_TOL

    @property
    def ok(self) -> bool:
        return not self.violations and self.min_V > 0

    def summary(self) -> str:
        lines = [
            f"samples: {self.n_samples} in {self.domain}",
            f"c: {self.c:.6g}  alpha: {self.alpha:.6g}",
            f"min V: {self.min_V:.6e}",
            f"max(Vdot + c V^alpha): {self.max_violation:.6e}  (tolerance {self.tol:g})",
            f"violations: {len(self.violations)}",
            "fitted c(alpha): " + ", ".join(f"{a:.1f}:{v:.4e}" for a, v in self.chat.items()),
            f"alpha_hat: {'none' if self.alpha_hat is None else format(self.alpha_hat, '.1f')}",
        ]
        if self.n_nonfinite:
            lines.append(f"non-finite samples dropped: {self.n_nonfinite}")
        lines.append("result: " + ("PASS" if self.ok else "FAIL"))
        return "\n".join(lines)


def sample_box(lo: np.ndarray, hi: np.ndarray, n: int, r_excl: float = 0.0, seed: int = 0) -> np.ndarray:
    """``n`` scrambled Sobol points in the box ``[lo, hi]`` outside the ball of radius ``r_excl``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    sob = qmc.Sobol(len(lo), scramble=True, seed=seed)
    out: List[np.ndarray] = []
    have = 0
    while have < n:
        m = max(int(math.ceil(math.log2(max(n - have, 2) * 1.25))), 1)
        X = lo + sob.random_base2(m) * (hi - lo)
        if r_excl > 0:
            X = X[np.linalg.norm(X, axis=1) >= r_excl]
        out.append(X)
        have += len(X)
    return np.vstack(out)[:n]


def _box(box, n: int) -> Tuple[np.ndarray, np.ndarray]:
    if np.isscalar(box):
        return -float(box) * np.ones(n), float(box) * np.ones(n)
    arr = np.asarray(box, dtype=float)
    if arr.shape == (2,):
        return arr[0] * np.ones(n), arr[1] * np.ones(n)
    if arr.shape == (n, 2):
        return arr[:, 0], arr[:, 1]
    raise ValueError("box must be a half-width, a (lo, hi) pair or an (n, 2) array")


def validate(sys: Union[DynSystem, RecastSystem], V: Polynomial, c: float, alpha: float, box=2.0,
             n_samples: int = 100000, r_excl: float = 1e-3, level: Optional[float] = None,
             seed: int = 0, tol: float = VALIDATION_TOL, fit_floor: float = FIT_FLOOR,
             max_report: int = 20) -> ValidationReport:
    """Check ``Vdot + c V^alpha <= tol`` at quasi-random points of ``box`` minus the ``r_excl`` ball.

    ``Vdot`` is evaluated with the exact chain rule on the original states
    (slacks are computed from the states), independently of the SOS
    program.  With ``level`` set, only samples with ``V <= level`` are
    checked.  ``chat[a]`` is the largest ``c`` with ``Vdot <= -c V^a`` at all
    samples; ``alpha_hat`` is the smallest grid exponent whose ``chat``
    exceeds ``fit_floor``.
    """
    rs = sys if isinstance(sys, RecastSystem) else recast(sys)
    n = rs.norig
    if V.nvars == n and rs.nvars != n:
        V = rs.embed_original(V)
    if V.nvars != rs.nvars:
        raise ValueError(f"V has {V.nvars} variables, expected {rs.nvars}")
    lo, hi = _box(box, n)
    X = sample_box(lo, hi, n_samples, r_excl, seed)
    vv = V.evaluate_many(rs.lift_many(X))
    if level is not None:
        keep = vv <= level
        X, vv = X[keep], vv[keep]
    with np.errstate(all="ignore"):
        vd = rs.vdot(V, X)
    finite = np.isfinite(vd) & np.isfinite(vv)
    nonfinite = int((~finite).sum())
    X, vv, vd = X[finite], vv[finite], vd[finite]
    vpos = np.maximum(vv, 0.0)
    lhs = vd + c * (vpos ** alpha if alpha != 0 else np.ones_like(vv))
    max_v = float(lhs.max()) if len(lhs) else -math.inf
    bad = np.nonzero(lhs > tol)[0]
    order = bad[np.argsort(-lhs[bad])][:max_report]
    violations = [(tuple(float(v) for v in X[k]), float(lhs[k])) for k in order]
    chat: Dict[float, float] = {}
    pos = vv > 0
    for a in ALPHA_GRID:
        if not pos.any():
            chat[a] = -math.inf
            continue
        with np.errstate(all="ignore"):
            ratio = -vd[pos] / vv[pos] ** a
        chat[a] = float(np.min(ratio))
    alpha_hat = next((a for a in ALPHA_GRID if chat[a] > fit_floor), None)
    dom = "box " + " x ".join(f"[{a:g},{b:g}]" for a, b in zip(lo, hi))
    if r_excl > 0:
        dom += f" minus ball r={r_excl:g}"
    if level is not None:
        dom += f" within V <= {level:g}"
    min_V = float(vv.min()) if len(vv) else math.nan
    rep = ValidationReport(len(vv), dom, float(c), float(alpha), min_V, max_v, chat, alpha_hat,
                           violations, nonfinite, tol)
    if len(vv) and min_V <= 0:
        k = int(np.argmin(vv))
        rep.violations.append((tuple(float(v) for v in X[k]), min_V))
    return rep


def settling_bound(cert: Certificate, x0: Sequence[float]) -> float:
    """Upper bound on the settling time from ``x0``: ``V^(1-alpha) / (c (1-alpha))``."""
    V0 = cert.value(x0)
    if cert.level is not None and V0 > cert.level:
        raise ValueError(f"x0 lies outside the certified region (V = {V0:.4g} > {cert.level:g})")
    return settling_time_bound(V0, cert.c, cert.alpha)


def settling_time_bound(V0: float, c: float, alpha: float) -> float:
    if not (0 <= alpha < 1):
        raise ValueError("a finite settling bound needs 0 <= alpha < 1")
    if c <= 0:
        raise ValueError("c must be positive")
    V0 = max(float(V0), 0.0)
    if alpha == 0:
        return V0 / c
    return V0 ** (1 - alpha) / (c * (1 - alpha))
