"""Compile sum-of-squares programs into block SDPs and read certificates back.

Constraints may live in a quotient ring: when a :class:`Ring` carries binomial
rewrite rules ``z^k -> m(x)`` (the recast equality relations), every
polynomial is reduced to normal form before coefficients are matched.  That
is the same as adding a free polynomial multiplier for each relation, but
keeps the SDP small.  Gram bases are built from standard monomials and pruned
with weighted degree windows (one per grading of the ring).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import ceil, floor
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .poly import LinPoly, Monomial, Polynomial, grlex_key, monomial_basis
from .sdp import SdpOptions, SdpProblem, SdpSolution, phase1, solve

log = logging.getLogger(__name__)

PSD_TOL = 1e-8
RESIDUAL_TOL = 1e-6
FEAS_TOL = 1e-7


@dataclass
class Ring:
    """Polynomial ring, optionally modulo relations ``z_k^e = r_k(x)``.

    ``rules`` holds ``(variable, power, replacement)`` triples.  The
    replacement is an exponent tuple (a binomial relation) or a dict
    ``{exponents: coefficient}``.  Leading powers are in distinct variables
    and replacements never contain their own leading variable, so the rules
    form a Groebner basis for a lex order and the normal form is unique.
    ``gradings`` are weight vectors under which every rule is homogeneous;
    they default to one per variable when there are no rules.
    """

    nvars: int
    rules: List[Tuple[int, int, object]] = field(default_factory=list)
    gradings: Optional[List[Tuple[int, ...]]] = None

    def __post_init__(self):
        if self.gradings is None:
            self.gradings = ([] if self.rules else
                             [tuple(1 if k == i else 0 for k in range(self.nvars)) for i in range(self.nvars)])
        self._cache: Dict[Monomial, Dict[Monomial, float]] = {}
        self.binomial = all(not isinstance(rep, dict) for _, _, rep in self.rules)

    @classmethod
    def from_recast(cls, rs) -> "Ring":
        n = rs.norig
        grads = []
        for i in range(n):
            w = [0] * rs.nvars
            w[i] = rs.weights[i]
            for k, s in enumerate(rs.slacks):
                if s.var == i:
                    w[n + k] = rs.weights[n + k]
            grads.append(tuple(w))
        return cls(rs.nvars, list(rs.reduction), grads)

    def nf_terms(self, m: Monomial) -> Dict[Monomial, float]:
        """Normal form of a monomial as ``{monomial: coefficient}``."""
        out = self._cache.get(m)
        if out is not None:
            return out
        e = list(m)
        for zi, k, rep in self.rules:
            if e[zi] < k:
                continue
            if not isinstance(rep, dict):
                t, r = divmod(e[zi], k)
                e[zi] = r
                for j, v in enumerate(rep):
                    e[j] += t * v
                out = self.nf_terms(tuple(e))
                break
            e[zi] -= k
            out = {}
            for rm, rc in rep.items():
                for mm, mc in self.nf_terms(tuple(a + b for a, b in zip(e, rm))).items():
                    out[mm] = out.get(mm, 0.0) + rc * mc
            break
        else:
            out = {tuple(e): 1.0}
        self._cache[m] = out
        return out

    def nf(self, m: Monomial) -> Monomial:
        """Normal form of a monomial under binomial rules."""
        t = self.nf_terms(m)
        if len(t) != 1 or next(iter(t.values())) != 1.0:
            raise ValueError("monomial normal form is not a monomial; use nf_terms")
        return next(iter(t))

    def reduce(self, p: Polynomial) -> Polynomial:
        if not self.rules:
            return p
        if self.binomial:
            return p.map_monomials(self.nf)
        terms: Dict[Monomial, float] = {}
        for m, c in p.terms.items():
            for mm, mc in self.nf_terms(m).items():
                terms[mm] = terms.get(mm, 0.0) + c * mc
        return Polynomial(p.nvars, terms)

    def reduce_lin(self, p: LinPoly) -> LinPoly:
        if not self.rules:
            return p
        if self.binomial:
            return p.map_monomials(self.nf)
        terms: Dict[Monomial, Dict] = {}
        for m, d in p.terms.items():
            for mm, mc in self.nf_terms(m).items():
                acc = terms.setdefault(mm, {})
                for k, v in d.items():
                    acc[k] = acc.get(k, 0.0) + v * mc
        return LinPoly(p.nvars, terms)

    def is_standard(self, m: Monomial) -> bool:
        return all(m[zi] < k for zi, k, _ in self.rules)


@dataclass
class GramCertificate:
    basis: List[Monomial]
    gram: np.ndarray
    residual: float
    min_eig: float
    squares: List[Polynomial]
    target: Polynomial
    name: str = ""
    scale: float = 1.0

    def ok(self, psd_tol: float = PSD_TOL, residual_tol: float = RESIDUAL_TOL) -> bool:
        """Tolerances are absolute for O(1) data and relative below that.

        Without the relative part a polynomial whose coefficients are all
        around ``residual_tol`` would pass regardless of its sign.
        """
        gram_scale = float(np.max(np.abs(self.gram))) if self.gram.size else 0.0
        return (self.min_eig >= -psd_tol * min(1.0, gram_scale)
                and self.residual <= residual_tol * min(1.0, self.scale))


@dataclass
class Infeasible:
    slack: float
    status: str
    message: str = ""


class FragileCertificate(RuntimeError):
    """A solution whose re-verification failed."""


# ---------------------------------------------------------------------------


def gram_form(nvars: int, basis: Sequence[Monomial], Q: np.ndarray, ring: Optional[Ring] = None) -> Polynomial:
    terms: Dict[Monomial, float] = {}
    nb = len(basis)
    for i in range(nb):
        for j in range(i, nb):
            v = Q[i, j] * (1.0 if i == j else 2.0)
            if v == 0.0:
                continue
            m = tuple(a + b for a, b in zip(basis[i], basis[j]))
            if ring is None:
                terms[m] = terms.get(m, 0.0) + v
                continue
            for mm, mc in ring.nf_terms(m).items():
                terms[mm] = terms.get(mm, 0.0) + v * mc
    return Polynomial(nvars, terms, tol=0.0)


def gram_certificate(target: Polynomial, basis: Sequence[Monomial], Q: np.ndarray,
                     ring: Optional[Ring] = None, name: str = "") -> GramCertificate:
    """Check ``target == basis^T Q basis`` (modulo the ring) and factor ``Q``."""
    Q = 0.5 * (Q + Q.T)
    nv = target.nvars
    rec = gram_form(nv, basis, Q, ring)
    tgt = ring.reduce(target) if ring is not None else target
    diff = tgt - rec
    residual = diff.max_abs_coef()
    if len(basis):
        lam, vec = np.linalg.eigh(Q)
        min_eig = float(lam[0])
    else:
        lam, vec, min_eig = np.zeros(0), np.zeros((0, 0)), 0.0
    squares = []
    for k in range(len(lam)):
        if lam[k] <= 0:
            continue
        s = np.sqrt(lam[k])
        squares.append(Polynomial(nv, {m: s * vec[i, k] for i, m in enumerate(basis)}))
    return GramCertificate(list(basis), Q, float(residual), min_eig, squares, target, name,
                           float(tgt.max_abs_coef()))


def sum_of_squares(squares: Sequence[Polynomial], nvars: int, ring: Optional[Ring] = None) -> Polynomial:
    total = Polynomial.zero(nvars)
    for q in squares:
        total = total + q * q
    return ring.reduce(total) if ring is not None else total


def strip_square_factor(expr: LinPoly) -> Tuple[LinPoly, Monomial]:
    """Divide out the largest even monomial ``m^2`` that divides every term.

    ``expr = m^2 * rest`` and ``m^2 >= 0``, so ``rest`` SOS implies ``expr`` SOS.
    """
    support = [m for m, d in expr.terms.items() if any(v != 0 for v in d.values())]
    if not support:
        return expr, (0,) * expr.nvars
    low = [min(m[i] for m in support) // 2 * 2 for i in range(expr.nvars)]
    if not any(low):
        return expr, tuple(low)
    terms = {tuple(a - b for a, b in zip(m, low)): dict(expr.terms[m]) for m in support}
    return LinPoly(expr.nvars, terms), tuple(low)


# ---------------------------------------------------------------------------


@dataclass
class _Block:
    name: str
    basis: List[Monomial]
    kind: str  # "constraint", "multiplier", "scalar"
    expr: Optional[LinPoly] = None


@dataclass
class SosResult:
    status: str  # "feasible", "infeasible", "fragile"
    slack: float
    values: Dict[str, object]
    certificates: Dict[str, GramCertificate]
    multipliers: Dict[str, Polynomial]
    sdp: Optional[SdpSolution]
    objective: Optional[float] = None
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


class SosProgram:
    """Builder for SOS programs whose constraints are affine in the unknowns."""

    def __init__(self, nvars: int, ring: Optional[Ring] = None, names: Optional[Sequence[str]] = None):
        self.nvars = nvars
        self.ring = ring or Ring(nvars)
        self.names = list(names) if names else [f"x{i + 1}" for i in range(nvars)]
        self.blocks: List[_Block] = []
        self.nfree = 0
        self.free_names: List[str] = []
        self.polys: Dict[str, LinPoly] = {}
        self.scalars: Dict[str, LinPoly] = {}
        self.constraints: List[Tuple[str, LinPoly]] = []
        self.equalities: List[Tuple[str, LinPoly]] = []
        self.objective: Optional[LinPoly] = None

    # -- unknowns ----------------------------------------------------------
    def _free(self, name: str) -> Tuple:
        k = self.nfree
        self.nfree += 1
        self.free_names.append(name)
        return ("c", k)

    def new_poly(self, name: str, basis: Sequence[Monomial]) -> LinPoly:
        """Polynomial with a free coefficient per basis monomial."""
        pairs = []
        for m in basis:
            key = self._free(f"{name}[{m}]")
            pairs.append((key, Polynomial(self.nvars, {tuple(m): 1.0})))
        p = LinPoly.combination(self.nvars, pairs)
        self.polys[name] = p
        return p

    def new_scalar(self, name: str, nonneg: bool = False) -> LinPoly:
        one = Polynomial.constant(self.nvars, 1.0)
        if nonneg:
            b = len(self.blocks)
            self.blocks.append(_Block(name, [(0,) * self.nvars], "scalar"))
            key = ("g", b, 0, 0)
        else:
            key = self._free(name)
        p = LinPoly.combination(self.nvars, [(key, one)])
        self.scalars[name] = p
        return p

    def new_sos(self, name: str, half_basis: Sequence[Monomial]) -> LinPoly:
        """SOS multiplier ``b^T Q b`` with ``Q`` PSD over ``half_basis``."""
        basis = sorted({tuple(m) for m in half_basis}, key=grlex_key)
        b = len(self.blocks)
        self.blocks.append(_Block(name, basis, "multiplier"))
        p = self._gram_linpoly(b, basis)
        self.polys[name] = p
        return p

    def _gram_linpoly(self, b: int, basis: List[Monomial]) -> LinPoly:
        terms: Dict[Monomial, Dict] = {}
        for i in range(len(basis)):
            for j in range(i, len(basis)):
                m = tuple(x + y for x, y in zip(basis[i], basis[j]))
                terms.setdefault(m, {})[("g", b, i, j)] = 1.0 if i == j else 2.0
        return LinPoly(self.nvars, terms)

    # -- constraints -----------------------------------------------------
    def add_sos(self, expr, name: str = "", basis: Optional[Sequence[Monomial]] = None) -> str:
        if isinstance(expr, Polynomial):
            expr = LinPoly.from_polynomial(expr)
        name = name or f"c{len(self.constraints) + 1}"
        expr = self.ring.reduce_lin(expr)
        if basis is None:
            basis = self.gram_basis(expr)
        self.constraints.append((name, expr))
        b = len(self.blocks)
        self.blocks.append(_Block(name, sorted({tuple(m) for m in basis}, key=grlex_key), "constraint", expr))
        return name

    def add_eq(self, expr, name: str = ""):
        if isinstance(expr, Polynomial):
            expr = LinPoly.from_polynomial(expr)
        self.equalities.append((name or f"e{len(self.equalities) + 1}", self.ring.reduce_lin(expr)))

    def maximize(self, expr: LinPoly):
        if expr.degree != 0:
            raise ValueError("objective must be a scalar expression")
        self.objective = expr

    # -- Gram basis --------------------------------------------------------
    def gram_basis(self, expr: LinPoly) -> List[Monomial]:
        support = [m for m, d in expr.terms.items() if any(v != 0 for v in d.values())]
        if not support:
            return []
        self._check_parity(expr)
        maxdeg = max(sum(m) for m in support)
        half = maxdeg // 2
        windows = []
        grads = list(self.ring.gradings)
        if len(grads) > 1:
            # the sum of the gradings bounds the total weighted degree
            grads.append(tuple(sum(col) for col in zip(*grads)))
        for w in grads:
            vals = [sum(a * b for a, b in zip(w, m)) for m in support]
            windows.append((w, ceil(min(vals) / 2), floor(max(vals) / 2)))
        out = []
        for m in monomial_basis(self.nvars, half, 0):
            if not self.ring.is_standard(m):
                continue
            ok = True
            for w, lo, hi in windows:
                v = sum(a * b for a, b in zip(w, m))
                if v < lo or v > hi:
                    ok = False
                    break
            if ok:
                out.append(m)
        return out

    def _check_parity(self, expr: LinPoly):
        if self.ring.rules:
            return
        fixed = expr.constant_part()
        unknown_deg = max((sum(m) for m, d in expr.terms.items()
                           if any(k is not None and v != 0 for k, v in d.items())), default=-1)
        if not fixed.is_zero() and fixed.degree % 2 == 1 and fixed.degree > unknown_deg:
            raise ValueError(f"SOS constraint has odd degree {fixed.degree}; it cannot be a sum of squares")

    # -- compilation -------------------------------------------------------
    def compile(self) -> SdpProblem:
        prob = SdpProblem([], 0)
        for blk in self.blocks:
            prob.add_block(len(blk.basis), blk.name)
        for nm in self.free_names:
            prob.add_free(nm)

        def linrow(coefs: Dict, sign: float, rhs_acc: List[float], entries: List, free: List):
            for k, v in coefs.items():
                if v == 0:
                    continue
                if k is None:
                    rhs_acc[0] -= sign * v
                elif k[0] == "c":
                    free.append((k[1], sign * v))
                elif k[0] == "g":
                    entries.append((k[1], k[2], k[3], sign * v))
                else:
                    raise ValueError(f"unknown key {k!r}")

        for b, blk in enumerate(self.blocks):
            if blk.kind == "multiplier":
                continue
            if blk.kind == "scalar":
                continue
            expr = blk.expr
            gram = LinPoly(self.nvars, {})
            gram_terms: Dict[Monomial, Dict] = {}
            basis = blk.basis
            for i in range(len(basis)):
                for j in range(i, len(basis)):
                    prod = tuple(x + y for x, y in zip(basis[i], basis[j]))
                    for m, mc in self.ring.nf_terms(prod).items():
                        d = gram_terms.setdefault(m, {})
                        d[("g", b, i, j)] = d.get(("g", b, i, j), 0.0) + (1.0 if i == j else 2.0) * mc
            expr_red = self.ring.reduce_lin(expr)
            monos = sorted(set(expr_red.terms) | set(gram_terms), key=grlex_key)
            for m in monos:
                entries, free, rhs = [], [], [0.0]
                linrow(expr_red.terms.get(m, {}), 1.0, rhs, entries, free)
                linrow(gram_terms.get(m, {}), -1.0, rhs, entries, free)
                if not entries and not free:
                    if abs(rhs[0]) > 0:
                        # fixed coefficient with no unknowns to absorb it
                        prob.add_constraint([], [], rhs[0])
                    continue
                prob.add_constraint(entries, free, rhs[0])
        for name, expr in self.equalities:
            for m in sorted(expr.terms, key=grlex_key):
                entries, free, rhs = [], [], [0.0]
                linrow(expr.terms[m], 1.0, rhs, entries, free)
                if entries or free or rhs[0] != 0:
                    prob.add_constraint(entries, free, rhs[0])
        if self.objective is not None:
            for k, v in self.objective.terms.get((0,) * self.nvars, {}).items():
                if k is None:
                    continue
                if k[0] == "c":
                    prob.free_objective[k[1]] = prob.free_objective.get(k[1], 0.0) + v
                else:
                    prob.objective.append((k[1], k[2], k[3], v))
        return prob

    # -- solving and extraction -------------------------------------------
    def _values(self, sol: SdpSolution) -> Dict:
        vals: Dict = {}
        for k in range(self.nfree):
            vals[("c", k)] = float(sol.u[k])
        for b, blk in enumerate(self.blocks):
            X = sol.X[b]
            n = len(blk.basis)
            for i in range(n):
                for j in range(i, n):
                    vals[("g", b, i, j)] = float(X[i, j])
        return vals

    def _candidate(self, sol: Optional[SdpSolution]) -> Dict[str, object]:
        """Best-effort unknown values from an unsuccessful solve (used to seed alternations)."""
        if sol is None or sol.X is None or sol.u is None:
            return {}
        try:
            vals = self._values(sol)
        except (IndexError, TypeError):
            return {}
        out: Dict[str, object] = {}
        for name, p in self.polys.items():
            out[name] = p.evaluate_unknowns(vals)
        for name, p in self.scalars.items():
            out[name] = p.evaluate_unknowns(vals).coeff((0,) * self.nvars)
        return out

    def solve(self, mode: str = "auto", opts: Optional[SdpOptions] = None, feas_tol: float = FEAS_TOL,
              accept_tol: float = 1e-6, psd_tol: float = PSD_TOL,
              residual_tol: float = RESIDUAL_TOL, reverify: bool = True) -> SosResult:
        """Solve the program.

        ``mode="phase1"`` maximizes the uniform eigenvalue margin of every Gram
        block; ``mode="objective"`` maximizes the declared objective.  Many
        feasible programs only admit singular Gram matrices (margin 0), so a
        margin down to ``-accept_tol`` is passed on to extraction and the
        re-verification of every certificate decides.
        """
        if mode == "auto":
            mode = "objective" if self.objective is not None else "phase1"
        prob = self.compile()
        if mode == "phase1":
            res = phase1(prob, opts, feas_tol=feas_tol)
            sol, slack = res.solution, res.slack
            if not np.isfinite(slack) or slack < -accept_tol:
                return SosResult("infeasible", slack, self._candidate(sol), {}, {}, sol,
                                 message=f"phase-I margin {slack:.3e} ({sol.status})")
        else:
            sol = solve(prob, opts)
            slack = float("nan")
            if sol.status in ("infeasible", "dual_infeasible"):
                return SosResult("infeasible", slack, {}, {}, {}, sol, message=sol.status)
        vals = self._values(sol)
        result = self.extract(vals, sol, slack, psd_tol, residual_tol, reverify)
        if mode == "phase1" and result.status == "fragile" and slack <= feas_tol:
            result.status = "infeasible"
        return result

    def extract(self, vals: Dict, sol: Optional[SdpSolution], slack: float, psd_tol: float = PSD_TOL,
                residual_tol: float = RESIDUAL_TOL, reverify: bool = True) -> SosResult:
        out: Dict[str, object] = {}
        for name, p in self.polys.items():
            out[name] = p.evaluate_unknowns(vals)
        for name, p in self.scalars.items():
            out[name] = p.evaluate_unknowns(vals).coeff((0,) * self.nvars)
        certs: Dict[str, GramCertificate] = {}
        mults: Dict[str, Polynomial] = {}
        fragile = []
        for b, blk in enumerate(self.blocks):
            if blk.kind == "multiplier":
                mults[blk.name] = out[blk.name]
                Q = sol.X[b] if sol is not None else None
                if Q is not None and len(blk.basis):
                    lam = np.linalg.eigvalsh(0.5 * (Q + Q.T))[0]
                    if lam < -psd_tol:
                        fragile.append(f"{blk.name}: multiplier Gram min eigenvalue {lam:.2e}")
            elif blk.kind == "constraint":
                target = blk.expr.evaluate_unknowns(vals)
                Q = np.array([[vals[("g", b, min(i, j), max(i, j))] for j in range(len(blk.basis))]
                              for i in range(len(blk.basis))]).reshape(len(blk.basis), len(blk.basis))
                cert = gram_certificate(target, blk.basis, Q, self.ring, blk.name)
                if reverify and not cert.ok(psd_tol, residual_tol):
                    alt = check_sos(target, ring=self.ring, basis=blk.basis)
                    if isinstance(alt, GramCertificate) and alt.ok(psd_tol, residual_tol):
                        alt.name = blk.name
                        cert = alt
                if not cert.ok(psd_tol, residual_tol):
                    fragile.append(f"{blk.name}: residual {cert.residual:.2e}, min eig {cert.min_eig:.2e}")
                certs[blk.name] = cert
            elif blk.kind == "scalar":
                if sol is not None and sol.X[b][0, 0] < -psd_tol:
                    fragile.append(f"{blk.name}: negative scalar {sol.X[b][0, 0]:.2e}")
        objective = None
        if self.objective is not None:
            objective = self.objective.evaluate_unknowns(vals).coeff((0,) * self.nvars)
        status = "feasible" if not fragile else "fragile"
        msg = "; ".join(fragile) if fragile else ""
        if fragile:
            msg = "numerically fragile certificate: " + msg
        return SosResult(status, slack, out, certs, mults, sol, objective, msg)


def check_sos(p: Polynomial, ring: Optional[Ring] = None, basis: Optional[Sequence[Monomial]] = None,
              opts: Optional[SdpOptions] = None, feas_tol: float = FEAS_TOL):
    """Search for a Gram certificate of ``p``; returns :class:`GramCertificate` or :class:`Infeasible`."""
    prog = SosProgram(p.nvars, ring)
    try:
        prog.add_sos(p, "p", basis)
    except ValueError as exc:
        return Infeasible(-np.inf, "odd_degree", str(exc))
    blk = prog.blocks[0]
    if not blk.basis:
        red = prog.ring.reduce(p)
        if red.is_zero():
            return GramCertificate([], np.zeros((0, 0)), 0.0, 0.0, [], p, "p", 0.0)
        return Infeasible(-np.inf, "empty_basis", "no admissible Gram basis for a nonzero polynomial")
    prob = prog.compile()
    res = phase1(prob, opts, feas_tol=feas_tol)
    if not np.isfinite(res.slack):
        return Infeasible(res.slack, res.solution.status, "phase-I problem infeasible")
    cert = gram_certificate(p, blk.basis, res.solution.X[0], prog.ring, "p")
    if cert.ok():
        return cert
    return Infeasible(res.slack, res.solution.status,
                      f"phase-I margin {res.slack:.3e}, residual {cert.residual:.2e}, min eig {cert.min_eig:.2e}")
