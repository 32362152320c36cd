"""Polynomial recast of rational-power dynamics.

Every product ``sign(x)^pi * |x|^(a/b)`` that appears in a system is written
as a monomial in slack variables attached to ``x``:

* ``odd`` slack, ``b`` odd: ``z = x^(1/b)`` (real odd root), tied by
  ``z^b - x = 0``.  Its derivative is ``z' = x' / (b z^(b-1))``.
* ``sgn`` slack, ``b`` even: ``z = sign(x)|x|^(1/b)``, tied by
  ``z^(2b) - x^2 = 0`` and ``z*x >= 0``.
* ``abs`` slack: ``z = |x|^(1/b)``, tied by ``z^(2b) - x^2 = 0`` and ``z >= 0``.

For the last two, ``z' = z x x' / (b x^2)``.  The slack denominators
(``z^(b-1)`` with ``b - 1`` even, or ``x^2``) are nonnegative everywhere, and
the recast field is stored multiplied by their product ``D``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .poly import Polynomial, grlex_key
from .sysparse import DynSystem, GenPoly, TermKey


@dataclass(frozen=True)
class Slack:
    """Slack ``z`` standing for a root of state ``var`` (see module docstring for ``kind``)."""

    var: int
    kind: str  # "odd", "sgn" or "abs"
    q: int

    def value(self, x: np.ndarray) -> np.ndarray:
        xi = np.asarray(x)[..., self.var]
        mag = np.abs(xi) ** (1.0 / self.q)
        if self.kind == "abs":
            return mag
        return np.sign(xi) * mag

    def describe(self, names: Sequence[str]) -> str:
        x = names[self.var]
        if self.kind == "abs":
            return f"|{x}|^(1/{self.q})"
        return f"sign({x})*|{x}|^(1/{self.q})"


@dataclass
class LieDerivative:
    """``dV/dt = numerator / denominator`` on the manifold, with ``denominator >= 0`` everywhere."""

    numerator: Polynomial
    denominator: Polynomial
    input_numerators: List[Polynomial] = field(default_factory=list)
    denominator_nonnegative: bool = True


@dataclass
class RecastSystem:
    sys: DynSystem
    names: List[str]
    slacks: List[Slack]
    field: List[Polynomial]
    input_fields: List[List[Polynomial]]
    numerators: List[Polynomial]
    denominators: List[Polynomial]
    D: Polynomial
    G1: List[Polynomial]
    G2: List[Polynomial]
    reduction: List[Tuple[int, int, Tuple[int, ...]]]
    weights: Tuple[int, ...]

    @property
    def norig(self) -> int:
        return self.sys.nstates

    @property
    def nvars(self) -> int:
        return len(self.names)

    @property
    def var_map(self) -> Dict[str, Tuple[str, Fraction, str]]:
        return {self.names[self.norig + k]: (self.names[s.var], Fraction(1, s.q), s.kind)
                for k, s in enumerate(self.slacks)}

    # -- lifting states to the extended variables --------------------------
    def lift(self, x: Sequence[float]) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, [float(s.value(x)) for s in self.slacks]])

    def lift_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = [X] + [s.value(X)[:, None] for s in self.slacks]
        return np.hstack(cols)

    def embed_original(self, p: Polynomial) -> Polynomial:
        """Polynomial over the original states re-expressed over the extended variables."""
        return p.embed(self.nvars, list(range(self.norig)))

    # -- normal form modulo the equality relations -----------------------
    def reduce_monomial(self, m: Tuple[int, ...]) -> Tuple[Tuple[int, ...], float]:
        """Normal form of a monomial under the binomial rules ``z^k -> x-monomial``."""
        m = list(m)
        for zi, k, rep in self.reduction:
            if m[zi] >= k:
                t, r = divmod(m[zi], k)
                m[zi] = r
                for j, e in enumerate(rep):
                    m[j] += t * e
        return tuple(m), 1.0

    def reduce(self, p: Polynomial) -> Polynomial:
        return p.map_monomials(lambda m: self.reduce_monomial(m)[0])

    def is_standard(self, m: Tuple[int, ...]) -> bool:
        return all(m[zi] < k for zi, k, _ in self.reduction)

    # -- derivatives -----------------------------------------------------
    def lie_derivative(self, V: Polynomial) -> LieDerivative:
        if V.nvars != self.nvars:
            raise ValueError(f"V has {V.nvars} variables, recast system has {self.nvars}")
        grads = V.gradient()
        num = Polynomial.zero(self.nvars)
        for g, f in zip(grads, self.field):
            if not g.is_zero() and not f.is_zero():
                num = num + g * f
        ins = []
        for col in self.input_fields:
            b = Polynomial.zero(self.nvars)
            for g, f in zip(grads, col):
                if not g.is_zero() and not f.is_zero():
                    b = b + g * f
            ins.append(b)
        return LieDerivative(num, self.D, ins)

    def vdot(self, V: Polynomial, X: np.ndarray, U: Optional[np.ndarray] = None) -> np.ndarray:
        """True derivative of ``V(lift(x))`` along the original dynamics at states ``X``.

        Evaluated from the chain rule directly, so it stays finite where the
        cleared denominator vanishes but the original field is smooth enough.
        """
        from .sysparse import eval_rhs_many

        X = np.atleast_2d(np.asarray(X, dtype=float))
        Z = self.lift_many(X)
        F = eval_rhs_many(self.sys, X, U)
        out = np.zeros(X.shape[0])
        grads = V.gradient()
        for i in range(self.norig):
            if not grads[i].is_zero():
                out += grads[i].evaluate_many(Z) * F[:, i]
        for k, s in enumerate(self.slacks):
            g = grads[self.norig + k]
            if g.is_zero():
                continue
            xi = X[:, s.var]
            z = Z[:, self.norig + k]
            with np.errstate(divide="ignore", invalid="ignore"):
                if s.kind == "odd":
                    zdot = F[:, s.var] / (s.q * z ** (s.q - 1))
                else:
                    zdot = z * F[:, s.var] / (s.q * xi)
            out += g.evaluate_many(Z) * zdot
        return out

    # -- text ------------------------------------------------------------
    def report(self) -> str:
        lines = ["variables: " + " ".join(self.names)]
        for k, s in enumerate(self.slacks):
            lines.append(f"slack {self.names[self.norig + k]} = {s.describe(self.names)}")
        for g in self.G1:
            lines.append(f"G1: {g.render(self.names)} = 0")
        for g in self.G2:
            lines.append(f"G2: {g.render(self.names)} >= 0")
        for name, d in zip(self.names, self.denominators):
            lines.append(f"denominator {name}': {d.render(self.names)}")
        lines.append(f"common denominator: {self.D.render(self.names)}")
        for name, f in zip(self.names, self.field):
            lines.append(f"D*{name}' = {f.render(self.names)}")
        return "\n".join(lines)


def _slack_needs(i: int, parity: int, r: Fraction) -> List[Tuple[int, str, int]]:
    a, b = r.numerator, r.denominator
    if b % 2 == 1:
        if a % 2 == parity:
            return [(i, "odd", b)] if b > 1 else []
        return ([(i, "odd", b)] if b > 1 and parity == 1 else []) + [(i, "abs", b)]
    return [(i, "sgn" if parity else "abs", b)]


def _express(i: int, parity: int, r: Fraction, index: Dict[Tuple[int, str, int], int]) -> Dict[int, int]:
    """Exponents (over extended variables) of ``sign(x_i)^parity |x_i|^r``."""
    a, b = r.numerator, r.denominator
    if b % 2 == 1:
        odd = i if b == 1 else index[(i, "odd", b)]
        if a % 2 == parity:
            return {odd: a}
        if parity == 0:
            return {index[(i, "abs", b)]: a}
        out = {index[(i, "abs", b)]: 1}
        if a > 1:
            out[odd] = a - 1
        return out
    return {index[(i, "sgn" if parity else "abs", b)]: a}


def _term_factors(key: TermKey, n: int):
    """Split a term into integer state powers and per-state (parity, rational power)."""
    ints = [0] * n
    rat: Dict[int, List] = {}
    for atom, e in key:
        kind = atom[0]
        if kind == "x":
            ints[atom[1]] += e
        elif kind in ("abs", "sgn"):
            i, r = atom[1], atom[2]
            entry = rat.setdefault(i, [0, Fraction(0)])
            entry[1] += e * r
            if kind == "sgn":
                entry[0] = (entry[0] + e) % 2
        else:
            raise ValueError("inputs must be split off before recasting")
    return ints, rat


def recast(sys: DynSystem, extra: Sequence[Tuple[int, int, Fraction]] = ()) -> RecastSystem:
    """Recast ``sys`` into polynomial form.

    ``extra`` lists additional ``(state, parity, power)`` quantities the caller
    wants expressible as monomials (the needed slacks are added).
    """
    n = sys.nstates
    gps: List[GenPoly] = list(sys.drift) + [g for row in sys.input_cols for g in row]

    needs = set()
    for g in gps:
        for key, _ in g.terms:
            _, rat = _term_factors(key, n)
            for i, (par, r) in rat.items():
                if r.denominator == 1 and r.numerator % 2 == par:
                    continue
                needs.update(_slack_needs(i, par, r))
    for i, par, r in extra:
        needs.update(_slack_needs(i, par, Fraction(r)))
    order = {"odd": 0, "sgn": 1, "abs": 2}
    slack_keys = sorted(needs, key=lambda s: (s[0], s[2], order[s[1]]))
    slacks = [Slack(i, kind, q) for i, kind, q in slack_keys]
    N = n + len(slacks)
    index = {k: n + j for j, k in enumerate(slack_keys)}

    used = set(sys.vars) | set(sys.inputs)
    names = list(sys.vars)
    for j in range(len(slacks)):
        cand = f"x{n + j + 1}"
        if cand in used or cand in names:
            cand = f"z{j + 1}"
            while cand in used or cand in names:
                cand = "_" + cand
        names.append(cand)

    def to_poly(g: GenPoly) -> Polynomial:
        terms: Dict[Tuple[int, ...], float] = {}
        for key, c in g.terms:
            ints, rat = _term_factors(key, n)
            e = ints + [0] * len(slacks)
            for i, (par, r) in rat.items():
                if r == 0:
                    if par:
                        raise ValueError("bare sign(x) factors cannot be recast")
                    continue
                for v, k in _express(i, par, r, index).items():
                    e[v] += k
            t = tuple(e)
            terms[t] = terms.get(t, 0.0) + c
        return Polynomial(N, terms)

    f_orig = [to_poly(g) for g in sys.drift]
    g_orig = [[to_poly(row[j]) for row in sys.input_cols] for j in range(sys.ninputs)]

    def var(k):
        return Polynomial.variable(N, k)

    G1, G2, reduction = [], [], []
    den_of: List[Polynomial] = []
    num_coef: List[Polynomial] = []  # z' = num_coef * x' / den
    for j, s in enumerate(slacks):
        z, x = var(n + j), var(s.var)
        if s.kind == "odd":
            G1.append(z ** s.q - x)
            rep = [0] * N
            rep[s.var] = 1
            reduction.append((n + j, s.q, tuple(rep)))
            den_of.append(z ** (s.q - 1))
            num_coef.append(Polynomial.constant(N, 1.0 / s.q))
        else:
            G1.append(z ** (2 * s.q) - x * x)
            rep = [0] * N
            rep[s.var] = 2
            reduction.append((n + j, 2 * s.q, tuple(rep)))
            G2.append(z * x if s.kind == "sgn" else z)
            den_of.append(x * x)
            num_coef.append(z * x * (1.0 / s.q))

    distinct: List[Polynomial] = []
    for d in den_of:
        if d not in distinct:
            distinct.append(d)
    D = Polynomial.constant(N, 1.0)
    for d in distinct:
        D = D * d

    def others(d: Polynomial) -> Polynomial:
        out = Polynomial.constant(N, 1.0)
        for e in distinct:
            if e != d:
                out = out * e
        return out

    field = [f * D for f in f_orig]
    input_fields = [[gi * D for gi in col] for col in g_orig]
    numerators = list(f_orig)
    denominators = [Polynomial.constant(N, 1.0)] * n
    for j, s in enumerate(slacks):
        mult = others(den_of[j])
        field.append(num_coef[j] * f_orig[s.var] * mult)
        numerators.append(num_coef[j] * f_orig[s.var])
        denominators.append(den_of[j])
        for col_full, col in zip(input_fields, g_orig):
            col_full.append(num_coef[j] * col[s.var] * mult)

    L = [1] * n
    for s in slacks:
        L[s.var] = lcm(L[s.var], s.q)
    weights = tuple(L) + tuple(L[s.var] // s.q for s in slacks)

    return RecastSystem(sys, names, slacks, field, input_fields, numerators, denominators, D,
                        G1, G2, reduction, weights)


def lie_derivative(V: Polynomial, rs: RecastSystem) -> LieDerivative:
    return rs.lie_derivative(V)
