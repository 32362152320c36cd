"""Sparse multivariate polynomials over the reals.

A :class:`Polynomial` is a map from exponent tuples to float coefficients on a
fixed number of variables.  Everything else in the package (recast fields,
Lyapunov candidates, SOS multipliers) is expressed with it.

:class:`LinPoly` is the companion type whose coefficients are affine
expressions in named unknowns; it is what SOS constraints are built from
before they are compiled into an SDP.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

DROP_TOL = 1e-12

Monomial = Tuple[int, ...]


class NonlinearError(ValueError):
    """Raised when an unknown would appear nonlinearly."""


def grlex_key(mono: Monomial):
    """Sort key for graded-lexicographic order (lower degree first, x1 > x2 within a degree)."""
    return (sum(mono), tuple(-e for e in mono))


def monomial_basis(nvars: int, max_deg: int, min_deg: int = 0) -> List[Monomial]:
    """All exponent vectors with ``min_deg <= degree <= max_deg`` in graded-lex order."""
    if min_deg < 0 or max_deg < min_deg:
        return []
    out = []
    for d in range(min_deg, max_deg + 1):
        block = []
        for combo in combinations_with_replacement(range(nvars), d):
            e = [0] * nvars
            for i in combo:
                e[i] += 1
            block.append(tuple(e))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


def basis_size(nvars: int, max_deg: int, min_deg: int = 0) -> int:
    return sum(comb(nvars + d - 1, d) for d in range(min_deg, max_deg + 1))


def _mono_add(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x + y for x, y in zip(a, b))


def _format_coef(c: float) -> str:
    return f"{c:.17g}"


class Polynomial:
    """Sparse real polynomial in ``nvars`` variables.

    Values are treated as immutable: every operation returns a new object and
    prunes coefficients whose magnitude is below ``DROP_TOL``.
    """

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Optional[Dict[Monomial, float]] = None, tol: float = DROP_TOL):
        if nvars < 0:
            raise ValueError("nvars must be nonnegative")
        self.nvars = nvars
        clean = {}
        if terms:
            for mono, c in terms.items():
                mono = tuple(int(e) for e in mono)
                if len(mono) != nvars:
                    raise ValueError(f"monomial {mono} does not have {nvars} exponents")
                if any(e < 0 for e in mono):
                    raise ValueError(f"negative exponent in {mono}")
                c = float(c)
                if abs(c) >= tol:
                    clean[mono] = clean.get(mono, 0.0) + c
            clean = {m: c for m, c in clean.items() if abs(c) >= tol}
        self.terms = clean

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, nvars: int) -> "Polynomial":
        return cls(nvars)

    @classmethod
    def constant(cls, nvars: int, value: float) -> "Polynomial":
        return cls(nvars, {(0,) * nvars: value})

    @classmethod
    def variable(cls, nvars: int, i: int) -> "Polynomial":
        if not 0 <= i < nvars:
            raise IndexError(f"variable index {i} out of range for {nvars} variables")
        e = [0] * nvars
        e[i] = 1
        return cls(nvars, {tuple(e): 1.0})

    @classmethod
    def monomial(cls, mono: Sequence[int], coef: float = 1.0) -> "Polynomial":
        return cls(len(mono), {tuple(mono): coef})

    @classmethod
    def _raw(cls, nvars: int, terms: Dict[Monomial, float], tol: float = DROP_TOL) -> "Polynomial":
        p = cls.__new__(cls)
        p.nvars = nvars
        p.terms = {m: c for m, c in terms.items() if abs(c) >= tol}
        return p

    # -- basic properties -------------------------------------------------
    @property
    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(m) for m in self.terms)

    @property
    def min_degree(self) -> int:
        if not self.terms:
            return 0
        return min(sum(m) for m in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def coeff(self, mono: Sequence[int]) -> float:
        return self.terms.get(tuple(mono), 0.0)

    def sorted_terms(self) -> List[Tuple[Monomial, float]]:
        return sorted(self.terms.items(), key=lambda kv: grlex_key(kv[0]))

    def max_abs_coef(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def variables_used(self) -> List[int]:
        return sorted({i for m in self.terms for i, e in enumerate(m) if e})

    # -- arithmetic -------------------------------------------------------
    def _check(self, other: "Polynomial"):
        if self.nvars != other.nvars:
            raise ValueError(f"variable-count mismatch: {self.nvars} vs {other.nvars}")

    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            self._check(other)
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial.constant(self.nvars, float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial._raw(self.nvars, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw(self.nvars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            return Polynomial._raw(self.nvars, {m: c * s for m, c in self.terms.items()})
        if not isinstance(other, Polynomial):
            return NotImplemented
        self._check(other)
        out: Dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = _mono_add(m1, m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial._raw(self.nvars, out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self * (1.0 / float(other))
        return NotImplemented

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("only nonnegative integer powers are supported")
        result = Polynomial.constant(self.nvars, 1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = result * base
            base = base * base
            k >>= 1
        return result

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.nvars == other.nvars and self.terms == other.terms

    def __hash__(self):
        return hash((self.nvars, frozenset(self.terms.items())))

    def almost_equal(self, other: "Polynomial", tol: float = 1e-9) -> bool:
        return (self - other).max_abs_coef() <= tol

    def diff(self, i: int) -> "Polynomial":
        if not 0 <= i < self.nvars:
            raise IndexError(f"variable index {i} out of range for {self.nvars} variables")
        out: Dict[Monomial, float] = {}
        for m, c in self.terms.items():
            e = m[i]
            if e:
                mm = list(m)
                mm[i] -= 1
                mm = tuple(mm)
                out[mm] = out.get(mm, 0.0) + c * e
        return Polynomial._raw(self.nvars, out)

    def gradient(self) -> List["Polynomial"]:
        return [self.diff(i) for i in range(self.nvars)]

    # -- evaluation -------------------------------------------------------
    def evaluate(self, z: Sequence[float]) -> float:
        z = list(z)
        if len(z) != self.nvars:
            raise ValueError(f"expected {self.nvars} values, got {len(z)}")
        total = 0.0
        for m, c in self.sorted_terms():
            v = c
            for zi, e in zip(z, m):
                if e:
                    v *= zi ** e
            total += v
        return total

    __call__ = evaluate

    def evaluate_many(self, Z: np.ndarray, chunk: int = 20000) -> np.ndarray:
        """Vectorized evaluation at the rows of ``Z`` (shape ``(N, nvars)``)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        if Z.shape[1] != self.nvars:
            raise ValueError(f"expected {self.nvars} columns, got {Z.shape[1]}")
        if not self.terms:
            return np.zeros(Z.shape[0])
        items = self.sorted_terms()
        E = np.array([m for m, _ in items], dtype=int).reshape(len(items), self.nvars)
        c = np.array([v for _, v in items])
        out = np.empty(Z.shape[0])
        maxdeg = E.max(axis=0) if E.size else np.zeros(self.nvars, dtype=int)
        for s in range(0, Z.shape[0], chunk):
            X = Z[s:s + chunk]
            M = np.ones((X.shape[0], len(items)))
            for i in range(self.nvars):
                if maxdeg[i] == 0:
                    continue
                pw = X[:, i:i + 1] ** np.arange(maxdeg[i] + 1)
                M *= pw[:, E[:, i]]
            out[s:s + chunk] = M @ c
        return out

    def to_function(self) -> Callable:
        """Compile to a Python callable ``f(x0, ..., x_{n-1})`` (works on floats and arrays)."""
        args = [f"x{i}" for i in range(self.nvars)]
        parts = []
        for m, c in self.sorted_terms():
            factors = [repr(c)]
            for i, e in enumerate(m):
                if e == 1:
                    factors.append(args[i])
                elif e > 1:
                    factors.append(f"{args[i]}**{e}")
            parts.append("*".join(factors))
        body = " + ".join(parts) if parts else "0.0"
        src = f"def _f({', '.join(args)}):\n    return {body}\n"
        ns: dict = {}
        exec(compile(src, "<poly>", "exec"), ns)
        return ns["_f"]

    # -- structural maps --------------------------------------------------
    def embed(self, nvars: int, positions: Sequence[int]) -> "Polynomial":
        """Re-express in a larger variable space; variable i goes to ``positions[i]``."""
        if len(positions) != self.nvars:
            raise ValueError("positions must list one target index per variable")
        out = {}
        for m, c in self.terms.items():
            e = [0] * nvars
            for i, k in enumerate(m):
                e[positions[i]] += k
            out[tuple(e)] = out.get(tuple(e), 0.0) + c
        return Polynomial._raw(nvars, out)

    def map_monomials(self, f: Callable[[Monomial], Monomial]) -> "Polynomial":
        out: Dict[Monomial, float] = {}
        for m, c in self.terms.items():
            mm = f(m)
            out[mm] = out.get(mm, 0.0) + c
        return Polynomial._raw(self.nvars, out)

    def substitute(self, i: int, q: "Polynomial") -> "Polynomial":
        """Replace variable ``i`` by the polynomial ``q``."""
        self._check(q)
        out = Polynomial.zero(self.nvars)
        cache = {0: Polynomial.constant(self.nvars, 1.0)}
        for m, c in self.terms.items():
            e = m[i]
            if e not in cache:
                cache[e] = q ** e
            rest = list(m)
            rest[i] = 0
            out = out + cache[e] * Polynomial(self.nvars, {tuple(rest): c})
        return out

    # -- text -------------------------------------------------------------
    def render(self, names: Optional[Sequence[str]] = None) -> str:
        """Text form: graded-lex order, ``^`` powers, explicit ``*``, 17 significant digits."""
        if names is None:
            names = [f"x{i + 1}" for i in range(self.nvars)]
        if not self.terms:
            return "0"
        pieces = []
        for k, (m, c) in enumerate(self.sorted_terms()):
            factors = [_format_coef(abs(c))]
            for name, e in zip(names, m):
                if e == 1:
                    factors.append(name)
                elif e > 1:
                    factors.append(f"{name}^{e}")
            body = "*".join(factors)
            if k == 0:
                pieces.append(("-" if c < 0 else "") + body)
            else:
                pieces.append((" - " if c < 0 else " + ") + body)
        return "".join(pieces)

    def __repr__(self):
        return f"Polynomial({self.render()})"


def add(p: Polynomial, q: Polynomial) -> Polynomial:
    return p + q


def mul(p: Polynomial, q: Polynomial) -> Polynomial:
    return p * q


def diff(p: Polynomial, i: int) -> Polynomial:
    return p.diff(i)


def evaluate(p: Polynomial, z: Sequence[float]) -> float:
    return p.evaluate(z)


def variables(nvars: int) -> List[Polynomial]:
    return [Polynomial.variable(nvars, i) for i in range(nvars)]


# ---------------------------------------------------------------------------
# polynomials with affine unknown coefficients


Unknown = Hashable
_CONST = None


def _lin_add(a: Dict, b: Dict, scale: float = 1.0) -> Dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + scale * v
    return out


class LinPoly:
    """Polynomial whose coefficients are affine in unknowns.

    ``terms`` maps a monomial to a dict ``{unknown: coef}``; the key ``None``
    holds the constant part of that coefficient.
    """

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms: Optional[Dict[Monomial, Dict[Unknown, float]]] = None):
        self.nvars = nvars
        self.terms = terms if terms is not None else {}

    @classmethod
    def from_polynomial(cls, p: Polynomial) -> "LinPoly":
        return cls(p.nvars, {m: {_CONST: c} for m, c in p.terms.items()})

    @classmethod
    def combination(cls, nvars: int, pairs: Iterable[Tuple[Unknown, Polynomial]],
                    const: Optional[Polynomial] = None) -> "LinPoly":
        """Build ``const + sum(u * p for u, p in pairs)``."""
        terms: Dict[Monomial, Dict[Unknown, float]] = {}
        for u, p in pairs:
            if p.nvars != nvars:
                raise ValueError("variable-count mismatch")
            for m, c in p.terms.items():
                d = terms.setdefault(m, {})
                d[u] = d.get(u, 0.0) + c
        if const is not None:
            for m, c in const.terms.items():
                d = terms.setdefault(m, {})
                d[_CONST] = d.get(_CONST, 0.0) + c
        return cls(nvars, terms)

    def unknowns(self) -> set:
        return {u for d in self.terms.values() for u in d if u is not _CONST}

    def is_constant(self) -> bool:
        return not self.unknowns()

    def monomials(self) -> List[Monomial]:
        return list(self.terms)

    @property
    def degree(self) -> int:
        live = [m for m, d in self.terms.items() if any(abs(v) > 0 for v in d.values())]
        return max((sum(m) for m in live), default=0)

    def constant_part(self) -> Polynomial:
        return Polynomial(self.nvars, {m: d.get(_CONST, 0.0) for m, d in self.terms.items()})

    def _coerce(self, other) -> "LinPoly":
        if isinstance(other, LinPoly):
            if other.nvars != self.nvars:
                raise ValueError("variable-count mismatch")
            return other
        if isinstance(other, Polynomial):
            if other.nvars != self.nvars:
                raise ValueError("variable-count mismatch")
            return LinPoly.from_polynomial(other)
        if isinstance(other, (int, float, np.floating, np.integer)):
            return LinPoly.from_polynomial(Polynomial.constant(self.nvars, float(other)))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        terms = {m: dict(d) for m, d in self.terms.items()}
        for m, d in other.terms.items():
            terms[m] = _lin_add(terms.get(m, {}), d)
        return LinPoly(self.nvars, terms)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            s = float(other)
            return LinPoly(self.nvars, {m: {k: v * s for k, v in d.items()} for m, d in self.terms.items()})
        if isinstance(other, LinPoly):
            if other.is_constant():
                other = other.constant_part()
            elif self.is_constant():
                return other * self.constant_part()
            else:
                raise NonlinearError("product of two expressions that both contain unknowns")
        if not isinstance(other, Polynomial):
            return NotImplemented
        if other.nvars != self.nvars:
            raise ValueError("variable-count mismatch")
        terms: Dict[Monomial, Dict[Unknown, float]] = {}
        for m2, c2 in other.terms.items():
            for m1, d in self.terms.items():
                m = _mono_add(m1, m2)
                tgt = terms.setdefault(m, {})
                for k, v in d.items():
                    tgt[k] = tgt.get(k, 0.0) + v * c2
        return LinPoly(self.nvars, terms)

    __rmul__ = __mul__

    def map_monomials(self, f: Callable[[Monomial], Monomial]) -> "LinPoly":
        terms: Dict[Monomial, Dict[Unknown, float]] = {}
        for m, d in self.terms.items():
            mm = f(m)
            terms[mm] = _lin_add(terms.get(mm, {}), d)
        return LinPoly(self.nvars, terms)

    def apply_linear(self, fn: Callable[[Polynomial], Polynomial], nvars: Optional[int] = None) -> "LinPoly":
        """Image under a linear map on polynomials, applied monomial by monomial."""
        nv = self.nvars if nvars is None else nvars
        terms: Dict[Monomial, Dict[Unknown, float]] = {}
        for m, d in self.terms.items():
            img = fn(Polynomial(self.nvars, {m: 1.0}))
            for mm, c in img.terms.items():
                tgt = terms.setdefault(mm, {})
                for k, v in d.items():
                    tgt[k] = tgt.get(k, 0.0) + v * c
        return LinPoly(nv, terms)

    def substitute(self, values: Dict[Unknown, float]) -> "LinPoly":
        """Fix some unknowns to numeric values."""
        terms = {}
        for m, d in self.terms.items():
            nd: Dict[Unknown, float] = {}
            for k, v in d.items():
                if k is not _CONST and k in values:
                    nd[_CONST] = nd.get(_CONST, 0.0) + v * values[k]
                else:
                    nd[k] = nd.get(k, 0.0) + v
            terms[m] = nd
        return LinPoly(self.nvars, terms)

    def evaluate_unknowns(self, values: Dict[Unknown, float]) -> Polynomial:
        """Substitute every unknown (missing ones count as zero) and return a Polynomial."""
        out = {}
        for m, d in self.terms.items():
            s = 0.0
            for k, v in d.items():
                s += v if k is _CONST else v * values.get(k, 0.0)
            out[m] = s
        return Polynomial(self.nvars, out)


@dataclass
class LinearSystem:
    """Rows ``A @ u = b`` over an ordered list of unknowns."""

    unknowns: List[Unknown]
    A: np.ndarray
    b: np.ndarray
    monomials: List[Monomial] = field(default_factory=list)

    @property
    def rows(self) -> List[Tuple[np.ndarray, float]]:
        return [(self.A[i], float(self.b[i])) for i in range(len(self.b))]

    def solve(self) -> Dict[Unknown, float]:
        sol, *_ = np.linalg.lstsq(self.A, self.b, rcond=None)
        return dict(zip(self.unknowns, sol))

    def residual(self, values: Dict[Unknown, float]) -> float:
        u = np.array([values.get(k, 0.0) for k in self.unknowns])
        if not len(self.b):
            return 0.0
        return float(np.max(np.abs(self.A @ u - self.b)))


def match_coefficients(lhs: LinPoly, rhs) -> LinearSystem:
    """Equate coefficients of ``lhs`` (affine in unknowns) and ``rhs``, one row per monomial."""
    if isinstance(rhs, Polynomial):
        rhs = LinPoly.from_polynomial(rhs)
    if rhs.nvars != lhs.nvars:
        raise ValueError("variable-count mismatch")
    diff_ = lhs - rhs
    unknowns = sorted(diff_.unknowns(), key=repr)
    col = {u: j for j, u in enumerate(unknowns)}
    monos = sorted(set(lhs.terms) | set(rhs.terms), key=grlex_key)
    A = np.zeros((len(monos), len(unknowns)))
    b = np.zeros(len(monos))
    for i, m in enumerate(monos):
        for k, v in diff_.terms.get(m, {}).items():
            if k is _CONST:
                b[i] -= v
            else:
                A[i, col[k]] += v
    return LinearSystem(unknowns, A, b, monos)
