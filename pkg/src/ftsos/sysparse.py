"""Text front-end for dynamical systems with rational-power terms.

A system file looks like::

    system "example"
    vars x1 x2
    inputs u1
    x1' = -sgnpow(x1,1/3) - x2
    x2' = abspow(x2,1/8)*u1

Right-hand sides are parsed into :class:`Expr` trees and then expanded into a
canonical sum of products (:class:`GenPoly`) over four kinds of atoms: states,
inputs, ``|x|^r`` and ``|x|^r sign(x)``.  The expansion drives evaluation,
input-affinity checks, rendering and the polynomial recast.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

ORIGIN_TOL = 1e-9


class ParseError(ValueError):
    """Syntax or structure error with a 1-based source position."""

    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"line {line}, column {column}: {message}")


# ---------------------------------------------------------------------------
# expression trees


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Sym:
    name: str


@dataclass(frozen=True)
class Add:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Sub:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class Mul:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class IntPow:
    base: "Expr"
    exp: int


@dataclass(frozen=True)
class AbsPow:
    """``|x|^r`` for a bare symbol ``x``."""

    name: str
    r: Fraction


@dataclass(frozen=True)
class SgnPow:
    """``|x|^r sign(x)`` for a bare symbol ``x``."""

    name: str
    r: Fraction


Expr = Union[Const, Sym, Add, Sub, Neg, Mul, IntPow, AbsPow, SgnPow]


# ---------------------------------------------------------------------------
# canonical expansion
#
# Atoms: ("x", i) state, ("u", j) input, ("abs", i, r) and ("sgn", i, r).
# A term key is a sorted tuple of (atom, exponent) pairs.

Atom = Tuple
TermKey = Tuple[Tuple[Atom, int], ...]


def _atom_order(atom: Atom):
    kinds = {"x": 0, "u": 1, "abs": 2, "sgn": 3}
    return (kinds[atom[0]],) + tuple(atom[1:])


def _merge(k1: TermKey, k2: TermKey) -> TermKey:
    d: Dict[Atom, int] = dict(k1)
    for a, e in k2:
        d[a] = d.get(a, 0) + e
    return tuple(sorted(d.items(), key=lambda ae: _atom_order(ae[0])))


@dataclass(frozen=True)
class GenPoly:
    """Sum of ``coef * prod(atom^exp)`` terms; ``terms`` maps TermKey to float."""

    terms: Tuple[Tuple[TermKey, float], ...] = ()

    @staticmethod
    def from_dict(d: Dict[TermKey, float], tol: float = 1e-15) -> "GenPoly":
        items = [(k, c) for k, c in d.items() if abs(c) > tol]
        items.sort(key=lambda kc: [(_atom_order(a), e) for a, e in kc[0]])
        return GenPoly(tuple(items))

    def as_dict(self) -> Dict[TermKey, float]:
        return dict(self.terms)

    def __add__(self, other: "GenPoly") -> "GenPoly":
        d = self.as_dict()
        for k, c in other.terms:
            d[k] = d.get(k, 0.0) + c
        return GenPoly.from_dict(d)

    def scale(self, s: float) -> "GenPoly":
        return GenPoly.from_dict({k: c * s for k, c in self.terms})

    def __mul__(self, other: "GenPoly") -> "GenPoly":
        d: Dict[TermKey, float] = {}
        for k1, c1 in self.terms:
            for k2, c2 in other.terms:
                k = _merge(k1, k2)
                d[k] = d.get(k, 0.0) + c1 * c2
        return GenPoly.from_dict(d)

    def input_degree(self) -> int:
        return max((sum(e for a, e in k if a[0] == "u") for k, _ in self.terms), default=0)

    def split_inputs(self, ninputs: int) -> Tuple["GenPoly", List["GenPoly"]]:
        """Split an input-affine expression into drift and one coefficient per input."""
        drift: Dict[TermKey, float] = {}
        cols: List[Dict[TermKey, float]] = [{} for _ in range(ninputs)]
        for k, c in self.terms:
            ins = [(a, e) for a, e in k if a[0] == "u"]
            rest = tuple((a, e) for a, e in k if a[0] != "u")
            if not ins:
                drift[rest] = drift.get(rest, 0.0) + c
            elif len(ins) == 1 and ins[0][1] == 1:
                j = ins[0][0][1]
                cols[j][rest] = cols[j].get(rest, 0.0) + c
            else:
                raise ValueError("expression is not affine in the inputs")
        return GenPoly.from_dict(drift), [GenPoly.from_dict(c) for c in cols]

    def atoms(self) -> List[Atom]:
        seen = {a for k, _ in self.terms for a, _ in k}
        return sorted(seen, key=_atom_order)

    def evaluate(self, x: Sequence[float], u: Sequence[float] = ()) -> float:
        total = 0.0
        for k, c in self.terms:
            v = c
            for a, e in k:
                v *= _atom_value(a, x, u) ** e
            total += v
        return total

    def evaluate_many(self, X: np.ndarray, U: Optional[np.ndarray] = None) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0])
        for k, c in self.terms:
            v = np.full(X.shape[0], c)
            for a, e in k:
                v = v * _atom_value_many(a, X, U) ** e
            out += v
        return out


def _atom_value(a: Atom, x, u) -> float:
    kind = a[0]
    if kind == "x":
        return float(x[a[1]])
    if kind == "u":
        return float(u[a[1]])
    xi = float(x[a[1]])
    mag = abs(xi) ** float(a[2]) if xi != 0.0 else 0.0
    if kind == "abs":
        return mag
    return mag if xi > 0 else (-mag if xi < 0 else 0.0)


def _atom_value_many(a: Atom, X: np.ndarray, U) -> np.ndarray:
    kind = a[0]
    if kind == "x":
        return X[:, a[1]]
    if kind == "u":
        return U[:, a[1]]
    xi = X[:, a[1]]
    mag = np.abs(xi) ** float(a[2])
    if kind == "abs":
        return mag
    return np.sign(xi) * mag


def _const(v: float) -> GenPoly:
    return GenPoly.from_dict({(): float(v)})


def expand(e: Expr, var_index: Dict[str, int], input_index: Dict[str, int]) -> GenPoly:
    """Expand an expression tree into canonical sum-of-products form."""
    if isinstance(e, Const):
        return _const(e.value)
    if isinstance(e, Sym):
        if e.name in var_index:
            return GenPoly.from_dict({((("x", var_index[e.name]), 1),): 1.0})
        return GenPoly.from_dict({((("u", input_index[e.name]), 1),): 1.0})
    if isinstance(e, Add):
        return expand(e.left, var_index, input_index) + expand(e.right, var_index, input_index)
    if isinstance(e, Sub):
        return expand(e.left, var_index, input_index) + expand(e.right, var_index, input_index).scale(-1.0)
    if isinstance(e, Neg):
        return expand(e.arg, var_index, input_index).scale(-1.0)
    if isinstance(e, Mul):
        return expand(e.left, var_index, input_index) * expand(e.right, var_index, input_index)
    if isinstance(e, IntPow):
        base = expand(e.base, var_index, input_index)
        out = _const(1.0)
        for _ in range(e.exp):
            out = out * base
        return out
    if isinstance(e, (AbsPow, SgnPow)):
        kind = "abs" if isinstance(e, AbsPow) else "sgn"
        return GenPoly.from_dict({(((kind, var_index[e.name], e.r), 1),): 1.0})
    raise TypeError(f"unknown expression node {e!r}")


# ---------------------------------------------------------------------------
# rendering


def _fmt_num(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.17g}"


def _prec(e: Expr) -> int:
    if isinstance(e, (Add, Sub)):
        return 1
    if isinstance(e, Neg):
        return 2
    if isinstance(e, Mul):
        return 3
    if isinstance(e, IntPow):
        return 4
    if isinstance(e, Const) and e.value < 0:
        return 2
    return 5


def render_expr(e: Expr) -> str:
    def wrap(sub: Expr, min_prec: int) -> str:
        s = render_expr(sub)
        return f"({s})" if _prec(sub) < min_prec else s

    if isinstance(e, Const):
        return _fmt_num(e.value)
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, Add):
        return f"{render_expr(e.left)} + {wrap(e.right, 2)}"
    if isinstance(e, Sub):
        return f"{render_expr(e.left)} - {wrap(e.right, 2)}"
    if isinstance(e, Neg):
        return f"-{wrap(e.arg, 3)}"
    if isinstance(e, Mul):
        return f"{wrap(e.left, 2)}*{wrap(e.right, 4)}"
    if isinstance(e, IntPow):
        return f"{wrap(e.base, 5)}^{e.exp}"
    if isinstance(e, AbsPow):
        return f"abspow({e.name},{e.r.numerator}/{e.r.denominator})"
    if isinstance(e, SgnPow):
        return f"sgnpow({e.name},{e.r.numerator}/{e.r.denominator})"
    raise TypeError(f"unknown expression node {e!r}")


# ---------------------------------------------------------------------------
# the system type


@dataclass(frozen=True)
class DynSystem:
    """Input-affine system ``x' = f0(x) + sum_i f_i(x) u_i``.

    ``exprs`` keeps the parsed right-hand sides for rendering; ``drift`` and
    ``input_cols`` (indexed ``[state][input]``) hold their expansions.
    """

    name: str
    vars: Tuple[str, ...]
    inputs: Tuple[str, ...]
    exprs: Tuple[Expr, ...]
    drift: Tuple[GenPoly, ...]
    input_cols: Tuple[Tuple[GenPoly, ...], ...]
    source: str = field(default="", compare=False)

    @property
    def nstates(self) -> int:
        return len(self.vars)

    @property
    def ninputs(self) -> int:
        return len(self.inputs)

    def eval_drift(self, x: Sequence[float]) -> np.ndarray:
        return np.array([g.evaluate(x) for g in self.drift])

    def eval_input_matrix(self, x: Sequence[float]) -> np.ndarray:
        """Matrix ``G(x)`` with ``G[i, j]`` the coefficient of input j in state i."""
        return np.array([[g.evaluate(x) for g in row] for row in self.input_cols]).reshape(
            self.nstates, self.ninputs)

    def with_inputs_zeroed(self) -> "DynSystem":
        return DynSystem(self.name, self.vars, (), self.exprs, self.drift,
                         tuple(() for _ in self.vars), self.source)

    def render(self) -> str:
        return render_system(self)


def eval_rhs(sys: DynSystem, x: Sequence[float], u: Optional[Sequence[float]] = None) -> np.ndarray:
    """Right-hand side at state ``x`` and input ``u`` (zero inputs when omitted)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != sys.nstates:
        raise ValueError(f"expected {sys.nstates} states, got {x.shape[0]}")
    if u is None:
        u = np.zeros(sys.ninputs)
    u = np.asarray(u, dtype=float).ravel()
    if u.shape[0] != sys.ninputs:
        raise ValueError(f"expected {sys.ninputs} inputs, got {u.shape[0]}")
    f = sys.eval_drift(x)
    if sys.ninputs:
        f = f + sys.eval_input_matrix(x) @ u
    return f


def eval_rhs_many(sys: DynSystem, X: np.ndarray, U: Optional[np.ndarray] = None) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.column_stack([g.evaluate_many(X) for g in sys.drift])
    if sys.ninputs and U is not None:
        U = np.atleast_2d(U)
        for i, row in enumerate(sys.input_cols):
            for j, g in enumerate(row):
                out[:, i] += g.evaluate_many(X) * U[:, j]
    return out


def render_system(sys: DynSystem) -> str:
    lines = [f'system "{sys.name}"', "vars " + " ".join(sys.vars)]
    if sys.inputs:
        lines.append("inputs " + " ".join(sys.inputs))
    for v, e in zip(sys.vars, sys.exprs):
        lines.append(f"{v}' = {render_expr(e)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


@dataclass
class _Tok:
    kind: str
    text: str
    col: int


class _ExprParser:
    def __init__(self, text: str, line: int, col0: int, names: Dict[str, str]):
        self.line = line
        self.names = names
        self.toks: List[_Tok] = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN_RE.match(text, pos)
            if not m or m.end() == pos:
                bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ParseError(line, col0 + bad, f"unexpected character {text[bad]!r}")
            kind = m.lastgroup
            self.toks.append(_Tok(kind, m.group(kind), col0 + m.start(kind)))
            pos = m.end()
        self.end_col = col0 + len(text.rstrip())
        self.i = 0

    def peek(self) -> Optional[_Tok]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def err(self, msg: str, tok: Optional[_Tok] = None):
        tok = tok or self.peek()
        col = tok.col if tok else max(self.end_col, 1)
        raise ParseError(self.line, col, msg)

    def expect(self, text: str) -> _Tok:
        t = self.peek()
        if t is None or t.text != text:
            self.err(f"expected {text!r}" + (f", found {t.text!r}" if t else " at end of line"))
        self.i += 1
        return t

    def parse(self) -> Expr:
        if not self.toks:
            self.err("empty expression")
        e = self.expr()
        if self.peek() is not None:
            self.err(f"unexpected {self.peek().text!r}")
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek() is not None and self.peek().text in "+-" and self.peek().kind == "op":
            op = self.peek().text
            self.i += 1
            rhs = self.term()
            e = Add(e, rhs) if op == "+" else Sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek() is not None and self.peek().text == "*":
            self.i += 1
            e = Mul(e, self.unary())
        return e

    def unary(self) -> Expr:
        t = self.peek()
        if t is not None and t.kind == "op" and t.text in "+-":
            self.i += 1
            inner = self.unary()
            return Neg(inner) if t.text == "-" else inner
        return self.power()

    def power(self) -> Expr:
        e = self.atom()
        while self.peek() is not None and self.peek().text == "^":
            self.i += 1
            t = self.peek()
            if t is None or t.kind != "num" or not t.text.isdigit():
                self.err("exponent after '^' must be a nonnegative integer; use abspow/sgnpow for rational powers")
            self.i += 1
            e = IntPow(e, int(t.text))
        return e

    def _int(self) -> int:
        t = self.peek()
        if t is None or t.kind != "num" or not t.text.isdigit():
            self.err("expected an integer")
        self.i += 1
        return int(t.text)

    def atom(self) -> Expr:
        t = self.peek()
        if t is None:
            self.err("unexpected end of expression")
        if t.kind == "num":
            self.i += 1
            return Const(float(t.text))
        if t.text == "(":
            self.i += 1
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "name":
            self.i += 1
            if t.text in ("abspow", "sgnpow"):
                self.expect("(")
                arg = self.peek()
                if arg is None or arg.kind != "name" or self.names.get(arg.text) != "var":
                    self.err(f"{t.text} must be applied to a single state variable", arg)
                self.i += 1
                self.expect(",")
                p_tok = self.peek()
                p = self._int()
                q = 1
                if self.peek() is not None and self.peek().text == "/":
                    self.i += 1
                    q = self._int()
                if q == 0:
                    self.err("zero denominator in exponent", p_tok)
                if p == 0:
                    self.err("rational exponent must be positive", p_tok)
                self.expect(")")
                r = Fraction(p, q)
                return AbsPow(arg.text, r) if t.text == "abspow" else SgnPow(arg.text, r)
            kind = self.names.get(t.text)
            if kind is None:
                self.err(f"unknown symbol {t.text!r}", t)
            return Sym(t.text)
        self.err(f"unexpected {t.text!r}", t)


_HEADER_RE = re.compile(r'^\s*system\s+"([^"]*)"\s*$')
_EQ_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z_0-9]*)\s*'\s*=(.*)$")


def parse_system(text: str) -> DynSystem:
    """Parse system text; raises :class:`ParseError` on any problem."""
    name = None
    vars_: List[str] = []
    inputs: List[str] = []
    eqs: Dict[str, Tuple[Expr, int]] = {}
    symbols: Dict[str, str] = {}
    reserved = {"abspow", "sgnpow", "system", "vars", "inputs"}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        indent = len(line) - len(line.lstrip())
        stripped = line.strip()
        word = stripped.split()[0]
        if word == "system" and not _EQ_RE.match(line):
            m = _HEADER_RE.match(line)
            if not m:
                raise ParseError(lineno, indent + 1, 'expected: system "<name>"')
            if name is not None:
                raise ParseError(lineno, indent + 1, "duplicate system line")
            name = m.group(1)
            continue
        if word in ("vars", "inputs") and not _EQ_RE.match(line):
            target = vars_ if word == "vars" else inputs
            if target:
                raise ParseError(lineno, indent + 1, f"duplicate {word} line")
            if word == "inputs" and eqs:
                raise ParseError(lineno, indent + 1, "inputs must be declared before the equations")
            col = indent + len(word)
            for m in re.finditer(r"\S+", line[col:]):
                nm = m.group(0)
                c = col + m.start() + 1
                if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", nm) or nm in reserved:
                    raise ParseError(lineno, c, f"invalid name {nm!r}")
                if nm in symbols:
                    raise ParseError(lineno, c, f"name {nm!r} declared twice")
                symbols[nm] = "var" if word == "vars" else "input"
                target.append(nm)
            if not target:
                raise ParseError(lineno, indent + 1, f"{word} line declares no names")
            continue
        m = _EQ_RE.match(line)
        if m:
            lhs = m.group(1)
            if not vars_:
                raise ParseError(lineno, indent + 1, "equation before the vars line")
            if symbols.get(lhs) != "var":
                raise ParseError(lineno, indent + 1, f"{lhs!r} is not a declared state variable")
            if lhs in eqs:
                raise ParseError(lineno, indent + 1, f"second equation for {lhs!r}")
            rhs_col = m.start(2) + 1
            expr = _ExprParser(m.group(2), lineno, rhs_col, symbols).parse()
            eqs[lhs] = (expr, lineno)
            continue
        raise ParseError(lineno, indent + 1, f"unrecognized line starting with {word!r}")

    if name is None:
        raise ParseError(1, 1, 'missing system "<name>" line')
    if not vars_:
        raise ParseError(1, 1, "missing vars line")
    missing = [v for v in vars_ if v not in eqs]
    if missing:
        last = max(len(text.splitlines()), 1)
        raise ParseError(last, 1, f"no equation for {', '.join(missing)}")

    var_index = {v: i for i, v in enumerate(vars_)}
    input_index = {u: j for j, u in enumerate(inputs)}
    drift, cols, exprs = [], [], []
    for v in vars_:
        expr, lineno = eqs[v]
        g = expand(expr, var_index, input_index)
        try:
            d, c = g.split_inputs(len(inputs))
        except ValueError:
            raise ParseError(lineno, 1, f"right-hand side of {v}' is not affine in the inputs") from None
        exprs.append(expr)
        drift.append(d)
        cols.append(tuple(c))

    sys = DynSystem(name, tuple(vars_), tuple(inputs), tuple(exprs), tuple(drift), tuple(cols), text)
    f0 = sys.eval_drift(np.zeros(len(vars_)))
    bad = np.flatnonzero(np.abs(f0) > ORIGIN_TOL)
    if bad.size:
        i = int(bad[0])
        raise ParseError(eqs[vars_[i]][1], 1, f"drift of {vars_[i]}' is {f0[i]:g} at the origin, expected 0")
    return sys


BUNDLED = ("ex1", "ex2", "supertwist")


def bundled_text(name: str) -> str:
    if name not in BUNDLED:
        raise KeyError(f"no bundled system named {name!r}; choose from {', '.join(BUNDLED)}")
    return resources.files("ftsos.systems").joinpath(f"{name}.sys").read_text(encoding="utf-8")


def load_system(ref: str) -> DynSystem:
    """Load a bundled system by name or a system file by path."""
    if ref in BUNDLED:
        return parse_system(bundled_text(ref))
    return parse_system(Path(ref).read_text(encoding="utf-8"))


def structurally_equal(a: DynSystem, b: DynSystem, tol: float = 1e-12) -> bool:
    """Same names, variables, inputs and expanded right-hand sides."""
    if (a.name, a.vars, a.inputs) != (b.name, b.vars, b.inputs):
        return False

    def close(g: GenPoly, h: GenPoly) -> bool:
        dg, dh = g.as_dict(), h.as_dict()
        keys = set(dg) | set(dh)
        return all(abs(dg.get(k, 0.0) - dh.get(k, 0.0)) <= tol for k in keys)

    for i in range(a.nstates):
        if not close(a.drift[i], b.drift[i]):
            return False
        if any(not close(g, h) for g, h in zip(a.input_cols[i], b.input_cols[i])):
            return False
    return True


def parse_polynomial(text: str, names: Sequence[str]):
    """Parse a polynomial written with ``+ - * ^``, numbers and the given variable names."""
    from .poly import Polynomial

    symbols = {nm: "var" for nm in names}
    expr = _ExprParser(text, 1, 1, symbols).parse()
    index = {nm: i for i, nm in enumerate(names)}
    g = expand(expr, index, {})
    terms = {}
    for key, c in g.terms:
        e = [0] * len(names)
        for atom, k in key:
            if atom[0] != "x":
                raise ParseError(1, 1, "rational powers are not allowed in a polynomial")
            e[atom[1]] += k
        terms[tuple(e)] = terms.get(tuple(e), 0.0) + c
    return Polynomial(len(names), terms, tol=0.0)
