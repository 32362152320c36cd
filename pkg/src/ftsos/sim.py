"""Fixed-step simulation of non-Lipschitz systems with settling detection.

Right-hand sides with fractional powers are not Lipschitz at the origin, so
adaptive error control misbehaves there.  :func:`integrate` uses classical
RK4 with a fixed step, halves the step once close to the origin, and clamps
the state to exactly zero once it is tiny (the origin is an equilibrium and
forward solutions are unique).  The settling time is the first entry into
the ``settle_tol`` ball that is followed by a full ``dwell`` window inside it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .sysparse import DynSystem, GenPoly

Rhs = Callable[[np.ndarray], np.ndarray]


def _sp(v: float, r: float) -> float:
    return math.copysign(abs(v) ** r, v) if v != 0.0 else 0.0


def _ap(v: float, r: float) -> float:
    return abs(v) ** r if v != 0.0 else 0.0


def _term_source(key, coef: float) -> str:
    parts = [repr(float(coef))]
    for atom, e in key:
        kind = atom[0]
        if kind == "x":
            base = f"x[{atom[1]}]"
        elif kind == "u":
            base = f"u[{atom[1]}]"
        elif kind == "abs":
            base = f"_ap(x[{atom[1]}], {float(atom[2])!r})"
        else:
            base = f"_sp(x[{atom[1]}], {float(atom[2])!r})"
        parts.append(base if e == 1 else f"{base}**{e}")
    return "*".join(parts)


def genpoly_source(g: GenPoly) -> str:
    """Python expression evaluating ``g`` from sequences ``x`` and ``u``."""
    if not g.terms:
        return "0.0"
    return " + ".join(_term_source(k, c) for k, c in g.terms)


def compile_system(sys: DynSystem):
    """Return fast ``drift(x)`` and ``inputs(x)`` functions (the latter ``None`` without inputs)."""
    env = {"_sp": _sp, "_ap": _ap}
    drift_src = "def drift(x):\n    return [" + ", ".join(genpoly_source(g) for g in sys.drift) + "]\n"
    exec(drift_src, env)
    drift = env["drift"]
    inputs = None
    if sys.ninputs:
        rows = ["[" + ", ".join(genpoly_source(g) for g in row) + "]" for row in sys.input_cols]
        exec("def inputs(x):\n    return [" + ", ".join(rows) + "]\n", env)
        inputs = env["inputs"]
    return drift, inputs


def system_rhs(sys: DynSystem, controller: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> Rhs:
    """Autonomous right-hand side ``x -> f0(x) + G(x) u(x)`` (``u = 0`` without a controller)."""
    drift, inputs = compile_system(sys)

    if controller is None or inputs is None:
        def rhs(x):
            return np.array(drift(x), dtype=float)
        return rhs

    def rhs_u(x):
        u = np.asarray(controller(x), dtype=float)
        return np.array(drift(x), dtype=float) + np.array(inputs(x), dtype=float).reshape(len(x), -1) @ u
    return rhs_u


@dataclass
class Trajectory:
    """A simulated trajectory.  ``settle_time`` is ``None`` when no settling was detected."""

    t: np.ndarray
    x: np.ndarray
    settle_time: Optional[float]
    settle_tol: float
    dwell: float
    dt: float
    V: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    status: str = "ok"
    message: str = ""
    names: List[str] = field(default_factory=list)

    @property
    def settled(self) -> bool:
        return self.settle_time is not None

    @property
    def final_state(self) -> np.ndarray:
        return self.x[-1]

    def rows(self, every: int = 1):
        for k in range(0, len(self.t), max(int(every), 1)):
            row = [self.t[k], *self.x[k]]
            if self.V is not None:
                row.append(self.V[k])
            if self.u is not None:
                row.extend(self.u[k])
            yield row

    def header(self) -> List[str]:
        n = self.x.shape[1]
        names = self.names or [f"x{i + 1}" for i in range(n)]
        head = ["t", *names]
        if self.V is not None:
            head.append("V")
        if self.u is not None:
            head.extend(f"u{j + 1}" for j in range(self.u.shape[1]))
        return head

    def to_csv(self, path: Union[str, Path], every: int = 1) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows(every):
                w.writerow([f"{v:.17g}" for v in row])
        return path


def _rk4(rhs: Rhs, x: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs: Rhs, x0: Sequence[float], dt: float = 1e-4, t_max: float = 10.0,
              settle_tol: float = 1e-6, dwell: float = 0.1,
              V: Optional[Callable[[np.ndarray], float]] = None,
              control: Optional[Callable[[np.ndarray], np.ndarray]] = None,
              stop_on_settle: bool = True, names: Optional[Sequence[str]] = None) -> Trajectory:
    """Integrate ``x' = rhs(x)`` from ``x0`` with fixed-step RK4.

    Parameters
    ----------
    rhs : callable
        Autonomous right-hand side on numpy vectors.
    dt, t_max : float
        Base step and horizon.  The step halves once ``|x| < 10 settle_tol``.
    settle_tol, dwell : float
        Settling is declared at the first entry into ``|x| <= settle_tol``
        after which the state stays inside for ``dwell`` time units.
    V, control : callable, optional
        Recorded alongside the states.
    stop_on_settle : bool
        Stop once the dwell window has been confirmed.
    """
    if not dt > 0 or not t_max > 0:
        raise ValueError("dt and t_max must be positive")
    x = np.array(x0, dtype=float).ravel()
    clamp = settle_tol / 10.0
    if np.linalg.norm(x) < clamp:
        x = np.zeros_like(x)
    ts, xs = [0.0], [x.copy()]
    t, h, halved = 0.0, dt, False
    entry = 0.0 if np.linalg.norm(x) <= settle_tol else None
    settle_time = None
    status, message = "ok", ""
    step = 0
    while t < t_max - 1e-12:
        nx = np.linalg.norm(x)
        if not halved and nx < 10.0 * settle_tol:
            h, halved = dt / 2.0, True
        hh = min(h, t_max - t)
        xn = _rk4(rhs, x, hh)
        step += 1
        if not np.all(np.isfinite(xn)):
            status = "nonfinite"
            message = f"non-finite state at step {step} (t = {t + hh:.6g}) from x = {x.tolist()}"
            break
        if np.linalg.norm(xn) < clamp:
            xn = np.zeros_like(xn)
        x, t = xn, t + hh
        ts.append(t)
        xs.append(x.copy())
        if np.linalg.norm(x) <= settle_tol:
            if entry is None:
                entry = t
            if t - entry >= dwell - 1e-12:
                settle_time = entry
                if stop_on_settle:
                    break
        else:
            entry = None
            settle_time = None
    if settle_time is None and entry is not None and t - entry >= dwell - 1e-12:
        settle_time = entry
    T = np.array(ts)
    X = np.array(xs)
    Vs = np.array([V(xk) for xk in X]) if V is not None else None
    U = np.array([np.atleast_1d(control(xk)) for xk in X]) if control is not None else None
    return Trajectory(T, X, settle_time, settle_tol, dwell, dt, Vs, U, status, message,
                      list(names) if names else [])


def sweep(rhs: Rhs, initial: Sequence[Sequence[float]], **kwargs) -> List[Trajectory]:
    """Integrate from each initial state in order (deterministic)."""
    return [integrate(rhs, x0, **kwargs) for x0 in initial]


def simulate_system(sys: DynSystem, x0: Sequence[float], controller=None, **kwargs) -> Trajectory:
    """Convenience wrapper: integrate a parsed system (optionally under feedback)."""
    kwargs.setdefault("names", list(sys.vars))
    return integrate(system_rhs(sys, controller), x0, **kwargs)
