"""Primal-dual interior-point solver for small block-diagonal SDPs.

Problem form (maximization convention)::

    maximize    <C, X> + f @ u
    subject to  <A_k, X> + B_k @ u = b_k      k = 1..m
                X = diag(X_1, ..., X_p),  X_j PSD
                u free

Constraint and objective coefficients are given on the upper triangle:
the entry ``(blk, i, j, v)`` with ``i <= j`` contributes ``v * X_blk[i, j]``.

The iteration uses the HKM search direction with Mehrotra
predictor-corrector steps.  The Schur complement ``M_kl = tr(A_k X A_l Z^-1)``
is formed densely per block, and free variables are handled by the
augmented system ``[[M, B], [B^T, 0]]``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

log = logging.getLogger(__name__)

Entry = Tuple[int, int, int, float]


@dataclass
class SdpProblem:
    """Block SDP in equality form; build with :meth:`add_constraint`."""

    block_sizes: List[int]
    nfree: int = 0
    rows: List[Tuple[List[Entry], List[Tuple[int, float]], float]] = field(default_factory=list)
    objective: List[Entry] = field(default_factory=list)
    free_objective: Dict[int, float] = field(default_factory=dict)
    block_names: List[str] = field(default_factory=list)
    free_names: List[str] = field(default_factory=list)

    def add_block(self, size: int, name: str = "") -> int:
        self.block_sizes.append(int(size))
        self.block_names.append(name)
        return len(self.block_sizes) - 1

    def add_free(self, name: str = "") -> int:
        self.nfree += 1
        self.free_names.append(name)
        return self.nfree - 1

    def add_constraint(self, entries: Sequence[Entry], free: Sequence[Tuple[int, float]] = (),
                       rhs: float = 0.0) -> int:
        clean = []
        for blk, i, j, v in entries:
            if not 0 <= blk < len(self.block_sizes):
                raise IndexError(f"block {blk} is not declared")
            n = self.block_sizes[blk]
            if i > j:
                i, j = j, i
            if not (0 <= i < n and 0 <= j < n):
                raise IndexError(f"entry ({i}, {j}) outside block {blk} of size {n}")
            clean.append((blk, i, j, float(v)))
        fr = []
        for k, v in free:
            if not 0 <= k < self.nfree:
                raise IndexError(f"free variable {k} is not declared")
            fr.append((k, float(v)))
        self.rows.append((clean, fr, float(rhs)))
        return len(self.rows) - 1

    @property
    def nconstraints(self) -> int:
        return len(self.rows)

    def to_sdpa(self) -> str:
        """SDPA sparse text (minimization of ``-objective``); free variables become 1x1 pairs u = u+ - u-."""
        nb = len(self.block_sizes)
        sizes = list(self.block_sizes)
        extra_block = nb + 1
        if self.nfree:
            sizes.append(-2 * self.nfree)
        out = [f"* block SDP exported from ftsos", f"{self.nconstraints}", f"{len(sizes)}",
               " ".join(str(s) for s in sizes), " ".join(f"{r[2]:.17g}" for r in self.rows)]
        # SDPA solves min c^T y s.t. sum y_k F_k - F_0 >= 0; we emit the primal-form
        # data as (F_0 = C, F_k = A_k) which SDPA reads as its dual.
        for blk, i, j, v in self.objective:
            val = v if i == j else v / 2.0
            out.append(f"0 {blk + 1} {i + 1} {j + 1} {val:.17g}")
        for k, val in self.free_objective.items():
            out.append(f"0 {extra_block} {2 * k + 1} {2 * k + 1} {val:.17g}")
            out.append(f"0 {extra_block} {2 * k + 2} {2 * k + 2} {-val:.17g}")
        for r, (entries, free, _) in enumerate(self.rows, start=1):
            acc: Dict[Tuple[int, int, int], float] = {}
            for blk, i, j, v in entries:
                acc[(blk, i, j)] = acc.get((blk, i, j), 0.0) + (v if i == j else v / 2.0)
            for (blk, i, j), v in sorted(acc.items()):
                out.append(f"{r} {blk + 1} {i + 1} {j + 1} {v:.17g}")
            for k, v in free:
                out.append(f"{r} {extra_block} {2 * k + 1} {2 * k + 1} {v:.17g}")
                out.append(f"{r} {extra_block} {2 * k + 2} {2 * k + 2} {-v:.17g}")
        return "\n".join(out) + "\n"


@dataclass
class SdpOptions:
    max_iter: int = 200
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    tol_gap: float = 1e-7
    step_fraction: float = 0.98
    reg_start: float = 1e-12
    reg_factor: float = 100.0
    reg_retries: int = 3
    verbose: bool = False
    log_file: Optional[object] = None
    max_dense_bytes: float = 2.0 ** 31


class ProblemTooLarge(ValueError):
    """The dense constraint storage would exceed ``SdpOptions.max_dense_bytes``."""


@dataclass
class SdpSolution:
    status: str
    X: List[np.ndarray]
    u: np.ndarray
    y: np.ndarray
    objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    log: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# ---------------------------------------------------------------------------
# internal dense representation


class _Data:
    def __init__(self, prob: SdpProblem, max_bytes: float = math.inf):
        self.sizes = list(prob.block_sizes)
        self.m = prob.nconstraints
        self.nf = prob.nfree
        self.b = np.array([r[2] for r in prob.rows], dtype=float)
        # per block: rows touching it, dense stack of symmetric A matrices
        per_block: List[Dict[int, List[Tuple[int, int, float]]]] = [dict() for _ in self.sizes]
        B = np.zeros((self.m, self.nf))
        for r, (entries, free, _) in enumerate(prob.rows):
            for blk, i, j, v in entries:
                per_block[blk].setdefault(r, []).append((i, j, v))
            for k, v in free:
                B[r, k] += v
        self.B = B
        need = 8.0 * (sum(len(per_block[k]) * n * n for k, n in enumerate(self.sizes)) + self.m * self.m)
        if need > max_bytes:
            raise ProblemTooLarge(f"SDP with blocks up to {max(self.sizes, default=0)} and {self.m} constraints "
                                  f"needs {need / 2 ** 30:.1f} GiB of dense storage; reduce the degrees")
        self.block_rows: List[np.ndarray] = []
        self.block_A: List[np.ndarray] = []
        for blk, n in enumerate(self.sizes):
            rows = np.array(sorted(per_block[blk]), dtype=int)
            A = np.zeros((len(rows), n, n))
            for t, r in enumerate(rows):
                for i, j, v in per_block[blk][r]:
                    if i == j:
                        A[t, i, i] += v
                    else:
                        A[t, i, j] += v / 2.0
                        A[t, j, i] += v / 2.0
            self.block_rows.append(rows)
            self.block_A.append(A)
        self.C = [np.zeros((n, n)) for n in self.sizes]
        for blk, i, j, v in prob.objective:
            # minimize -<C, X>
            if i == j:
                self.C[blk][i, i] -= v
            else:
                self.C[blk][i, j] -= v / 2.0
                self.C[blk][j, i] -= v / 2.0
        self.f = np.zeros(self.nf)
        for k, v in prob.free_objective.items():
            self.f[k] -= v
        self.scale_rows()

    def scale_rows(self):
        norms = np.sqrt(np.sum(self.B ** 2, axis=1))
        sq = norms ** 2
        for rows, A in zip(self.block_rows, self.block_A):
            if len(rows):
                np.add.at(sq, rows, np.sum(A ** 2, axis=(1, 2)))
        s = np.sqrt(sq)
        s[s == 0] = 1.0
        self.row_scale = s
        self.b = self.b / s
        self.B = self.B / s[:, None]
        for rows, A in zip(self.block_rows, self.block_A):
            if len(rows):
                A /= s[rows][:, None, None]

    def Aop(self, X: List[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.m)
        for rows, A, Xb in zip(self.block_rows, self.block_A, X):
            if len(rows):
                out[rows] += np.einsum("kij,ij->k", A, Xb, optimize=True)
        return out

    def Aadj(self, y: np.ndarray) -> List[np.ndarray]:
        out = []
        for rows, A, n in zip(self.block_rows, self.block_A, self.sizes):
            if len(rows):
                out.append(np.tensordot(y[rows], A, axes=1))
            else:
                out.append(np.zeros((n, n)))
        return out

    def schur(self, X: List[np.ndarray], W: List[np.ndarray]) -> np.ndarray:
        M = np.zeros((self.m, self.m))
        for rows, A, Xb, Wb in zip(self.block_rows, self.block_A, X, W):
            mb = len(rows)
            if not mb:
                continue
            n = Xb.shape[0]
            chunk = max(1, int(4e6 // max(n * n, 1)))
            flatA = A.reshape(mb, n * n)
            for s in range(0, mb, chunk):
                P = np.matmul(np.matmul(Xb, A[s:s + chunk]), Wb)
                Mb = P.reshape(P.shape[0], n * n) @ flatA.T
                M[np.ix_(rows[s:s + chunk], rows)] += Mb
        return 0.5 * (M + M.T)


def _sym(A):
    return 0.5 * (A + A.T)


def _inner(A: List[np.ndarray], B: List[np.ndarray]) -> float:
    return float(sum(np.vdot(a, b) for a, b in zip(A, B)))


def _max_step(X: List[np.ndarray], dX: List[np.ndarray]) -> float:
    alpha = np.inf
    for Xb, dXb in zip(X, dX):
        if Xb.size == 0:
            continue
        try:
            L = np.linalg.cholesky(Xb)
        except np.linalg.LinAlgError:
            return 0.0
        Li = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        S = Li @ dXb @ Li.T
        lam = np.linalg.eigvalsh(_sym(S))[0]
        if lam < 0:
            alpha = min(alpha, -1.0 / lam)
    return alpha


class _KKTFailure(Exception):
    pass


def _solve_kkt(M: np.ndarray, B: np.ndarray, h: np.ndarray, rf: np.ndarray, reg: float):
    m, nf = B.shape
    diag_scale = max(float(np.max(np.abs(np.diag(M)))) if m else 1.0, 1.0)
    Mr = M + reg * diag_scale * np.eye(m) if reg > 0 else M
    try:
        cf = sla.cho_factor(Mr, lower=True, check_finite=False)
        if nf == 0:
            return sla.cho_solve(cf, h, check_finite=False), np.zeros(0)
        MiB = sla.cho_solve(cf, B, check_finite=False)
        Mih = sla.cho_solve(cf, h, check_finite=False)
        S = B.T @ MiB
        if reg > 0:
            S = S - reg * max(float(np.max(np.abs(np.diag(S)))), 1.0) * np.eye(nf)
        du = np.linalg.solve(S, B.T @ Mih - rf)
        dy = Mih - MiB @ du
        if not (np.all(np.isfinite(dy)) and np.all(np.isfinite(du))):
            raise np.linalg.LinAlgError
        return dy, du
    except (np.linalg.LinAlgError, sla.LinAlgError, ValueError):
        pass
    K = np.zeros((m + nf, m + nf))
    K[:m, :m] = Mr
    K[:m, m:] = B
    K[m:, :m] = B.T
    if reg > 0:
        K[m:, m:] = -reg * np.eye(nf)
    rhs = np.concatenate([h, rf])
    try:
        with warnings.catch_warnings():
            # ill-conditioning is expected near optimality; residuals are re-checked
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            sol = sla.solve(K, rhs, check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgError, ValueError):
        raise _KKTFailure
    if not np.all(np.isfinite(sol)):
        raise _KKTFailure
    # reject wildly inaccurate solves
    if np.linalg.norm(K @ sol - rhs) > 1e-6 * (1 + np.linalg.norm(rhs)):
        raise _KKTFailure
    return sol[:m], sol[m:]


def _presolve(prob: SdpProblem) -> Tuple[List[int], Optional[str]]:
    """Indices of rows to keep; detects rows ``0 = b != 0``."""
    keep = []
    for r, (entries, free, rhs) in enumerate(prob.rows):
        if not any(v != 0 for *_, v in entries) and not any(v != 0 for _, v in free):
            if abs(rhs) > 1e-12:
                return [], "infeasible"
            continue
        keep.append(r)
    sub_rows = [prob.rows[r] for r in keep]
    m = len(sub_rows)
    if m == 0:
        return keep, None
    offsets = np.cumsum([0] + [n * (n + 1) // 2 for n in prob.block_sizes])
    ncols = int(offsets[-1]) + prob.nfree
    if m * ncols > 4e7:
        return keep, None
    data, ri, ci = [], [], []
    for t, (entries, free, _) in enumerate(sub_rows):
        for blk, i, j, v in entries:
            n = prob.block_sizes[blk]
            col = offsets[blk] + i * n - i * (i - 1) // 2 + (j - i)
            ri.append(t)
            ci.append(col)
            data.append(v)
        for k, v in free:
            ri.append(t)
            ci.append(offsets[-1] + k)
            data.append(v)
    A = sp.coo_matrix((data, (ri, ci)), shape=(m, ncols)).toarray()
    Ab = np.hstack([A, np.array([r[2] for r in sub_rows])[:, None]])
    norms = np.linalg.norm(Ab, axis=1)
    Ab = Ab / norms[:, None]
    A = A / norms[:, None]
    _, R, piv = sla.qr(A.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (d[0] if d.size else 1.0) * 1e3
    rank = int(np.sum(d > tol))
    if rank == m:
        return keep, None
    indep = sorted(piv[:rank])
    # dependent rows must be consistent
    rank_b = np.linalg.matrix_rank(Ab, tol=tol)
    if rank_b > rank:
        return [], "infeasible"
    log.info("dropping %d linearly dependent constraint rows", m - rank)
    return [keep[i] for i in indep], None


def solve(prob: SdpProblem, opts: Optional[SdpOptions] = None, **kw) -> SdpSolution:
    """Solve ``prob``; see the module docstring for the problem form."""
    opts = opts or SdpOptions(**kw)
    keep, early = _presolve(prob)
    sizes = list(prob.block_sizes)
    if early == "infeasible":
        return SdpSolution("infeasible", [np.zeros((n, n)) for n in sizes], np.zeros(prob.nfree),
                           np.zeros(prob.nconstraints), np.nan, np.nan, np.inf, np.inf, np.inf, 0)
    if len(keep) != prob.nconstraints:
        sub = SdpProblem(sizes, prob.nfree, [prob.rows[r] for r in keep], prob.objective,
                         prob.free_objective)
    else:
        sub = prob
    sol = _ipm(sub, opts)
    y_full = np.zeros(prob.nconstraints)
    y_full[keep] = sol.y
    sol.y = y_full
    return sol


def _ipm(prob: SdpProblem, opts: SdpOptions) -> SdpSolution:
    d = _Data(prob, opts.max_dense_bytes)
    sizes, m, nf = d.sizes, d.m, d.nf
    lines: List[str] = []

    def emit(s: str):
        lines.append(s)
        if opts.verbose:
            print(s)
        if opts.log_file is not None:
            opts.log_file.write(s + "\n")

    nrm_b = np.linalg.norm(d.b)
    nrm_C = np.sqrt(sum(np.sum(C ** 2) for C in d.C) + np.sum(d.f ** 2))
    # initial point
    maxA = 0.0
    ratio = 0.0
    for rows, A in zip(d.block_rows, d.block_A):
        if len(rows):
            fn = np.sqrt(np.sum(A ** 2, axis=(1, 2)))
            maxA = max(maxA, float(fn.max()))
            ratio = max(ratio, float(np.max((1 + np.abs(d.b[rows])) / (1 + fn))))
    X = [max(10.0, np.sqrt(n), n * ratio) * np.eye(n) for n in sizes]
    Z = [max(10.0, np.sqrt(n), nrm_C, maxA) * np.eye(n) for n in sizes]
    y = np.zeros(m)
    u = np.zeros(nf)
    ntot = sum(sizes)

    status = "max_iter"
    it = 0
    pres = dres = gap = np.inf
    pobj = dobj = np.nan
    best = None
    for it in range(1, opts.max_iter + 1):
        AX = d.Aop(X)
        rp = d.b - AX - d.B @ u
        Aty = d.Aadj(y)
        Rd = [C - a - z for C, a, z in zip(d.C, Aty, Z)]
        rf = d.f - d.B.T @ y
        pobj = _inner(d.C, X) + float(d.f @ u)
        dobj = float(d.b @ y)
        mu = _inner(X, Z) / max(ntot, 1)
        pres = np.linalg.norm(rp) / (1 + nrm_b)
        dres = (np.sqrt(sum(np.sum(r ** 2) for r in Rd) + np.sum(rf ** 2))) / (1 + nrm_C)
        gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        emit(f"iter {it:3d}  pobj {-pobj: .10e}  dobj {-dobj: .10e}  gap {gap:.2e}  "
             f"pres {pres:.2e}  dres {dres:.2e}  mu {mu:.2e}")
        score = max(pres / opts.tol_primal, dres / opts.tol_dual, gap / opts.tol_gap)
        if best is None or score < best[0]:
            best = (score, [x.copy() for x in X], u.copy(), y.copy(), pobj, dobj, pres, dres, gap, it)
        if pres <= opts.tol_primal and dres <= opts.tol_dual and gap <= opts.tol_gap:
            status = "optimal"
            break
        # infeasibility detection via diverging objectives
        if dobj > 1e10 * (1 + nrm_C) and pres > 1e-6:
            status = "infeasible"
            break
        if pobj < -1e10 * (1 + nrm_b) and dres > 1e-6:
            status = "dual_infeasible"
            break
        if not all(np.all(np.isfinite(x)) for x in X) or not np.all(np.isfinite(y)):
            status = "numerical_failure"
            break

        try:
            W = [np.linalg.inv(z) for z in Z]
            W = [_sym(w) for w in W]
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break
        M = d.schur(X, W)

        def direction(Rc: List[np.ndarray]):
            # dX = (Rc - X dZ) Z^-1, dZ = Rd - A^T dy
            T = [(rc - x @ rd) @ w for rc, x, rd, w in zip(Rc, X, Rd, W)]
            h = rp - d.Aop([_sym(t) for t in T])
            reg = 0.0
            for attempt in range(opts.reg_retries + 1):
                try:
                    dy, du = _solve_kkt(M, d.B, h, rf, reg)
                    break
                except _KKTFailure:
                    reg = opts.reg_start if reg == 0 else reg * opts.reg_factor
            else:
                raise _KKTFailure
            Atdy = d.Aadj(dy)
            dZ = [rd - a for rd, a in zip(Rd, Atdy)]
            dX = [_sym((rc - x @ dz) @ w) for rc, x, dz, w in zip(Rc, X, dZ, W)]
            return dX, dy, du, dZ

        try:
            XZ = [x @ z for x, z in zip(X, Z)]
            Rc = [-xz for xz in XZ]
            dX, dy, du, dZ = direction(Rc)
            ap = min(1.0, _max_step(X, dX))
            ad = min(1.0, _max_step(Z, dZ))
            mu_aff = _inner([x + ap * dx for x, dx in zip(X, dX)],
                            [z + ad * dz for z, dz in zip(Z, dZ)]) / max(ntot, 1)
            sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
            Rc = [sigma * mu * np.eye(x.shape[0]) - xz - dx @ dz for x, xz, dx, dz in zip(X, XZ, dX, dZ)]
            dX, dy, du, dZ = direction(Rc)
        except _KKTFailure:
            status = "numerical_failure"
            emit("KKT factorization failed after regularization retries")
            break
        ap = min(1.0, opts.step_fraction * _max_step(X, dX))
        ad = min(1.0, opts.step_fraction * _max_step(Z, dZ))
        if ap < 1e-12 and ad < 1e-12:
            status = "numerical_failure"
            emit("step length collapsed")
            break
        X = [_sym(x + ap * dx) for x, dx in zip(X, dX)]
        u = u + ap * du
        y = y + ad * dy
        Z = [_sym(z + ad * dz) for z, dz in zip(Z, dZ)]

    if status != "optimal" and best is not None and status in ("max_iter", "numerical_failure"):
        _, X, u, y, pobj, dobj, pres, dres, gap, _ = best
    X = [_sym(x) for x in X]
    y_orig = y / d.row_scale
    # residuals in the caller's scaling
    return SdpSolution(status, X, u, y_orig, -pobj, -dobj, float(pres), float(dres), float(gap), it, lines)


# ---------------------------------------------------------------------------
# phase I


@dataclass
class PhaseOneResult:
    feasible: bool
    slack: float
    solution: SdpSolution


def phase1_problem(prob: SdpProblem, cap: float = 1.0) -> Tuple[SdpProblem, int]:
    """Problem maximizing ``t`` with every block replaced by ``Y + t I``; returns (problem, t index)."""
    sizes = list(prob.block_sizes)
    q = SdpProblem(sizes + [1], prob.nfree + 1, [], [], {}, list(prob.block_names) + ["cap"],
                   list(prob.free_names) + ["t"])
    t = prob.nfree
    cap_blk = len(sizes)
    for entries, free, rhs in prob.rows:
        tr = sum(v for blk, i, j, v in entries if i == j)
        q.rows.append((list(entries), list(free) + ([(t, tr)] if tr != 0 else []), rhs))
    q.rows.append(([(cap_blk, 0, 0, 1.0)], [(t, 1.0)], cap))
    q.free_objective[t] = 1.0
    return q, t


def phase1(prob: SdpProblem, opts: Optional[SdpOptions] = None, feas_tol: float = 1e-7,
           cap: float = 1.0) -> PhaseOneResult:
    """Maximize the uniform eigenvalue margin ``t``; feasible iff ``t* > feas_tol``."""
    q, t = phase1_problem(prob, cap)
    sol = solve(q, opts)
    if sol.status == "infeasible":
        return PhaseOneResult(False, -np.inf, sol)
    tval = float(sol.u[t]) if sol.u.size else float("nan")
    # When the optimal margin is (numerically) zero, the interior iterate Y is
    # returned unshifted: it is PSD and violates the equalities only by |t|.
    shift = max(tval, 0.0)
    sol_out = SdpSolution(sol.status, [x + shift * np.eye(x.shape[0]) for x in sol.X[:-1]],
                          sol.u[:-1], sol.y, sol.objective, sol.dual_objective, sol.primal_residual,
                          sol.dual_residual, sol.gap, sol.iterations, sol.log)
    return PhaseOneResult(bool(tval > feas_tol), tval, sol_out)
