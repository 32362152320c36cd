"""Command-line entry point.

Exit codes: 0 success, 2 infeasible (no certificate at these settings, or a
sampled check that fails), 1 error.  Output files go to ``--out``, which
defaults to ``$FTSOS_OUTPUT_DIR`` or the working directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

OUTPUT_ENV = "FTSOS_OUTPUT_DIR"
EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage, which would collide with "infeasible"
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    """Validated options of one invocation."""

    command: str
    system: str
    out: Path
    force: bool = False
    quiet: bool = False
    options: Dict[str, object] = field(default_factory=dict)

    def summary(self) -> Dict[str, object]:
        d = asdict(self)
        d["out"] = str(self.out)
        return d


def _positive(name):
    def conv(text):
        v = float(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive")
        return v
    return conv


def _nonneg(name):
    def conv(text):
        v = float(text)
        if v < 0:
            raise argparse.ArgumentTypeError(f"{name} must be nonnegative")
        return v
    return conv


def _int_at_least(name, lo):
    def conv(text):
        v = int(text)
        if v < lo:
            raise argparse.ArgumentTypeError(f"{name} must be >= {lo}")
        return v
    return conv


def _floats(text: str) -> List[float]:
    parts = text.replace(",", " ").split()
    if not parts:
        raise argparse.ArgumentTypeError("expected at least one number")
    return [float(p) for p in parts]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ftsos", description="Finite-time stability certificates via sum-of-squares programming.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--system", required=True, help="bundled name (ex1, ex2, supertwist) or path to a .sys file")
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or .)")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--seed", type=_int_at_least("seed", 0), default=0)

    def sampling(sp, samples):
        sp.add_argument("--samples", type=_int_at_least("samples", 1), default=samples)
        sp.add_argument("--box", type=_positive("box"), default=2.0, help="half-width of the sampling box")
        sp.add_argument("--r-excl", type=_nonneg("r-excl"), default=1e-3)

    c = sub.add_parser("certify", help="search for a finite-time Lyapunov certificate")
    common(c)
    sampling(c, 100000)
    c.add_argument("--method", choices=["thm1", "thm2", "cor1"], required=True)
    c.add_argument("--c", type=_positive("c"), default=1.0)
    c.add_argument("--degv", type=_int_at_least("degv", 2), default=None)
    c.add_argument("--mult-deg", type=_int_at_least("mult-deg", 0), default=None,
                   help="half degree of the multipliers")
    c.add_argument("--eps", type=_positive("eps"), default=1e-6)
    c.add_argument("--max-alt", type=_int_at_least("max-alt", 1), default=30)
    c.add_argument("--p", type=_int_at_least("p", 1), default=2, help="numerator of the exponent 2p/q (cor1)")
    c.add_argument("--q", type=_int_at_least("q", 1), default=3, help="denominator of the exponent 2p/q (cor1)")
    c.add_argument("--w", choices=["state", "field"], default="state", help="vector w in V = w'Qw (cor1)")
    c.add_argument("--force", action="store_true", help="write the certificate even if validation fails")

    r = sub.add_parser("region", help="estimate a region of reaching")
    common(r)
    r.add_argument("--c", type=_positive("c"), default=0.1)
    r.add_argument("--degv", type=_int_at_least("degv", 2), default=4)
    r.add_argument("--mult-deg", type=_int_at_least("mult-deg", 0), default=1)
    r.add_argument("--shape", default=None, help="shape polynomial p in the states (default sum of squares)")
    r.add_argument("--beta-lo", type=_positive("beta-lo"), default=1e-4)
    r.add_argument("--beta-hi", type=_positive("beta-hi"), default=100.0)
    r.add_argument("--bisect-tol", type=_positive("bisect-tol"), default=1e-3)
    r.add_argument("--max-alt", type=_int_at_least("max-alt", 1), default=10)
    r.add_argument("--samples", type=_int_at_least("samples", 1), default=100000)
    r.add_argument("--n-traj", type=_int_at_least("n-traj", 0), default=20,
                   help="boundary trajectories simulated as a check (0 disables)")
    r.add_argument("--tmax", type=_positive("tmax"), default=20.0)
    r.add_argument("--dt", type=_positive("dt"), default=1e-4)
    r.add_argument("--force", action="store_true")

    s = sub.add_parser("synthesize", help="search for a CLF and build the Sontag-type feedback")
    common(s)
    sampling(s, 20000)
    s.add_argument("--method", choices=["global", "local"], required=True)
    s.add_argument("--c", type=_positive("c"), default=0.1)
    s.add_argument("--degv", type=_int_at_least("degv", 2), default=None)
    s.add_argument("--basis", choices=["original", "separable", "mixed", "root"], default=None)
    s.add_argument("--p-deg", type=_int_at_least("p-deg", 0), default=2, help="degree of the input multipliers")
    s.add_argument("--mult-deg", type=_int_at_least("mult-deg", 0), default=1)
    s.add_argument("--shape", default=None)
    s.add_argument("--beta-lo", type=_positive("beta-lo"), default=1e-4)
    s.add_argument("--beta-hi", type=_positive("beta-hi"), default=100.0)
    s.add_argument("--bisect-tol", type=_positive("bisect-tol"), default=1e-3)
    s.add_argument("--max-alt", type=_int_at_least("max-alt", 1), default=30)
    s.add_argument("--sontag-p", type=_int_at_least("sontag-p", 2), default=2)
    s.add_argument("--sontag-q", type=_int_at_least("sontag-q", 2), default=2)
    s.add_argument("--zero-tol", type=_positive("zero-tol"), default=1e-9)
    s.add_argument("--force", action="store_true")

    m = sub.add_parser("simulate", help="integrate the system (optionally under a saved controller)")
    common(m)
    m.add_argument("--x0", nargs="+", type=_floats, required=True,
                   help="initial state (spaces or commas); missing entries are zero")
    m.add_argument("--tmax", type=_positive("tmax"), default=10.0)
    m.add_argument("--dt", type=_positive("dt"), default=1e-4)
    m.add_argument("--settle-tol", type=_positive("settle-tol"), default=1e-6)
    m.add_argument("--dwell", type=_positive("dwell"), default=0.1)
    m.add_argument("--controller", default=None, help="controller file written by synthesize")
    m.add_argument("--every", type=_int_at_least("every", 1), default=1, help="write every k-th step to the CSV")
    m.add_argument("--run-on", action="store_true", help="keep integrating after settling")

    v = sub.add_parser("validate", help="check an external V by sampling")
    common(v)
    sampling(v, 100000)
    v.add_argument("--v-file", required=True, help="certificate file (needs 'variables:' and 'V:' lines)")
    v.add_argument("--c", type=_nonneg("c"), default=None, help="rate to check (default: the file's c, else 0)")
    v.add_argument("--alpha", type=_nonneg("alpha"), default=None, help="exponent (default: the file's, else 0)")
    v.add_argument("--level", type=_positive("level"), default=None, help="restrict to V <= level")
    return p


def make_config(args: argparse.Namespace) -> RunConfig:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
    opts = {k: v for k, v in vars(args).items() if k not in ("command", "system", "out", "force", "quiet")}
    alpha = opts.get("alpha")
    if alpha is not None and alpha > 1:
        raise UsageError("alpha must lie in [0, 1]")
    if args.command in ("region", "synthesize") and opts.get("beta_lo", 0) >= opts.get("beta_hi", 1):
        raise UsageError("need beta-lo < beta-hi")
    return RunConfig(args.command, args.system, out, bool(getattr(args, "force", False)), bool(args.quiet), opts)


# ---------------------------------------------------------------------------
# helpers


def _load_system(ref: str):
    from .sysparse import load_system
    return load_system(ref)


def _stem(sysobj, ref: str) -> str:
    name = sysobj.name or Path(ref).stem
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def _resolve_data_file(ref: str) -> Path:
    """Path as given, else a data file bundled with the package."""
    p = Path(ref)
    if p.exists():
        return p
    res = resources.files("ftsos") / "systems" / ref
    if res.is_file():
        return Path(str(res))
    raise FileNotFoundError(f"no such file: {ref}")


class _Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.t0 = time.perf_counter()
        self.files: List[str] = []
        self.record: Dict[str, object] = {}

    def say(self, text: str = ""):
        if not self.cfg.quiet:
            print(text)

    def write(self, name: str, text: str) -> Path:
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        path = self.cfg.out / name
        path.write_text(text)
        self.files.append(str(path))
        return path

    def finish(self, stem: str, status: str, code: int) -> int:
        summary = {"status": status, "exit_code": code, "config": self.cfg.summary(),
                   "files": self.files, "seconds": round(time.perf_counter() - self.t0, 3)}
        summary.update(self.record)
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        path = self.cfg.out / f"{stem}_{self.cfg.command}.summary.json"
        path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
        self.say(f"summary: {path}")
        return code


def _infeasible(run: _Run, stem: str, res) -> int:
    run.say(f"infeasible: {res.message or res.status} (margin {res.slack:.3e})")
    run.record["margin"] = res.slack
    return run.finish(stem, "infeasible", EXIT_INFEASIBLE)


def _emit_checked(run: _Run, stem: str, fname: str, text: str, report) -> int:
    run.say(report.summary())
    run.record["validation"] = "pass" if report.ok else "fail"
    if report.ok or run.cfg.force:
        path = run.write(fname, text)
        run.say(f"wrote {path}" + ("" if report.ok else " (unvalidated, --force)"))
        return run.finish(stem, "ok" if report.ok else "forced", EXIT_OK)
    run.say("validation failed; certificate not written (use --force to write it anyway)")
    return run.finish(stem, "validation-failed", EXIT_INFEASIBLE)


# ---------------------------------------------------------------------------
# commands


def cmd_certify(cfg: RunConfig) -> int:
    from .certify import certify_cor1, certify_thm1, certify_thm2, validate
    from .soscompile import Infeasible

    o = cfg.options
    run = _Run(cfg)
    sysobj = _load_system(cfg.system)
    stem = _stem(sysobj, cfg.system)
    method = o["method"]
    if method == "thm1":
        res = certify_thm1(sysobj, o["c"], degV=o["degv"] or 4, r_excl=o["r_excl"], eps=o["eps"],
                           mult_half_deg=o["mult_deg"])
    elif method == "thm2":
        res = certify_thm2(sysobj, o["c"], degV=o["degv"] or 2, max_alternations=o["max_alt"],
                           mult_half_deg=1 if o["mult_deg"] is None else o["mult_deg"], eps=o["eps"])
    else:
        res = certify_cor1(sysobj, o["p"], o["q"], w_choice=o["w"], eps1=o["eps"])
    if isinstance(res, Infeasible):
        return _infeasible(run, stem, res)
    run.say(f"V = {res.V.render(res.names)}")
    run.say(f"c = {res.c:.6g}, alpha = {res.alpha:.6g}, max Gram residual {res.max_residual:.2e}")
    rep = validate(res.rs, res.V, res.c, res.alpha, box=o["box"], n_samples=o["samples"],
                   r_excl=max(o["r_excl"], res.exclusion_radius), level=res.level, seed=o["seed"])
    run.record.update(c=res.c, alpha=res.alpha, V=res.V.render(res.names))
    return _emit_checked(run, stem, f"{stem}_{method}.cert", res.to_text(), rep)


def cmd_region(cfg: RunConfig) -> int:
    from .region import check_region, estimate_region
    from .soscompile import Infeasible
    from .sysparse import parse_polynomial

    o = cfg.options
    run = _Run(cfg)
    sysobj = _load_system(cfg.system)
    stem = _stem(sysobj, cfg.system)
    shape = parse_polynomial(o["shape"], list(sysobj.vars)) if o["shape"] else None
    est = estimate_region(sysobj, shape, c=o["c"], degV=o["degv"], mult_half_deg=o["mult_deg"],
                          beta_bracket=(o["beta_lo"], o["beta_hi"]), bisect_tol=o["bisect_tol"],
                          max_alternations=o["max_alt"], n_samples=o["samples"], seed=o["seed"])
    if isinstance(est, Infeasible):
        return _infeasible(run, stem, est)
    run.say(f"beta = {est.beta:.6g}")
    run.say(f"V = {est.V.render(est.names)}")
    cert = est.as_certificate()
    run.record.update(beta=est.beta, containment=est.containment)
    report = _RegionReport(est.containment, None)
    if o["n_traj"]:
        chk = check_region(est, sysobj, n_traj=o["n_traj"], dt=o["dt"], t_max=o["tmax"], seed=o["seed"])
        report.trajectories = chk
        run.record.update(settled=chk.settled, n_traj=chk.n_traj)
    return _emit_checked(run, stem, f"{stem}_region.cert", cert.to_text() + est.report(), report)


@dataclass
class _RegionReport:
    containment: Dict[str, float]
    trajectories: Optional[object]

    @property
    def ok(self) -> bool:
        good = self.containment.get("violations", 1) == 0
        return good and (self.trajectories is None or self.trajectories.ok)

    def summary(self) -> str:
        c = self.containment
        lines = [f"containment samples: {int(c.get('samples', 0))}, violations: {int(c.get('violations', 0))}, "
                 f"max V on {{p <= beta}}: {c.get('max_V', float('nan')):.6g}"]
        t = self.trajectories
        if t is not None:
            lines.append(f"boundary trajectories settled: {t.settled}/{t.n_traj}, "
                         f"largest one-step V increase {t.max_V_increase:.3e}")
            lines.extend("  " + f for f in t.failures[:10])
        lines.append("result: " + ("PASS" if self.ok else "FAIL"))
        return "\n".join(lines)


def cmd_synthesize(cfg: RunConfig) -> int:
    from .soscompile import Infeasible
    from .synth import find_clf_global, find_clf_local, make_controller, validate_clf
    from .sysparse import parse_polynomial

    o = cfg.options
    run = _Run(cfg)
    sysobj = _load_system(cfg.system)
    stem = _stem(sysobj, cfg.system)
    if o["method"] == "global":
        cert = find_clf_global(sysobj, c=o["c"], degV=o["degv"], p_deg=o["p_deg"], r_excl=o["r_excl"],
                               v_terms=o["basis"] or "separable", max_alternations=o["max_alt"])
    else:
        shape = parse_polynomial(o["shape"], list(sysobj.vars)) if o["shape"] else None
        cert = find_clf_local(sysobj, c=o["c"], degV=o["degv"], p_shape=shape,
                              beta_bracket=(o["beta_lo"], o["beta_hi"]), bisect_tol=o["bisect_tol"],
                              mult_half_deg=o["mult_deg"], p_deg=o["p_deg"], v_terms=o["basis"] or "original",
                              max_alternations=o["max_alt"], n_samples=o["samples"], seed=o["seed"])
    if isinstance(cert, Infeasible):
        return _infeasible(run, stem, cert)
    run.say(f"V = {cert.V.render(cert.names)}")
    if cert.beta is not None:
        run.say(f"beta = {cert.beta:.6g}")
        run.record["beta"] = cert.beta
    rep = validate_clf(cert, box=o["box"], n_samples=o["samples"], r_excl=o["r_excl"], seed=o["seed"])
    run.record.update(c=cert.c, V=cert.V.render(cert.names))
    code = _emit_checked(run, stem, f"{stem}_clf-{o['method']}.cert", cert.body(), rep)
    if code == EXIT_OK:
        ctrl = make_controller(cert, o["sontag_p"], o["sontag_q"], o["zero_tol"])
        path = run.write(f"{stem}_{o['method']}.ctrl", ctrl.to_text())
        run.say(f"wrote {path}")
        code = run.finish(stem, "ok", EXIT_OK)
    return code


def cmd_simulate(cfg: RunConfig) -> int:
    from .sim import integrate, system_rhs
    from .synth import closed_loop, load_controller

    o = cfg.options
    run = _Run(cfg)
    sysobj = _load_system(cfg.system)
    stem = _stem(sysobj, cfg.system)
    n = sysobj.nstates
    x0 = [v for part in o["x0"] for v in part]
    if len(x0) > n:
        raise UsageError(f"--x0 has {len(x0)} entries but the system has {n} states")
    x0 = x0 + [0.0] * (n - len(x0))
    V = control = None
    if o["controller"]:
        ctrl = load_controller(_resolve_data_file(o["controller"]), sysobj)
        rhs = closed_loop(sysobj, ctrl)
        V, control = ctrl.value, ctrl
    else:
        rhs = system_rhs(sysobj)
    tr = integrate(rhs, x0, dt=o["dt"], t_max=o["tmax"], settle_tol=o["settle_tol"], dwell=o["dwell"],
                   V=V, control=control, stop_on_settle=not o["run_on"], names=list(sysobj.vars))
    tag = "closed" if o["controller"] else "open"
    csv_path = cfg.out / f"{stem}_{tag}_traj.csv"
    cfg.out.mkdir(parents=True, exist_ok=True)
    tr.to_csv(csv_path, every=o["every"])
    run.files.append(str(csv_path))
    st = "none" if tr.settle_time is None else f"{tr.settle_time:.6g}"
    run.say(f"x0 = {x0}")
    run.say(f"settle_time: {st} (tol {tr.settle_tol:g}, dwell {tr.dwell:g})")
    run.say(f"final state: {np.array2string(tr.final_state, precision=6)} at t = {tr.t[-1]:.6g}")
    if tr.status != "ok":
        run.say(f"warning: {tr.message}")
    run.say(f"wrote {csv_path}")
    run.record.update(settle_time=tr.settle_time, x0=x0, final_state=tr.final_state.tolist(),
                      trajectory_status=tr.status)
    return run.finish(stem, "ok", EXIT_OK)


def cmd_validate(cfg: RunConfig) -> int:
    from .certify import load_certificate, validate

    o = cfg.options
    run = _Run(cfg)
    sysobj = _load_system(cfg.system)
    stem = _stem(sysobj, cfg.system)
    cert = load_certificate(_resolve_data_file(o["v_file"]), sysobj)
    c = o["c"] if o["c"] is not None else (cert.c if np.isfinite(cert.c) else 0.0)
    alpha = o["alpha"] if o["alpha"] is not None else (cert.alpha if np.isfinite(cert.alpha) else 0.0)
    level = o["level"] if o["level"] is not None else cert.level
    run.say(f"V = {cert.V.render(cert.names)}")
    rep = validate(cert.rs, cert.V, c, alpha, box=o["box"], n_samples=o["samples"], r_excl=o["r_excl"],
                   level=level, seed=o["seed"])
    run.say(rep.summary())
    eig = quadratic_eigenvalues(cert.V, cert.norig)
    if eig is not None:
        run.say("coefficient matrix eigenvalues: " + " ".join(f"{v:.6g}" for v in eig))
        run.record["eigenvalues"] = eig.tolist()
    run.record.update(c=c, alpha=alpha, chat={str(k): v for k, v in rep.chat.items()}, alpha_hat=rep.alpha_hat,
                      violations=len(rep.violations), result="pass" if rep.ok else "fail")
    return run.finish(stem, "ok" if rep.ok else "violations", EXIT_OK if rep.ok else EXIT_INFEASIBLE)


def quadratic_eigenvalues(V, norig: int) -> Optional[np.ndarray]:
    """Eigenvalues of ``P`` when ``V = x' P x`` is a quadratic form in the original states, else ``None``."""
    P = np.zeros((norig, norig))
    for m, coef in V.terms.items():
        if sum(m) != 2 or any(m[norig:]):
            return None
        idx = [i for i, e in enumerate(m[:norig]) for _ in range(e)]
        i, j = idx
        if i == j:
            P[i, i] += coef
        else:
            P[i, j] += coef / 2
            P[j, i] += coef / 2
    return np.linalg.eigvalsh(P)


COMMANDS = {"certify": cmd_certify, "region": cmd_region, "synthesize": cmd_synthesize,
            "simulate": cmd_simulate, "validate": cmd_validate}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
        if not args.command:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        cfg = make_config(args)
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"ftsos: usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, KeyError, MemoryError) as exc:
        print(f"ftsos: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    code = run(argv)
    if argv is None:
        sys.exit(code)
    return code
