"""Command-line entry point: classify, prolong, scan, singular, verify, sweep, save-model."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .class47 import CONE_TOL, is_47_failures, metric_signature, verify_adapted
from .geometry import DEFAULT_RANK_TOL
from .hamilton import (
    ADJOINT_TOL,
    DEFAULT_CONSTRAINT_TOL,
    DEFAULT_HORIZON,
    DEFAULT_STEP,
    ENDPOINT_TOL,
    IntegrationError,
    NotIntegralError,
    PathOnX,
    RefusedByTheory,
    cone_residuals,
    endpoint_jacobian_rank,
    recover_controls,
    synthesize_singular,
    verify_singular_adjoint,
)
from .models import BUILTIN, ModelError, ModelSpec, builtin_model, dumps_model, load_model
from .poly import PolyParseError
from .prolong import GridSpec, ProlongationError, build_prolongation, c3_locus_scan, cone_vector

EXIT_OK, EXIT_VALIDATION, EXIT_DEGENERATE, EXIT_REFUSED = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALIDATION, payload: dict | None = None):
        super().__init__(message)
        self.code = code
        self.payload = payload or {}


@dataclass
class RunConfig:
    command: str
    model: str | None
    file: str | None
    eps: str | None
    chart_index: int
    grid: int
    region: tuple[float, float] | None
    tol_rank: float
    tol_cone: float
    tol_constraint: float
    tol_adjoint: float
    tol_endpoint: float
    step: float
    horizon: float
    seed: int
    nodes: int
    extra: dict = field(default_factory=dict)


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise CliError(f"not a rational number: {text!r}") from None


def _floats(text: str, n: int | None = None) -> list[float]:
    vals = [float(_fraction(v)) for v in text.split(",") if v.strip()]
    if n is not None and len(vals) != n:
        raise CliError(f"expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _load(cfg: RunConfig, symbolic_ok: bool = False) -> ModelSpec:
    if cfg.file and cfg.model:
        raise CliError("give either --model or --file, not both")
    try:
        if cfg.file:
            model = load_model(cfg.file)
        else:
            model = builtin_model(cfg.model or "grassmannian")
    except (ModelError, PolyParseError, OSError) as e:
        raise CliError(str(e)) from None
    if model.chart.params:
        if cfg.eps is None or cfg.eps.strip() in model.chart.params:
            if symbolic_ok:
                return model
            missing = [p for p in model.chart.params if p not in model.params]
            if missing:
                raise CliError(f"model {model.name!r} needs a value for {missing}: pass --eps")
            return model.numeric()
        return model.bind(**{model.chart.params[0]: _fraction(cfg.eps)})
    if cfg.eps is not None and cfg.eps.strip() not in ("", "0") and not model.params:
        raise CliError(f"model {model.name!r} has no parameter to receive --eps")
    return model


def _tolerances(cfg: RunConfig) -> dict:
    return {
        "rank": cfg.tol_rank,
        "cone": cfg.tol_cone,
        "constraint": cfg.tol_constraint,
        "adjoint": cfg.tol_adjoint,
        "endpoint": cfg.tol_endpoint,
    }


def _config_echo(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d.pop("command")
    d["tolerances"] = _tolerances(cfg)
    for k in list(_tolerances(cfg)):
        d.pop(f"tol_{k}")
    return d


def _region(cfg: RunConfig, default: tuple[float, float]) -> tuple[float, float]:
    lo, hi = cfg.region or default
    if not lo < hi:
        raise CliError(f"empty region [{lo}, {hi}]")
    return lo, hi


def _samples(cfg: RunConfig, dim: int, n: int = 60) -> np.ndarray:
    lo, hi = _region(cfg, (-1.0, 1.0))
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(lo, hi, size=(n, dim))


# ---------------------------------------------------------------------------
# commands


def cmd_classify(cfg: RunConfig) -> dict:
    model = _load(cfg)
    pts = _samples(cfg, model.chart.dim)
    point = np.array(cfg.extra.get("point") or [0.0] * model.chart.dim)
    failures = is_47_failures(model.frame, np.vstack([point, pts]), cfg.tol_rank)
    out = {"model": model.name, "is_47": not failures, "samples": int(len(pts) + 1), "point": point.tolist(),
           "evidence": "sampled"}
    if failures:
        p, reason = failures[0]
        out["failure"] = {"point": p.tolist(), "reason": reason}
        raise CliError(f"not a (4,7) distribution: {reason} at {p.tolist()}", EXIT_VALIDATION, out)
    out["adapted"] = bool(verify_adapted(model.frame, pts, cfg.tol_constraint, cfg.tol_rank))
    sig = metric_signature(model.frame, point, seed=cfg.seed)
    out.update({
        "signature": sig.kind,
        "quadric": (np.round(sig.quadric, 12) + 0.0).tolist(),
        "eigenvalues": (np.round(sig.eigenvalues, 12) + 0.0).tolist(),
        "residual": float(sig.residual),
        "samples_used": sig.samples_used,
        "cone_samples_found": int(len(sig.cone_samples)),
        "diagnostic": sig.diagnostic,
    })
    if sig.kind == "degenerate":
        raise CliError(f"degenerate conformal quadric: {sig.diagnostic}", EXIT_DEGENERATE, out)
    return out


def _prolong(cfg: RunConfig, symbolic_ok: bool = False):
    model = _load(cfg, symbolic_ok)
    try:
        return build_prolongation(model, cfg.chart_index, cfg.extra.get("gauge_a"), cfg.extra.get("gauge_b"))
    except ProlongationError as e:
        raise CliError(str(e)) from None
    except PolyParseError as e:
        raise CliError(str(e)) from None


def cmd_prolong(cfg: RunConfig) -> dict:
    P = _prolong(cfg, symbolic_ok=True)
    zeta = {}
    for n, vf in enumerate(P.zeta, start=1):
        zeta[f"zeta_{n}"] = {c: str(p) for c, p in zip(P.chart.coords, vf.components) if not p.is_zero()}
    return {
        "model": P.model.name,
        "chart_index": P.chart_index,
        "coords": list(P.chart.coords),
        "params": list(P.chart.params),
        "gauge": {"a": str(P.a), "b": str(P.b)},
        "zeta": zeta,
        "c": None if P.c_fn is None else str(P.c_fn),
        "d": None if P.d_fn is None else str(P.d_fn),
    }


def cmd_scan(cfg: RunConfig) -> tuple[dict, str]:
    P = _prolong(cfg)
    lo, hi = _region(cfg, (-2.0, 2.0))
    base = cfg.extra.get("base") or ()
    grid = GridSpec((lo, hi), (lo, hi), cfg.grid, tuple(base))
    rep = c3_locus_scan(P, grid, seed=cfg.seed, tol=cfg.tol_rank)
    out = {"model": P.model.name, "chart_index": P.chart_index, "summary": rep.summary}
    return out, rep.to_csv(P.chart.coords)


def _z0(cfg: RunConfig, P) -> np.ndarray:
    z0 = cfg.extra.get("z0")
    if z0 is None:
        return np.zeros(P.chart.dim)
    if len(z0) != P.chart.dim:
        raise CliError(f"--z0 needs {P.chart.dim} numbers (x..., theta, phi)")
    return np.array(z0, float)


def cmd_singular(cfg: RunConfig) -> tuple[dict, str]:
    P = _prolong(cfg)
    z0 = _z0(cfg, P)
    v2, v3 = cfg.extra.get("v2", 1.0), cfg.extra.get("v3", 0.0)
    try:
        syn = synthesize_singular(P, z0, v2, v3, horizon=cfg.horizon, step=cfg.step, tol=cfg.tol_constraint,
                                  seed=cfg.seed)
    except RefusedByTheory as e:
        raise CliError(f"refused: {e}", EXIT_REFUSED, {"refused": True, "witness": e.witness}) from None
    except IntegrationError as e:
        raise CliError(f"integration failed: {e}", EXIT_VALIDATION) from None
    frame = P.model.numeric().fields
    adj = verify_singular_adjoint(frame, syn.path_x, cfg.tol_adjoint)
    ep = endpoint_jacobian_rank(frame, syn.control_curve(cfg.nodes), syn.path_x.points[0], tol=cfg.tol_endpoint)
    cert = {
        "adjoint_verdict": bool(adj.verdict),
        "adjoint_residual": adj.residual,
        "endpoint_rank": ep.rank,
        "sigma_ratio": ep.sigma_ratio,
        "endpoint_critical": bool(ep.critical),
        "cone_residual_max": syn.cone_residual_max,
        "bicharacteristic": syn.certificate(),
        "initial_direction": syn.path_x.initial_direction().tolist(),
        "endpoint": syn.path_x.points[-1].tolist(),
        "direction_type": syn.direction,
    }
    out = {"model": P.model.name, "z0": z0.tolist(), "controls": {"v2": v2, "v3": v3}, "certificate": cert}
    curve = syn.path_x.to_csv({f"p_{c}": syn.costate_x[:, i] for i, c in enumerate(P.model.chart.coords)}
                              | {"residual": np.concatenate([[0.0], syn.bichar.residuals])})
    return out, curve


def _read_curve(path: str, chart) -> PathOnX:
    from scipy.interpolate import CubicSpline

    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(f"{path}: empty curve file")
    header = rows[0][1:]  # column 0 is time, whatever it is called
    coords = chart.coords
    missing = [c for c in coords if c not in header]
    if missing:
        raise CliError(f"{path}: missing columns {missing}")
    idx = [0] + [header.index(c) + 1 for c in coords]
    try:
        data = np.array([[float(r[i]) for i in idx] for r in rows[1:]])
    except (ValueError, IndexError) as e:
        raise CliError(f"{path}: bad numeric row ({e})") from None
    if len(data) < 4:
        raise CliError(f"{path}: need at least 4 samples")
    t, x = data[:, 0], data[:, 1:]
    vel = CubicSpline(t, x)(t, 1)
    return PathOnX(chart, t, x, vel)


def cmd_verify(cfg: RunConfig) -> dict:
    model = _load(cfg)
    curve = cfg.extra.get("curve")
    if not curve:
        raise CliError("verify needs a curve CSV")
    gamma = _read_curve(curve, model.chart)
    try:
        u = recover_controls(model.fields, gamma, cfg.extra.get("tol_integral", 1e-6))
        adj = verify_singular_adjoint(model.fields, gamma, cfg.tol_adjoint, cfg.extra.get("tol_integral", 1e-6))
    except NotIntegralError as e:
        raise CliError(f"curve is not D-integral: {e}") from None
    from .hamilton import ControlCurve

    grid = np.linspace(gamma.times[0], gamma.times[-1], cfg.nodes)
    ctrl = ControlCurve(grid, np.column_stack([np.interp(grid, gamma.times, u[:, i]) for i in range(u.shape[1])]))
    ep = endpoint_jacobian_rank(model.fields, ctrl, gamma.points[0], tol=cfg.tol_endpoint)
    return {
        "model": model.name,
        "samples": int(gamma.times.size),
        "adjoint": adj.as_dict(),
        "endpoint": {k: v for k, v in ep.as_dict().items() if k != "singular_values"},
        "cone_residual_max": float(np.max(cone_residuals(u))),
        "agree": bool(adj.verdict == ep.critical),
    }


# cone directions named by the fiber coordinates of chart 1
STATED_INCLUSION = "{u1=u3=0} u {u2=u4=0} u {u1=u3, u2=u4}"


def _in_stated_inclusion(u, tol=1e-9) -> bool:
    u = np.asarray(u, float) / np.linalg.norm(u)
    return bool(
        (abs(u[0]) < tol and abs(u[2]) < tol)
        or (abs(u[1]) < tol and abs(u[3]) < tol)
        or (abs(u[0] - u[2]) < tol and abs(u[1] - u[3]) < tol)
    )


def svc_probe(P, x, theta, phi, horizon: float, step: float, tol_adjoint: float, seed: int) -> bool:
    """Does an F-curve with v3 = 0 from (x, theta, phi) pass the adjoint certificate?"""
    z0 = np.concatenate([x, [theta, phi]])
    try:
        syn = synthesize_singular(P, z0, 1.0, 0.0, horizon=horizon, step=step, seed=seed, check_type=False)
    except IntegrationError:
        return False
    adj = verify_singular_adjoint(P.model.numeric().fields, syn.path_x, tol_adjoint)
    return bool(adj.verdict)


def cmd_sweep(cfg: RunConfig) -> dict:
    eps_list = cfg.extra.get("eps_list") or ["0", "1/2", "1"]
    base_model = cfg.model or "epsilon"
    lo, hi = _region(cfg, (-2.0, 2.0))
    rows = []
    symbolic = build_prolongation(builtin_model(base_model) if not cfg.file else load_model(cfg.file),
                                  cfg.chart_index)
    for e in eps_list:
        sub = RunConfig(**{**asdict(cfg), "eps": e, "model": base_model})
        model = _load(sub)
        P = build_prolongation(model, cfg.chart_index)
        sig = metric_signature(model.frame, np.zeros(model.chart.dim), seed=cfg.seed)
        scan = c3_locus_scan(P, GridSpec((lo, hi), (lo, hi), cfg.grid), seed=cfg.seed, tol=cfg.tol_rank)
        probes = []
        th_axis, ph_axis = GridSpec((lo, hi), (lo, hi), cfg.extra.get("probe_grid", 5)).axes()
        x = np.zeros(model.chart.dim)
        for th in th_axis:
            for ph in ph_axis:
                u = cone_vector(cfg.chart_index, float(th), float(ph))
                ok = svc_probe(P, x, float(th), float(ph), cfg.extra.get("probe_horizon", 0.25), cfg.step,
                               cfg.tol_adjoint, cfg.seed)
                c_val = float(P.c_fn.eval_exact(list(x) + [th, ph])) if P.c_fn is not None else None
                probes.append({"theta": float(th), "phi": float(ph), "u": u.tolist(), "singular": ok,
                               "c": c_val, "in_stated_inclusion": _in_stated_inclusion(u)})
        succ = [p for p in probes if p["singular"]]
        rows.append({
            "eps": e,
            "signature": sig.kind,
            "fraction_C3": scan.summary["fraction_C3"],
            "fraction_mixed": scan.summary["fraction_mixed"],
            "fraction_regular": scan.summary["fraction_regular"],
            "c": str(P.c_fn) if P.c_fn is not None else None,
            "c_zero_set": scan.summary["c_zero_set_description"],
            "svc_probes": len(probes),
            "svc_successes": len(succ),
            "successes_in_stated_inclusion": sum(p["in_stated_inclusion"] for p in succ),
            "successes_on_c_zero_set": sum(p["c"] == 0 for p in succ),
            "probes": probes,
        })
    return {
        "model": base_model,
        "c_symbolic": None if symbolic.c_fn is None else str(symbolic.c_fn),
        "stated_inclusion": STATED_INCLUSION,
        "rows": rows,
        "evidence": "sampled",
    }


def cmd_save_model(cfg: RunConfig) -> tuple[dict, str]:
    model = _load(cfg, symbolic_ok=True)
    text = dumps_model(model)
    return {"model": model.name, "bytes": len(text.encode())}, text


COMMANDS = {
    "classify": cmd_classify,
    "prolong": cmd_prolong,
    "scan": cmd_scan,
    "singular": cmd_singular,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "save-model": cmd_save_model,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("model")
    src.add_argument("--model", choices=sorted(BUILTIN), help="built-in model")
    src.add_argument("--file", help="model file")
    src.add_argument("--eps", help="value of eps (rational), or 'eps' to keep it symbolic")
    common.add_argument("--chart-index", type=int, default=1, choices=(1, 2, 3, 4))
    common.add_argument("--grid", type=int, default=21, help="grid points per fiber axis")
    common.add_argument("--region", help="lo,hi box for sampling (fiber box for scan/sweep)")
    common.add_argument("--tol-rank", type=float, default=DEFAULT_RANK_TOL)
    common.add_argument("--tol-cone", type=float, default=CONE_TOL)
    common.add_argument("--tol-constraint", type=float, default=DEFAULT_CONSTRAINT_TOL)
    common.add_argument("--tol-adjoint", type=float, default=ADJOINT_TOL)
    common.add_argument("--tol-endpoint", type=float, default=ENDPOINT_TOL)
    common.add_argument("--step", type=float, default=DEFAULT_STEP)
    common.add_argument("--horizon", type=float, default=DEFAULT_HORIZON)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--nodes", type=int, default=50, help="control nodes for the endpoint oracle")
    common.add_argument("--out", help="write the report here (CSV data goes next to it)")

    parser = argparse.ArgumentParser(prog="distflag", description="Rank-4 distributions on 7-dimensional charts")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("classify", parents=[common], help="(4,7) test, adapted frame and quadric signature")
    p.add_argument("--point", help="comma-separated base point")
    p = sub.add_parser("prolong", parents=[common], help="zeta frame and the c, d functions")
    p.add_argument("--gauge-a", default=None)
    p.add_argument("--gauge-b", default=None)
    p = sub.add_parser("scan", parents=[common], help="growth/type scan over the fiber")
    p.add_argument("--base", help="comma-separated base point x")
    p.add_argument("--gauge-a", default=None)
    p.add_argument("--gauge-b", default=None)
    p = sub.add_parser("singular", parents=[common], help="synthesize and certify a singular path")
    p.add_argument("--z0", help="comma-separated start point (x..., theta, phi)")
    p.add_argument("--v2", type=float, default=1.0)
    p.add_argument("--v3", type=float, default=0.0)
    p = sub.add_parser("verify", parents=[common], help="run both oracles on a curve CSV")
    p.add_argument("curve", help="CSV with columns t and the model coordinates")
    p.add_argument("--tol-integral", type=float, default=1e-6)
    p = sub.add_parser("sweep", parents=[common], help="eps sweep of the perturbed family")
    p.add_argument("--eps-list", default="0,1/2,1")
    p.add_argument("--probe-grid", type=int, default=5)
    p.add_argument("--probe-horizon", type=float, default=0.25)
    sub.add_parser("save-model", parents=[common], help="write a model file")
    return parser


def config_from_args(args) -> RunConfig:
    extra = {}
    for name in ("point", "base", "z0"):
        v = getattr(args, name, None)
        if v:
            extra[name] = _floats(v)
    for name in ("v2", "v3", "gauge_a", "gauge_b", "curve", "tol_integral", "probe_grid", "probe_horizon"):
        v = getattr(args, name, None)
        if v is not None:
            extra[name] = v
    if getattr(args, "eps_list", None):
        extra["eps_list"] = [e.strip() for e in args.eps_list.split(",") if e.strip()]
    region = tuple(_floats(args.region, 2)) if args.region else None
    for name in ("tol_rank", "tol_cone", "tol_constraint", "tol_adjoint", "tol_endpoint", "step", "horizon"):
        if getattr(args, name) <= 0:
            raise CliError(f"--{name.replace('_', '-')} must be positive")
    return RunConfig(args.command, args.model, args.file, args.eps, args.chart_index, args.grid, region,
                     args.tol_rank, args.tol_cone, args.tol_constraint, args.tol_adjoint, args.tol_endpoint,
                     args.step, args.horizon, args.seed, args.nodes, extra)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n"


def run(argv=None) -> tuple[int, dict, str | None]:
    """Run a command; returns (exit code, report, side data such as CSV or model text)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    side = None
    report = {"command": args.command}
    try:
        cfg = config_from_args(args)
        report["config"] = _config_echo(cfg)
        result = COMMANDS[cfg.command](cfg)
        if isinstance(result, tuple):
            result, side = result
        report["result"] = result
        report["status"] = "ok"
        code = EXIT_OK
    except CliError as e:
        report["status"] = "error"
        report["error"] = str(e)
        if e.payload:
            report["result"] = e.payload
        code = e.code
    report["warnings"] = _warnings(report)
    report["timing_seconds"] = round(time.perf_counter() - t0, 3)
    return code, report, side


def _warnings(report: dict) -> list[str]:
    out = []
    res = report.get("result") or {}
    if report.get("command") == "singular" and "certificate" in res:
        c = res["certificate"]
        if c["adjoint_verdict"] != c["endpoint_critical"]:
            out.append("oracles disagree")
        elif c["sigma_ratio"] > 1e-2 * report["config"]["tolerances"]["endpoint"] and c["endpoint_critical"]:
            out.append("inconclusive rank gap")
    if report.get("command") == "sweep" and "rows" in res:
        for row in res["rows"]:
            outside = row["svc_successes"] - row["successes_in_stated_inclusion"]
            if row["c"] != "0" and outside:
                out.append(f"eps={row['eps']}: {outside} singular probe directions lie outside the stated inclusion")
    return out


def main(argv=None) -> int:
    code, report, side = run(argv)
    text = dumps_report(report)
    args_out = None
    if argv is None:
        argv = sys.argv[1:]
    if "--out" in argv:
        args_out = argv[argv.index("--out") + 1]
    else:
        for a in argv:
            if a.startswith("--out="):
                args_out = a.split("=", 1)[1]
    if args_out:
        out = Path(args_out)
        if report["command"] == "save-model" and side is not None:
            _atomic_write(out, side)
            _atomic_write(out.with_suffix(out.suffix + ".json"), text)
        else:
            _atomic_write(out, text)
            if side is not None:
                _atomic_write(out.with_suffix(".csv"), side)
    else:
        sys.stdout.write(text)
        if report["command"] == "save-model" and side is not None and code == EXIT_OK:
            sys.stdout.write(side)
    if code != EXIT_OK:
        sys.stderr.write(f"distflag {report['command']}: {report.get('error', 'failed')}\n")
    return code


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


if __name__ == "__main__":
    sys.exit(main())
