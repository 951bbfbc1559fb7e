"""Command-line entry point: ``swimrl <command> --config file.json``.

Commands: lyapunov, validate-dist, validate-value, train, eval, compare,
hybrid-eval.  Each writes ``<command>-<hash>.csv`` (plot-ready columns)
and ``<command>-<hash>.json`` (summary with the config, its hash and the
provenance string) into the output directory, where ``<hash>`` is the first
12 hex digits of the config hash.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .agents import PrescribedController, load_agent, save_agent
from .config import config_hash, environment_hash, load_config
from .errors import ConfigError, SwimRLError
from .experiments import (AgentSpec, HistogramConfig, build_agent, greedy, lyapunov_experiment,
                          pc_vs_ap_experiment, return_distribution_experiment,
                          separation_histogram_experiment, short_horizon_experiment,
                          value_validation_experiment)
from .flows import ABCFlowParams, BKFlowParams, IntegratorConfig
from .theory import (BaselineParams, CramerFit, bk_lyapunov, d_tilde_from_bk, d_tilde_from_lyapunov,
                     optimal_phi)
from .training import ReturnStats, TrainConfig, default_init_scale, evaluate, make_env, train

log = logging.getLogger("swimrl")

COMMANDS = ("lyapunov", "validate-dist", "validate-value", "train", "eval", "compare", "hybrid-eval")
SIG_DIGITS = 12


# ---------------------------------------------------------------------------
# Records and persistence
# ---------------------------------------------------------------------------

def provenance() -> str:
    """``git describe`` of the working tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"swimrl {__version__} ({out.stdout.strip()})"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"swimrl {__version__}"


@dataclass
class ResultRecord:
    experiment: str
    config_hash: str
    env_hash: str
    columns: list
    rows: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    provenance: str = field(default_factory=provenance)
    created: float = field(default_factory=time.time)

    def summary(self, cfg: dict | None = None) -> dict:
        doc = {"experiment": self.experiment, "config_hash": self.config_hash,
               "env_hash": self.env_hash, "provenance": self.provenance,
               "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.created)),
               "metrics": self.metrics}
        if cfg is not None:
            doc["config"] = cfg
        return doc


def format_value(v) -> str:
    """Decimal (never exponent) notation with 12 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    x = float(v)
    if not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return np.format_float_positional(x, precision=SIG_DIGITS, unique=False, fractional=False, trim="-")


def export_csv(record: ResultRecord, path) -> Path:
    """RFC 4180 CSV: header of ``record.columns`` then one line per row."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(record.columns)
            for row in record.rows:
                if len(row) != len(record.columns):
                    raise ValueError(f"row has {len(row)} fields, header has {len(record.columns)}")
                w.writerow([format_value(v) for v in row])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None
    return path


def read_csv(path) -> tuple[list, list]:
    with Path(path).open(newline="") as fh:
        r = list(csv.reader(fh))
    return r[0], [[float(x) for x in row] for row in r[1:]]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_outputs(record: ResultRecord, cfg: dict, out_dir: Path) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{record.experiment}-{record.config_hash[:12]}"
    csv_path = export_csv(record, out_dir / f"{stem}.csv")
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(_jsonable(record.summary(cfg)), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# Config -> objects
# ---------------------------------------------------------------------------

def _need(cfg: dict, *sections):
    for s in sections:
        if cfg.get(s) is None:
            raise ConfigError(f"section '{s}' is required for this command", cfg.get("_source", "<config>"))


def build_flow(cfg: dict):
    f = cfg["flow"]
    try:
        if f["type"] == "bk":
            return BKFlowParams(D=f["D"], d=f["d"], kappa=f["kappa"])
        return ABCFlowParams(A=f["A"], B=f["B"], C=f["C"], kappa=f["kappa"])
    except ValueError as exc:
        raise ConfigError(str(exc), "flow") from None


def build_env(cfg: dict):
    flow = build_flow(cfg)
    it = cfg["integrator"]
    base = IntegratorConfig.for_flow(flow, it["dt"])
    integ = IntegratorConfig(dt=it["dt"], max_sep=it["max_sep"] if it["max_sep"] is not None else base.max_sep)
    return make_env(flow, integ)


def flow_lambda(cfg: dict, flow) -> float | None:
    """Mean Lyapunov exponent: exact for BK, from the ``cramer`` section for ABC."""
    if isinstance(flow, BKFlowParams):
        return bk_lyapunov(flow.D, flow.d)
    if cfg.get("cramer") is not None:
        return cfg["cramer"]["lambda_bar"]
    return None


def build_train_config(cfg: dict, env) -> TrainConfig:
    _need(cfg, "episode", "integrator")
    ep = cfg["episode"]
    dt = cfg["integrator"]["dt"]
    steps = int(round(ep["horizon"] / dt))
    if abs(steps * dt - ep["horizon"]) > 1e-9 * ep["horizon"]:
        raise ConfigError("horizon must be a whole number of steps", "episode.horizon")
    init = ep["init_scale"]
    if init is None:
        lam = flow_lambda(cfg, env.params)
        if lam is None:
            raise ConfigError("init_scale needs either a value or a 'cramer' section", "episode.init_scale")
        init = default_init_scale(env.params.kappa, lam)
    return TrainConfig(init_scale=init, steps=steps, dt=dt, nu=ep["nu"], beta=ep["beta"],
                       episodes=ep["episodes"], seed=cfg["seed"], eval_episodes=ep["eval_episodes"],
                       curve_every=ep["curve_every"], curve_episodes=ep["curve_episodes"],
                       lr_decay=ep["lr_decay"], chunk=ep["chunk"], workers=cfg["workers"])


def build_baseline(cfg: dict, env, tc: TrainConfig, phi: float | None = None) -> BaselineParams:
    _need(cfg, "baseline")
    b = cfg["baseline"]
    d_tilde = b["d_tilde"]
    if d_tilde is None:
        lam = flow_lambda(cfg, env.params)
        if lam is None:
            raise ConfigError("d_tilde needs either a value or a 'cramer' section", "baseline.d_tilde")
        d_tilde = (d_tilde_from_bk(env.params.D, env.params.d) if isinstance(env.params, BKFlowParams)
                   else d_tilde_from_lyapunov(lam, env.d))
    return BaselineParams(phi if phi is not None else b["phi"], d_tilde, tc.beta, tc.nu, tc.horizon,
                          env.params.kappa, env.d)


def agent_spec(cfg: dict) -> AgentSpec:
    a = dict(cfg.get("agent") or {})
    a.pop("checkpoint", None)
    a["hidden"] = tuple(a.get("hidden", (64, 64)))
    try:
        return AgentSpec(**a)
    except ValueError as exc:
        raise ConfigError(str(exc), "agent") from None


def summary_line(name: str, value) -> str:
    return f"{name} = {format_value(value) if not isinstance(value, str) else value}"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_lyapunov(cfg):
    _need(cfg, "flow", "lyapunov")
    ly = cfg["lyapunov"]
    flow = build_flow(cfg)
    if ly["kappa"] is not None and isinstance(flow, ABCFlowParams):
        flow = dataclasses.replace(flow, kappa=ly["kappa"])
    dt = ly["dt"] or (cfg["integrator"]["dt"] if cfg.get("integrator") else 1e-2)
    res = lyapunov_experiment(flow, ly["t_window"], ly["n_samples"], cfg["seed"], dt)
    counts, edges = res.fit.histogram
    centers = 0.5 * (edges[1:] + edges[:-1])
    dens = counts / (counts.sum() * np.diff(edges))
    metrics = {"lambda_bar": res.fit.lambda_bar, "s1_curv": res.fit.s1_curv, "d_tilde": res.d_tilde,
               "t_window": ly["t_window"], "n_samples": res.fit.n_samples}
    if cfg.get("episode") is not None:
        metrics["phi_star"] = optimal_phi(res.d_tilde, cfg["episode"]["beta"])
    return ResultRecord("lyapunov", "", "", ["lambda", "count", "density"],
                        [list(r) for r in zip(centers, counts, dens)], metrics)


def cmd_validate_dist(cfg):
    _need(cfg, "flow", "integrator", "histogram")
    env = build_env(cfg)
    h = cfg["histogram"]
    fit = None
    if cfg.get("cramer") is not None:
        fit = CramerFit(cfg["cramer"]["lambda_bar"], cfg["cramer"]["s1_curv"], math.inf)
    hc = HistogramConfig(n_particles=h["n_particles"], burn_in=h["burn_in"], duration=h["duration"],
                         split_every=h["split_every"], max_split=h["max_split"], fit_lo=h["fit_lo"],
                         fit_hi=h["fit_hi"], bins_per_decade=h["bins_per_decade"],
                         splitting=h["splitting"], seed=cfg["seed"])
    res, pred = separation_histogram_experiment(env, h["phi"], fit, hc)
    metrics = {"phi": h["phi"], "fitted_slope": res.fitted_slope, "predicted_slope": res.predicted_slope,
               "relative_error": res.relative_error, "s_d": pred.s_d, "fit_lo": res.fit_range[0],
               "fit_hi": res.fit_range[1], "lost_weight": res.lost_weight}
    rows = [list(r) for r in zip(res.centers, res.density, res.predicted)]
    return ResultRecord("validate-dist", "", "", ["s", "empirical_density", "predicted_density"], rows, metrics)


def cmd_validate_value(cfg):
    _need(cfg, "flow", "integrator", "episode", "baseline", "value")
    env = build_env(cfg)
    tc = build_train_config(cfg, env)
    bp = build_baseline(cfg, env, tc)
    v = cfg["value"]
    grid = value_validation_experiment(env, bp, tc, v["times"], v["norms"], v["rollouts"])
    metrics = {"phi": bp.phi, "d_tilde": bp.d_tilde, "max_rel_error": grid.max_rel_error,
               "max_abs_error": float(grid.abs_error.max())}
    cols = ["t", "s", "mc_return", "mc_stderr", "physicist_value", "abs_error", "rel_error"]
    return ResultRecord("validate-value", "", "", cols, [list(r) for r in grid.rows()], metrics)


def _agent_for(cfg, env, tc, phi=None):
    spec = agent_spec(cfg)
    bp = build_baseline(cfg, env, tc, phi) if spec.kind == "ap" else None
    return build_agent(spec, bp, cfg["seed"], env.d)


def cmd_train(cfg, out_dir: Path):
    _need(cfg, "flow", "integrator", "episode", "agent")
    env = build_env(cfg)
    tc = build_train_config(cfg, env)
    agent = _agent_for(cfg, env, tc)
    curve, agent = train(agent, env, tc)
    g = evaluate(env, greedy(agent), tc, tag="final")
    st = ReturnStats.from_returns(g)
    metrics = {"final_mean_return": st.mean, "final_median_return": st.median, "final_stderr": st.stderr,
               "episodes": tc.episodes}
    rec = ResultRecord("train", "", "", ["episode", "mean_return", "median_return", "stderr"],
                       [list(r) for r in curve.rows()], metrics)
    rec._agent = agent
    return rec


def _controller(cfg, env, tc):
    """Controller under evaluation: a checkpoint when given, else PC at baseline.phi."""
    ck = (cfg.get("agent") or {}).get("checkpoint")
    if ck:
        try:
            return greedy(load_agent(ck)), f"agent:{Path(ck).name}"
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint: {exc.strerror}", "agent.checkpoint") from None
    _need(cfg, "baseline")
    return PrescribedController(cfg["baseline"]["phi"]), f"pc:{cfg['baseline']['phi']}"


def cmd_eval(cfg):
    _need(cfg, "flow", "integrator", "episode")
    env = build_env(cfg)
    tc = build_train_config(cfg, env)
    ctrl, name = _controller(cfg, env, tc)
    g = evaluate(env, ctrl, tc, tag="eval")
    st = ReturnStats.from_returns(g)
    metrics = {"controller": name, "mean_return": st.mean, "median_return": st.median,
               "stderr": st.stderr, "episodes": int(g.size)}
    metrics.update({f"q{int(q * 100):02d}": v for q, v in st.quantiles.items()})
    return ResultRecord("eval", "", "", ["episode", "return"], [[i, x] for i, x in enumerate(g)], metrics)


def cmd_compare(cfg):
    _need(cfg, "flow", "integrator", "episode", "baseline", "compare")
    env = build_env(cfg)
    tc = build_train_config(cfg, env)
    bp = build_baseline(cfg, env, tc)
    c = cfg["compare"]
    rows, _ = pc_vs_ap_experiment(env, c["phis"], tc, agent_spec(cfg), bp.d_tilde, c["n_eval"])
    table = [[r.phi, r.pc_mean, r.pc_stderr, r.ap_mean, r.ap_stderr, r.winner] for r in rows]
    metrics = {f"winner_phi_{format_value(r.phi)}": r.winner for r in rows}
    return ResultRecord("compare", "", "", ["phi", "pc_mean", "pc_stderr", "ap_mean", "ap_stderr", "winner"],
                        table, metrics)


def tabulate_results(paths) -> ResultRecord:
    """Collect ``eval`` summaries into one table; all must share an environment hash."""
    docs = []
    for p in paths:
        try:
            docs.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read result summary ({exc})", str(p)) from None
    hashes = {d.get("env_hash") for d in docs}
    if len(hashes) != 1:
        raise ConfigError("results come from different environments (env_hash mismatch)", ", ".join(map(str, paths)))
    rows = [[d["metrics"].get("controller", d["experiment"]), d["metrics"]["mean_return"],
             d["metrics"]["median_return"], d["metrics"]["stderr"]] for d in docs]
    return ResultRecord("compare", config_hash({"inputs": [d["config_hash"] for d in docs]}), hashes.pop(),
                        ["controller", "mean_return", "median_return", "stderr"], rows,
                        {"n_results": len(docs)})


def cmd_hybrid_eval(cfg):
    _need(cfg, "flow", "integrator", "episode", "baseline")
    env = build_env(cfg)
    tc = build_train_config(cfg, env)
    ck = (cfg.get("agent") or {}).get("checkpoint")
    if ck:
        agent = load_agent(ck)
    else:
        _need(cfg, "agent")
        agent = _agent_for(cfg, env, tc)
        train(agent, env, tc, curve=False)
    h = cfg.get("hybrid") or {"n": 10, "threshold": 0.0, "episodes": 500}
    stats = return_distribution_experiment(env, agent, cfg["baseline"]["phi"], tc, h["episodes"], h["n"],
                                           h["threshold"])
    names = list(stats)
    rows = [[i] + [stats[k].returns[i] for k in names] for i in range(h["episodes"])]
    metrics = {}
    for k in names:
        metrics[f"{k}_mean"] = stats[k].mean
        metrics[f"{k}_median"] = stats[k].median
    hz = cfg.get("horizons")
    if hz is not None:
        # truncated-horizon means of AP and PC (plus any extra PC gains)
        phi = cfg["baseline"]["phi"]
        ctrls = {"AP": greedy(agent), f"PC_{format_value(phi)}": PrescribedController(phi)}
        for p in hz.get("phis") or []:
            ctrls[f"PC_{format_value(p)}"] = PrescribedController(p)
        curves = short_horizon_experiment(env, ctrls, hz["values"], tc, hz["episodes"])
        for name, arr in curves.items():
            for h, (mean, _) in zip(hz["values"], arr):
                metrics[f"horizon_{format_value(h)}_{name}_mean"] = float(mean)
    return ResultRecord("hybrid-eval", "", "", ["episode"] + [f"{k}_return" for k in names], rows, metrics)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swimrl", description="Swimmer control experiments in BK and ABC flows.")
    p.add_argument("--version", action="version", version=f"swimrl {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "compare", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--workers", type=int, help="rollout worker threads")
        sp.add_argument("--out", help="output directory (default: $SWIMRL_OUT or ./results)")
        sp.add_argument("--quiet", action="store_true", help="suppress the metric summary")
        if name == "compare":
            sp.add_argument("--results", nargs="+", help="tabulate existing eval summaries instead of running")
    return p


def run(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    out_dir = Path(args.out or os.environ.get("SWIMRL_OUT") or "results")
    try:
        if args.command == "compare" and args.results:
            rec = tabulate_results(args.results)
            cfg = {"inputs": list(args.results)}
        else:
            if not args.config:
                raise ConfigError("--config is required", args.command)
            cfg = load_config(args.config)
            if args.seed is not None:
                if args.seed < 0:
                    raise ConfigError("seed must be non-negative", "--seed")
                cfg["seed"] = args.seed
            if args.workers is not None:
                if args.workers < 1:
                    raise ConfigError("workers must be positive", "--workers")
                cfg["workers"] = args.workers
            if args.out is None and cfg.get("out"):
                out_dir = Path(cfg["out"])
            handler = {
                "lyapunov": cmd_lyapunov, "validate-dist": cmd_validate_dist,
                "validate-value": cmd_validate_value, "eval": cmd_eval, "compare": cmd_compare,
                "hybrid-eval": cmd_hybrid_eval,
            }.get(args.command)
            rec = cmd_train(cfg, out_dir) if args.command == "train" else handler(cfg)
            rec.config_hash = config_hash(cfg)
            rec.env_hash = environment_hash(cfg)
        csv_path, json_path = write_outputs(rec, cfg, out_dir)
        agent = getattr(rec, "_agent", None)
        if agent is not None:
            save_agent(agent, out_dir / f"{rec.experiment}-{rec.config_hash[:12]}-agent.json")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SwimRLError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        for k, v in rec.metrics.items():
            print(summary_line(k, v))
        print(f"wrote {csv_path} and {json_path}")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
