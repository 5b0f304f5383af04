"""Command-line entry points: ``psbayes estimate|simulate|panel``.

Every run writes a result envelope (JSON by default) whose content is fully
determined by the configuration and seed; wall time is the only field that
may differ between identical runs.  Errors map to stable exit codes with a
machine-readable JSON record on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass
from typing import Optional

from . import __version__, errors
from .bps import bps_sample, summarize
from .data import read_csv, read_panel_csv
from .frequentist import complete_case, full_sample, kott_chang, ops_gmm, ps_taylor
from .nmar import DaConfig, bda_sample, fi_em
from .numerics import RngHandle
from .obps import MhConfig, obps_sample
from .panel import panel_bps, panel_fit, panel_obps
from .propensity import ResponseModel, floor_event_count, reset_floor_events
from .simlab import METHODS, run_study

SCHEMA_VERSION = 1

EXIT_CODES = {
    errors.ParseError: 3,
    errors.InconsistentMissingness: 4,
    errors.EmptyRespondents: 5,
    errors.NoConvergence: 6,
    errors.Separation: 7,
    errors.TooManyFailures: 8,
    errors.DegenerateChain: 9,
    errors.NotPSD: 10,
    errors.SingularJacobian: 11,
    errors.NonFiniteEvaluation: 12,
    errors.TooFewDraws: 13,
    errors.MissingPredictor: 14,
    errors.NonFiniteTilt: 15,
}

ESTIMATE_METHODS = ("ps", "bps", "ops", "obps", "cc", "kc", "fi", "bda", "full")


@dataclass
class RunConfig:
    """Echoed verbatim into the envelope so results are self-describing."""

    command: str
    method: Optional[str] = None
    data: Optional[str] = None
    study: Optional[int] = None
    mechanism: Optional[str] = None
    mean_fn: Optional[str] = None
    methods: Optional[list] = None
    reps: Optional[int] = None
    n: Optional[int] = None
    draws: int = 2000
    burn_in: int = 2000
    keep: int = 2000
    seed: int = 0
    level: float = 0.95
    output: Optional[str] = None
    format: str = "json"
    threads: int = 1
    emit_draws: bool = False
    chains: int = 1

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")


@dataclass
class ResultEnvelope:
    config: RunConfig
    results: dict
    diagnostics: dict
    schema_version: int = SCHEMA_VERSION
    tool_version: str = __version__
    wall_time_s: float = 0.0
    draws: Optional[list] = None

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "config": {k: v for k, v in asdict(self.config).items() if v is not None},
            "results": self.results,
            "diagnostics": self.diagnostics,
            "wall_time_s": self.wall_time_s,
        }
        if self.draws is not None:
            out["draws"] = self.draws
        return out


def _summaries_to_rows(summaries, level) -> list:
    rows = []
    for name, s in summaries.items():
        rows.append({
            "name": name,
            "estimate": s.median,
            "mean": s.mean,
            "sd": s.sd,
            "lower": s.hpd.lower,
            "upper": s.hpd.upper,
            "interval": f"hpd{level:g}",
        })
    return rows


def _freq_to_rows(est) -> list:
    return [{
        "name": "theta",
        "estimate": est.theta_hat,
        "se": est.se,
        "lower": est.ci[0],
        "upper": est.ci[1],
        "interval": "normal95",
    }]


def _posterior_results(draws_obj, level, emit):
    summaries = summarize(draws_obj, level)
    rows = _summaries_to_rows(summaries, level)
    diag = {"failed_draws": draws_obj.failed_draw_count}
    diag.update(draws_obj.diagnostics)
    emitted = draws_obj.draws.tolist() if emit else None
    return rows, diag, emitted


def _pooled_obps(ds, model, mh, rng, chains):
    """Run independent MH chains on keyed substreams and pool the kept draws
    (burn-in already discarded per chain)."""
    if chains <= 1:
        draws, _ = obps_sample(ds, model, mh, rng)
        return draws
    parts = []
    rates = []
    for c in range(chains):
        draws_c, diag_c = obps_sample(ds, model, mh, rng.child(c))
        parts.append(draws_c)
        rates.append(diag_c.acceptance_rate)
    import numpy as np

    pooled = parts[0]
    pooled.draws = np.vstack([p.draws for p in parts])
    pooled.diagnostics = {
        "acceptance_rate": float(np.mean(rates)),
        "chain_acceptance_rates": rates,
        "chains": chains,
        "chain_length": parts[0].diagnostics["chain_length"],
    }
    return pooled


def cmd_estimate(cfg: RunConfig) -> ResultEnvelope:
    ds = read_csv(cfg.data)
    rng = RngHandle(cfg.seed)
    reset_floor_events()
    mar_model = ResponseModel(link="logit", x_cols=tuple(range(ds.d)))
    method = cfg.method
    emitted = None

    if method == "full":
        rows, diag = _freq_to_rows(full_sample(ds)), {}
    elif method == "cc":
        rows, diag = _freq_to_rows(complete_case(ds)), {}
    elif method == "ps":
        rows, diag = _freq_to_rows(ps_taylor(ds, mar_model)), {}
    elif method == "ops":
        est = ops_gmm(ds, mar_model)
        rows, diag = _freq_to_rows(est), {"gmm_objective": est.extras["objective"]}
    elif method == "kc":
        est = kott_chang(ds)
        rows, diag = _freq_to_rows(est), {"separation": est.extras.get("separation", False)}
    elif method == "fi":
        res = fi_em(ds, ResponseModel(link="logit", x_cols=(), use_y=True), rng=rng)
        rows = [{"name": "theta", "estimate": res.theta_fi, "interval": "none"}]
        rows += [{"name": f"phi_{j}", "estimate": float(v), "interval": "none"}
                 for j, v in enumerate(res.phi_hat)]
        diag = {"em_iterations": res.iterations, "separation": res.separation}
    elif method == "bps":
        draws = bps_sample(ds, mar_model, cfg.draws, rng)
        rows, diag, emitted = _posterior_results(draws, cfg.level, cfg.emit_draws)
    elif method == "obps":
        mh = MhConfig(burn_in=cfg.burn_in, keep=cfg.keep)
        draws = _pooled_obps(ds, mar_model, mh, rng, cfg.chains)
        rows, diag, emitted = _posterior_results(draws, cfg.level, cfg.emit_draws)
    elif method == "bda":
        da = DaConfig(burn_in=cfg.burn_in, keep=cfg.keep)
        draws = bda_sample(ds, ResponseModel(link="logit", x_cols=(), use_y=True), da, rng)
        rows, diag, emitted = _posterior_results(draws, cfg.level, cfg.emit_draws)
    else:
        raise _Usage(f"unknown method {cfg.method!r}; choose from {ESTIMATE_METHODS}")

    diag["floor_events"] = floor_event_count()
    return ResultEnvelope(cfg, {"parameters": rows}, diag, draws=emitted)


def cmd_simulate(cfg: RunConfig) -> ResultEnvelope:
    if cfg.reps is None or cfg.reps < 1:
        raise _Usage("simulate needs --reps >= 1")
    report = run_study(
        study=cfg.study,
        mechanism=cfg.mechanism,
        mean_fn=cfg.mean_fn,
        methods=cfg.methods,
        reps=cfg.reps,
        n=cfg.n or 500,
        seed=cfg.seed,
        n_jobs=cfg.threads,
        m_draws=cfg.draws,
        mh_config=MhConfig(burn_in=cfg.burn_in, keep=cfg.keep),
        da_config=DaConfig(burn_in=cfg.burn_in, keep=cfg.keep),
        level=cfg.level,
    )
    if cfg.output:
        rep_csv = os.path.splitext(cfg.output)[0] + ".reps.csv"
        report.write_rep_csv(rep_csv)
    diag = {"failed_reps": {m: r.failed_reps for m, r in report.methods.items()},
            "retries": {m: r.retries for m, r in report.methods.items()}}
    return ResultEnvelope(cfg, report.to_dict(), diag)


def cmd_panel(cfg: RunConfig) -> ResultEnvelope:
    pds = read_panel_csv(cfg.data)
    rng = RngHandle(cfg.seed)
    reset_floor_events()
    emitted = None
    if cfg.method == "bps":
        draws = panel_bps(pds, cfg.draws, rng)
        rows, diag, emitted = _posterior_results(draws, cfg.level, cfg.emit_draws)
    elif cfg.method == "obps":
        mh = MhConfig(burn_in=cfg.burn_in, keep=cfg.keep)
        draws, _ = panel_obps(pds, mh, rng)
        rows, diag, emitted = _posterior_results(draws, cfg.level, cfg.emit_draws)
    elif cfg.method == "fit":
        fit = panel_fit(pds)
        rows = [{"name": "theta", "estimate": fit.theta_hat, "interval": "none"}]
        diag = {"separation": fit.separation}
    else:
        raise _Usage("panel method must be bps, obps, or fit")
    diag["floor_events"] = floor_event_count()
    diag["waves"] = pds.waves
    return ResultEnvelope(cfg, {"parameters": rows}, diag, draws=emitted)


class _Usage(Exception):
    pass


def _write_envelope(env: ResultEnvelope, cfg: RunConfig) -> None:
    payload = env.to_dict()
    if cfg.format == "csv":
        import csv as _csv

        rows = payload["results"].get("parameters", [])
        target = open(cfg.output, "w", newline="", encoding="utf-8") if cfg.output else sys.stdout
        try:
            keys = sorted({k for r in rows for k in r})
            writer = _csv.DictWriter(target, fieldnames=keys)
            writer.writeheader()
            writer.writerows(rows)
        finally:
            if cfg.output:
                target.close()
        return
    text = json.dumps(payload, indent=2, default=float)
    if cfg.output:
        with open(cfg.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _load_config_defaults(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psbayes",
        description="Propensity-score inference under unit nonresponse",
    )
    parser.add_argument("--version", action="version", version=f"psbayes {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_seed=False):
        p.add_argument("--draws", type=int, help="posterior draw count (default 2000)")
        p.add_argument("--burn-in", type=int, dest="burn_in", help="MH/DA burn-in (default 2000)")
        p.add_argument("--keep", type=int, help="MH/DA kept iterations (default 2000)")
        p.add_argument("--seed", type=int, required=need_seed,
                       help="RNG seed" + ("" if need_seed else " (default 0)"))
        p.add_argument("--level", type=float, help="interval level (default 0.95)")
        p.add_argument("--output", help="envelope path (default stdout)")
        p.add_argument("--format", choices=("json", "csv"), help="output format (default json)")
        p.add_argument("--threads", type=int,
                       help="worker count (default: PSBAYES_THREADS or logical cores)")
        p.add_argument("--config", help="TOML file with defaults; flags win")
        p.add_argument("--emit-draws", action="store_true", dest="emit_draws",
                       help="include raw posterior draws in the envelope")
        p.add_argument("--chains", type=int,
                       help="independent MH chains pooled after burn-in (obps; default 1)")

    pe = sub.add_parser("estimate", help="run one estimator on a CSV dataset")
    pe.add_argument("--data", required=True, help="cross-sectional CSV (x1..xd, y, delta)")
    pe.add_argument("--method", required=True, help=f"one of {', '.join(ESTIMATE_METHODS)}")
    common(pe)

    ps_ = sub.add_parser("simulate", help="run a Monte Carlo study cell")
    ps_.add_argument("--study", type=int, required=True, choices=(1, 2))
    ps_.add_argument("--mechanism", required=True, help="R1..R4 (study 1) or R1/R2 (study 2)")
    ps_.add_argument("--mean", required=True, dest="mean_fn", choices=("m1", "m2", "m3"))
    ps_.add_argument("--methods", required=True,
                     help=f"comma-separated subset of {', '.join(METHODS)}")
    ps_.add_argument("--reps", type=int, required=True)
    ps_.add_argument("--n", type=int, help="sample size per replication (default 500)")
    common(ps_, need_seed=True)

    pp = sub.add_parser("panel", help="attrition-weighted final-wave inference")
    pp.add_argument("--data", required=True, help="long-format panel CSV (id, t, x1..xd, y, delta)")
    pp.add_argument("--method", required=True, help="bps, obps, or fit")
    common(pp)
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_defaults = _load_config_defaults(getattr(args, "config", None))

    def pick(name, default):
        v = getattr(args, name, None)
        if v is not None:
            return v
        return file_defaults.get(name.replace("_", "-"), file_defaults.get(name, default))

    threads = pick("threads", None)
    if threads is None:
        threads = int(os.environ.get("PSBAYES_THREADS", 0)) or (os.cpu_count() or 1)
    return RunConfig(
        command=args.command,
        method=getattr(args, "method", None),
        data=getattr(args, "data", None),
        study=getattr(args, "study", None),
        mechanism=getattr(args, "mechanism", None),
        mean_fn=getattr(args, "mean_fn", None),
        methods=[m.strip() for m in args.methods.split(",")] if getattr(args, "methods", None) else None,
        reps=getattr(args, "reps", None),
        n=pick("n", None),
        draws=int(pick("draws", 2000)),
        burn_in=int(pick("burn_in", 2000)),
        keep=int(pick("keep", 2000)),
        seed=int(pick("seed", 0)),
        level=float(pick("level", 0.95)),
        output=pick("output", None),
        format=pick("format", "json"),
        threads=int(threads),
        emit_draws=bool(getattr(args, "emit_draws", False)),
        chains=int(pick("chains", 1)),
    )


def main(argv: Optional[list] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        started = time.perf_counter()
        if args.command == "estimate":
            env = cmd_estimate(cfg)
        elif args.command == "simulate":
            env = cmd_simulate(cfg)
        else:
            env = cmd_panel(cfg)
        env.wall_time_s = time.perf_counter() - started
        _write_envelope(env, cfg)
        return 0
    except _Usage as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc), "exit_code": 2}),
              file=sys.stderr)
        return 2
    except ValueError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc), "exit_code": 2}),
              file=sys.stderr)
        return 2
    except errors.PsBayesError as exc:
        code = EXIT_CODES.get(type(exc))
        if code is None:  # fall back to the closest registered ancestor
            code = next((c for k, c in EXIT_CODES.items() if isinstance(exc, k)), 1)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
              file=sys.stderr)
        return code
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc), "exit_code": 16}),
              file=sys.stderr)
        return 16


if __name__ == "__main__":
    sys.exit(main())
