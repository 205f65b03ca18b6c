"""Experiment orchestration CLI.

Subcommands: ``run`` (one dynamics run + metrics CSV), ``sweep`` (one child
run per parameter value with a joined summary), ``compare-dynamics`` (the
coupling decomposition tables), ``verify`` (fast invariant suite).

Config files are flat INI-style key-value sections, which keeps sweep specs
diff-friendly.  Exit codes: 0 success, 1 verify failure, 2 invalid config,
3 divergence abort.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import datetime
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, applications, metrics, verify
from .dynamics import (
    DivergenceError,
    DynConfig,
    couple_dynamics,
    run_ctpgda,
    run_pgda,
    run_sgda,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

RUNNERS = {"sgda": run_sgda, "pgda": run_pgda, "ctpgda": run_ctpgda}

METRIC_NAMES = (
    "potential_v",
    "primal_j",
    "fenchel_gap",
    "stationarity",
    "l2_error_fstar",
    "deviation_primal",
    "deviation_dual",
)


class ConfigError(ValueError):
    def __init__(self, fieldname, message):
        super().__init__(f"config field [{fieldname}]: {message}")
        self.fieldname = fieldname


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("FCME_OUT", "runs"))


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError("file", f"cannot read config {path}")
    cfg = {s: dict(parser.items(s)) for s in parser.sections()}
    if "problem" not in cfg:
        raise ConfigError("problem", "missing [problem] section")
    if "dynamics" not in cfg:
        raise ConfigError("dynamics", "missing [dynamics] section")
    return cfg


def _get(section, key, cast, default=None, fieldname=None):
    fieldname = fieldname or key
    raw = section.get(key)
    if raw is None or str(raw).strip() in ("", "auto", "none"):
        return default
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(fieldname, f"cannot parse {raw!r}: {exc}") from exc


def _bool(raw) -> bool:
    val = str(raw).strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def build_problem(cfg: dict, seed_override=None):
    sect = dict(cfg["problem"])
    app = sect.pop("application", None)
    if app is None:
        raise ConfigError("problem.application", "missing")
    if app not in applications.APPLICATIONS:
        raise ConfigError(
            "problem.application",
            f"unknown {app!r}; expected one of {applications.APPLICATIONS}",
        )
    if seed_override is not None:
        sect["seed"] = str(seed_override)
    lam = _get(sect, "lambda", float, 0.05, "problem.lambda")
    if lam is None or lam < 0:
        raise ConfigError("problem.lambda", "must be >= 0")
    sect["lambda"] = lam
    try:
        return applications.from_config(app, sect)
    except (ValueError, KeyError) as exc:
        raise ConfigError("problem", str(exc)) from exc


def build_dynconfig(cfg: dict, seed_override=None) -> DynConfig:
    sect = cfg["dynamics"]
    kwargs = dict(
        alpha=_get(sect, "alpha", float, 4.0, "dynamics.alpha"),
        n_primal=_get(sect, "n_primal", int, 256, "dynamics.n_primal"),
        n_dual=_get(sect, "n_dual", int, 256, "dynamics.n_dual"),
        steps=_get(sect, "steps", int, 10_000, "dynamics.steps"),
        eta=_get(sect, "eta", float, None, "dynamics.eta"),
        eps=_get(sect, "eps", float, None, "dynamics.eps"),
        batch=_get(sect, "batch", int, 1, "dynamics.batch"),
        integrator=sect.get("integrator", "euler"),
        substeps=_get(sect, "substeps", int, 1, "dynamics.substeps"),
        seed=_get(sect, "seed", int, 0, "dynamics.seed"),
        checkpoint_every=_get(sect, "checkpoint_every", int, None, "dynamics.checkpoint_every"),
        n_checkpoints=_get(sect, "n_checkpoints", int, 100, "dynamics.n_checkpoints"),
        antithetic=_get(sect, "antithetic", _bool, True, "dynamics.antithetic"),
        freeze_primal=_get(sect, "freeze_primal", _bool, False, "dynamics.freeze_primal"),
        freeze_dual=_get(sect, "freeze_dual", _bool, False, "dynamics.freeze_dual"),
    )
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return DynConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError("dynamics", str(exc)) from exc


def _method(cfg) -> str:
    method = cfg["dynamics"].get("method", "sgda")
    if method not in RUNNERS:
        raise ConfigError("dynamics.method", f"unknown {method!r}")
    return method


# ---------------------------------------------------------------------------
# metric evaluation over a trajectory
# ---------------------------------------------------------------------------


def _metric_seed(run_seed, metric_idx, ckpt_idx):
    return np.random.SeedSequence(
        entropy=run_seed, spawn_key=(3, metric_idx, ckpt_idx)
    )


def compute_metrics(problem, gt, traj, names, eval_batch, run_seed):
    """MetricRecord rows for every checkpoint; per-metric seed streams are
    split by counter so adding a metric never perturbs the others."""
    for name in names:
        if name not in METRIC_NAMES:
            raise ConfigError("metrics.names", f"unknown metric {name!r}")
    records = []
    for m_idx, name in enumerate(names):
        if name.startswith("deviation_"):
            which = name.split("_", 1)[1]
            for t, val in metrics.deviation_from_init(traj, which):
                records.append(metrics.MetricRecord(name, t, val))
            continue
        for c_idx, ck in enumerate(traj.checkpoints):
            seed = _metric_seed(run_seed, m_idx, c_idx)
            if name == "potential_v":
                est = metrics.potential_v(problem, gt, ck.primal, ck.dual, eval_batch, seed)
                records.append(metrics.MetricRecord(name, ck.t, est.value, est.stderr))
            elif name == "primal_j":
                est = metrics.primal_j(problem, gt, ck.primal, eval_batch, seed)
                records.append(metrics.MetricRecord(name, ck.t, est.value, est.stderr))
            elif name == "fenchel_gap":
                est = metrics.fenchel_gap(problem, gt, ck.primal, ck.dual, eval_batch, seed)
                records.append(metrics.MetricRecord(name, ck.t, est.value, est.stderr))
            elif name == "l2_error_fstar":
                est = metrics.target_l2_error(problem, gt.f_star, ck.primal, eval_batch, seed)
                records.append(metrics.MetricRecord(name, ck.t, est.value, est.stderr))
            elif name == "stationarity":
                res = metrics.stationarity_residual(
                    problem, ck.primal, ck.dual, min(eval_batch, 5000), seed
                )
                records.append(
                    metrics.MetricRecord("stationarity_primal", ck.t, res.primal, res.primal_se)
                )
                records.append(
                    metrics.MetricRecord("stationarity_dual", ck.t, res.dual, res.dual_se)
                )
    return records


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


def _unique_dir(root: Path, base: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    cand = root / base
    idx = 1
    while cand.exists():
        idx += 1
        cand = root / f"{base}-{idx}"
    cand.mkdir()
    return cand


def _write_metrics_csv(path, run_id, traj, records):
    by_t = {round(c.t, 12): c.k for c in traj.checkpoints}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "iteration", "t", "metric", "value", "stderr"])
        for rec in records:
            k = by_t.get(round(rec.t, 12), "")
            writer.writerow(
                [
                    run_id,
                    k,
                    repr(rec.t),
                    rec.name,
                    repr(rec.value),
                    "" if rec.aux is None else repr(rec.aux),
                ]
            )


def _write_manifest(run_dir, run_id, cfg, dyn, method, seed, status, t0, t1):
    resolved = asdict(dyn)
    resolved["eta_resolved"] = dyn.eta_resolved
    resolved["eps_primal_resolved"] = dyn.eps_primal
    resolved["eps_dual_resolved"] = dyn.eps_dual
    manifest = {
        "run_id": run_id,
        "version": __version__,
        "method": method,
        "seed": seed,
        "config": cfg,
        "dynamics_resolved": resolved,
        "started": t0,
        "finished": t1,
        "status": status,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def execute_run(cfg, out_root: Path, run_name, seed_override=None):
    """One dynamics run end to end; returns (run_dir, trajectory, records)."""
    problem, gt = build_problem(cfg, seed_override=None)
    dyn = build_dynconfig(cfg, seed_override)
    method = _method(cfg)
    msect = cfg.get("metrics", {})
    names = [
        s.strip()
        for s in msect.get("names", "potential_v, primal_j").split(",")
        if s.strip()
    ]
    eval_batch = _get(msect, "eval_batch", int, 20_000, "metrics.eval_batch")

    run_dir = _unique_dir(out_root, f"{run_name}-s{dyn.seed}")
    run_id = run_dir.name
    t0 = datetime.datetime.now().isoformat()
    try:
        traj = RUNNERS[method](problem, dyn)
    except DivergenceError as exc:
        _write_manifest(
            run_dir, run_id, cfg, dyn, method, dyn.seed,
            f"diverged at iteration {exc.iteration}", t0,
            datetime.datetime.now().isoformat(),
        )
        raise
    records = compute_metrics(problem, gt, traj, names, eval_batch, dyn.seed)
    traj.metrics = records
    _write_metrics_csv(run_dir / "metrics.csv", run_id, traj, records)
    (run_dir / "final_primal.json").write_text(traj.final.primal.to_json())
    (run_dir / "final_dual.json").write_text(traj.final.dual.to_json())
    np.savez_compressed(
        run_dir / "checkpoints.npz",
        iterations=np.array([c.k for c in traj.checkpoints]),
        times=np.array([c.t for c in traj.checkpoints]),
        primal=np.stack([c.primal.particles for c in traj.checkpoints]),
        dual=np.stack([c.dual.particles for c in traj.checkpoints]),
    )
    _write_manifest(
        run_dir, run_id, cfg, dyn, method, dyn.seed, "ok", t0,
        datetime.datetime.now().isoformat(),
    )
    return run_dir, traj, records


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        run_dir, traj, _ = execute_run(
            cfg, _out_root(args), Path(args.config).stem, args.seed
        )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"run complete: {run_dir} ({len(traj.checkpoints)} checkpoints)")
    return EXIT_OK


def _apply_override(cfg, param, value):
    if "." in param:
        section, key = param.split(".", 1)
    else:
        section = next(
            (s for s in ("dynamics", "problem", "metrics") if param in cfg.get(s, {})),
            None,
        )
        if section is None:
            raise ConfigError(param, "swept parameter not present in config")
        key = param
    if section not in cfg or key not in cfg[section]:
        raise ConfigError(f"{section}.{key}", "swept parameter not present in config")
    out = {s: dict(v) for s, v in cfg.items()}
    out[section][key] = value
    return out


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        print("error: empty sweep value list", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        base_seed = build_dynconfig(cfg, args.seed).seed
        children = [
            (v, _apply_override(cfg, args.param, v), base_seed + i)
            for i, v in enumerate(values)
        ]
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    sweep_dir = _unique_dir(_out_root(args), f"{Path(args.config).stem}-sweep-{args.param.replace('.', '-')}")
    rows = []
    status = EXIT_OK
    for value, child_cfg, child_seed in children:
        try:
            run_dir, traj, records = execute_run(
                child_cfg, sweep_dir, f"{args.param.split('.')[-1]}-{value}", child_seed
            )
        except (ConfigError, DivergenceError) as exc:
            print(f"error in child {args.param}={value}: {exc}", file=sys.stderr)
            status = EXIT_DIVERGED if isinstance(exc, DivergenceError) else EXIT_CONFIG
            continue
        summary = {"param": args.param, "value": value, "run_id": run_dir.name}
        by_name = {}
        for rec in records:
            by_name.setdefault(rec.name, []).append(rec.value)
        for name, vals in sorted(by_name.items()):
            summary[f"final_{name}"] = vals[-1]
            summary[f"min_{name}"] = min(vals)
            summary[f"max_{name}"] = max(vals)
        rows.append(summary)

    if rows:
        cols = sorted({k for row in rows for k in row}, key=lambda c: (c != "param", c != "value", c))
        with open(sweep_dir / "summary.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(rows)
    print(f"sweep complete: {sweep_dir} ({len(rows)}/{len(children)} children ok)")
    return status


def cmd_compare(args) -> int:
    try:
        cfg = load_config(args.config)
        if "compare" not in cfg:
            raise ConfigError("compare", "missing [compare] section")
        sect = cfg["compare"]
        widths_raw = sect.get("widths")
        if not widths_raw:
            raise ConfigError("compare.widths", "missing widths list")
        widths = [int(w) for w in widths_raw.split(",") if w.strip()]
        n_ref = _get(sect, "n_ref", int, None, "compare.n_ref")
        if n_ref is None:
            raise ConfigError("compare.n_ref", "missing")
        t_total = _get(sect, "t_total", float, None, "compare.t_total")
        batch = _get(sect, "batch", int, 128, "compare.batch")
        problem, _gt = build_problem(cfg)
        dyn = build_dynconfig(cfg, args.seed)
        dyn = DynConfig(
            **{**asdict(dyn), "batch": batch}
        )
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    report = couple_dynamics(problem, dyn, widths, n_ref, t_total=t_total)
    out_dir = _unique_dir(_out_root(args), f"{Path(args.config).stem}-compare")
    fields = [
        "width", "eps", "k", "t",
        "gap_ip_ctpgda", "gap_ctpgda_pgda", "gap_pgda_sgda", "weak_error_vs_ref",
    ]
    for width in report.widths:
        with open(out_dir / f"gaps_w{width}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for rec in report.rows_for(width):
                writer.writerow([repr(getattr(rec, f)) for f in fields])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields + ["log2_width", "log2_weak_error"])
        for rec in report.finals():
            writer.writerow(
                [repr(getattr(rec, f)) for f in fields]
                + [
                    repr(float(np.log2(rec.width))),
                    repr(float(np.log2(max(rec.weak_error_vs_ref, 1e-300)))),
                ]
            )
    print(f"comparison complete: {out_dir}")
    return EXIT_OK


def cmd_verify(_args) -> int:
    results = verify.run_all()
    print(verify.format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fcme",
        description="Mean-field descent-ascent for functional conditional moment equations",
    )
    parser.add_argument("--out", help="output root (default: $FCME_OUT or ./runs)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--workers", type=int, default=1, help="parallel sweep children")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured dynamics run")
    p_run.add_argument("config")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="one child run per parameter value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True)
    p_sweep.add_argument("--values", required=True)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_cmp = sub.add_parser("compare-dynamics", help="coupled-dynamics decomposition")
    p_cmp.add_argument("config")
    p_cmp.set_defaults(fn=cmd_compare)

    p_ver = sub.add_parser("verify", help="fast invariant suite")
    p_ver.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
