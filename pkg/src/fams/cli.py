"""Command-line experiment runner.

    fams <command> --config PATH [--seed N] [--repeats N] [--out DIR]
    fams compare REPORT.json REPORT.json ... [--format csv|md] [--out FILE]

Exit status: 0 on success, 2 for configuration errors, 3 for data errors and
4 for training or other runtime failures. ``FAMS_THREADS`` sets the number of
worker threads used for the per-subgroup solves.

Model-related modules are imported inside the commands that need them, so
``audit`` only loads the data and fairness-metric code.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .config import COMMANDS, ExperimentConfig, load_config
from .data import (
    SyntheticSpec,
    TabularSchema,
    adult_schema,
    generate_synthetic,
    load_tabular_splits,
    read_scores_csv,
)
from .errors import ConfigError, DataError, FamsError
from .fairness_metrics import (
    ScoredDataset,
    accuracy,
    calibration_curve,
    dp_gap,
    eo_gap,
    sufficiency_gap,
    tables_to_csv,
)
from .numerics import SeededRng

log = logging.getLogger("fams")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
# data streams live under their own tag so they never collide with trainer streams
DATA_STREAM = 9
METRIC_KEYS = ("accuracy", "sufficiency_gap", "dp_gap", "eo_gap")


# ------------------------------------------------------------------ helpers

def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return str(path)


def _signature_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.signature(), sort_keys=True).encode()).hexdigest()[:16]


def _threads() -> int:
    raw = os.environ.get("FAMS_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FAMS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"FAMS_THREADS must be a positive integer, got {raw!r}")
    return n


def load_data(cfg: ExperimentConfig, seed: int):
    """``(train, valid, test, bayes)``; ``bayes`` is ``None`` for tabular data."""
    kind = cfg.dataset_kind
    block = cfg.dataset[kind]
    rng = SeededRng(seed).child(DATA_STREAM)
    if kind == "synthetic":
        try:
            spec = SyntheticSpec(**block)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dataset.synthetic: {exc}") from None
        return generate_synthetic(spec, rng)
    if kind == "tabular":
        if block["format"] == "adult":
            schema = adult_schema()
        else:
            s = block["schema"]
            schema = TabularSchema(
                numeric=tuple(s.get("numeric", ())), categorical=tuple(s.get("categorical", ())),
                label=s["label"], positive_label=str(s["positive_label"]), sensitive=s["sensitive"],
                columns=tuple(s["columns"]) if s.get("columns") else None)
        train, valid, test, _ = load_tabular_splits(
            block["train_path"], schema, test_path=block.get("test_path"),
            train_per_group=block.get("train_per_group"), valid_per_group=block.get("valid_per_group"),
            test_per_group=block.get("test_per_group"), rng=rng)
        return train, valid, test, None
    raise ConfigError(f"dataset.{kind}: the '{cfg.command}' command needs a synthetic or tabular dataset")


def bilevel_config(cfg: ExperimentConfig, seed: int, input_dim: int, n_groups: int):
    from .stochastic_net import MlpTopology
    from .trainers import BilevelConfig

    tr = dict(cfg.trainer)
    topo = tr.pop("topology", None)
    if topo is None:
        sizes = (input_dim,) + BilevelConfig().topology.layer_sizes[1:]
        topology = MlpTopology(sizes)
    else:
        sizes = topo.get("layer_sizes") or [input_dim, *topo["hidden"], 1]
        if sizes[0] != input_dim:
            raise ConfigError(f"trainer.topology.layer_sizes: input size {sizes[0]} does not match "
                              f"the {input_dim} data features")
        try:
            topology = MlpTopology(tuple(int(s) for s in sizes), topo.get("activation", "relu"))
        except ValueError as exc:
            raise ConfigError(f"trainer.topology: {exc}") from None
    tr.setdefault("subgroups_per_round", min(BilevelConfig.subgroups_per_round, n_groups))
    tr.setdefault("bins", cfg.metrics["bins"])
    try:
        bc = BilevelConfig(**tr, seed=seed, topology=topology, workers=_threads())
    except TypeError as exc:
        raise ConfigError(f"trainer: {exc}") from None
    return bc.validate(n_groups)


def evaluate_scores(scored: ScoredDataset, metrics: dict) -> tuple[dict, list]:
    """Metric record plus the calibration tables (global first)."""
    rep = sufficiency_gap(scored, metrics["bins"], metrics["weighting"])
    rec = {
        "accuracy": accuracy(scored.scores, scored.labels),
        "sufficiency_gap": rep.overall_gap,
        "per_group_gap": {str(k): v for k, v in rep.per_group_gap.items()},
        "dp_gap": dp_gap(scored),
        "eo_gap": eo_gap(scored),
    }
    tables = [rep.tables[None]] + [rep.tables[g] for g in scored.group_ids]
    return rec, tables


def aggregate(records: list[dict]) -> dict:
    """Mean and population std of every scalar metric over repeats."""
    out = {}
    for k in METRIC_KEYS:
        vals = np.array([r[k] for r in records], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def _write_calibration(out: Path, tables) -> dict:
    return {
        "calibration_global": _write(out / "calibration_global.csv", tables_to_csv(tables[:1])),
        "calibration_groups": _write(out / "calibration_groups.csv", tables_to_csv(tables[1:])),
    }


def _base_report(cfg: ExperimentConfig) -> dict:
    return {
        "command": cfg.command,
        "method": cfg.method,
        "config": cfg.to_dict(),
        "dataset_signature": _signature_hash(cfg),
    }


def _finish(cfg: ExperimentConfig, out: Path, report: dict, timing: dict) -> dict:
    _write(out / "config.yaml", yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    _write(out / "report.json", _dump_json(report))
    _write(out / "timing.json", _dump_json(timing))
    return report


def _rel(out: Path, name: str) -> str:
    return Path(os.path.relpath(name, out)).as_posix()


# ----------------------------------------------------------------- commands

def cmd_train(cfg: ExperimentConfig, out: Path, evaluate_only: bool = False) -> dict:
    from .stochastic_net import load_dist, save_dist
    from .trainers import TrainedPredictor, history_to_csv, train

    records, timing, history_csv = [], [], []
    model = None
    if evaluate_only:
        model = load_dist(cfg.evaluate["model"]) if cfg.evaluate else None
        if model is None:
            raise ConfigError("evaluate.model: required for the evaluate command")
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        t0 = time.perf_counter()
        tr, va, te, _ = load_data(cfg, seed)
        bc = bilevel_config(cfg, seed, tr[0].features.shape[1], len(tr))
        if evaluate_only:
            pred = TrainedPredictor(cfg.method, model, [], bc)
        else:
            pred = train(cfg.method, bc, tr, va)
        rec, tables = evaluate_scores(pred.score(te), cfg.metrics)
        sub = out / f"repeat_{r:02d}"
        files = _write_calibration(sub, tables)
        if not evaluate_only:
            save_dist(pred.dist, sub / "model.json")
            files["model"] = str(sub / "model.json")
            if pred.history:
                history_csv.append(history_to_csv(pred.history, {"repeat": r, "seed": seed}))
        rec = {"repeat": r, "seed": seed, **rec,
               "files": {k: _rel(out, v) for k, v in files.items()}}
        records.append(rec)
        timing.append(time.perf_counter() - t0)
        log.info("repeat %d: accuracy %.4f, sufficiency gap %.4f", r, rec["accuracy"], rec["sufficiency_gap"])
    report = _base_report(cfg)
    if history_csv:
        header, *_ = history_csv[0].splitlines()
        body = [line for text in history_csv for line in text.splitlines()[1:]]
        _write(out / "history.csv", "\n".join([header, *body]) + "\n")
        report["history"] = "history.csv"
    report["repeats"] = records
    report["aggregate"] = aggregate(records)
    return _finish(cfg, out, report, {"repeat_seconds": timing, "total_seconds": sum(timing)})


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    from .bounds import lambda_sweep, sweep_to_csv

    if not cfg.sweep:
        raise ConfigError("sweep.lambdas: required for the sweep command")
    t0 = time.perf_counter()
    tr, va, te, _ = load_data(cfg, cfg.seed)
    bc = bilevel_config(cfg, cfg.seed, tr[0].features.shape[1], len(tr))
    seeds = [cfg.seed + r for r in range(cfg.repeats)]
    rows = lambda_sweep(bc, cfg.sweep["lambdas"], tr, va, te, seeds)
    _write(out / "sweep.csv", sweep_to_csv(rows))
    report = _base_report(cfg)
    report["sweep"] = [{"lambda": r.lam, "acc_mean": r.acc_mean, "acc_std": r.acc_std,
                        "gap_mean": r.gap_mean, "gap_std": r.gap_std, "seeds": list(r.seeds)}
                       for r in rows]
    report["table"] = "sweep.csv"
    return _finish(cfg, out, report, {"total_seconds": time.perf_counter() - t0})


def cmd_verify_bounds(cfg: ExperimentConfig, out: Path) -> dict:
    from .bounds import check_theorem1, corollary1_optimization_term, theorem2_bound
    from .trainers import fit_posteriors, train

    b = cfg.bounds
    records, timing = [], []
    for r in range(cfg.repeats):
        seed = cfg.seed + r
        t0 = time.perf_counter()
        tr, va, te, bayes = load_data(cfg, seed)
        bc = bilevel_config(cfg, seed, tr[0].features.shape[1], len(tr))
        pred = train(cfg.method, bc, tr, va)
        rng = SeededRng(seed).child(DATA_STREAM, 1)
        rec: dict = {"repeat": r, "seed": seed}
        if bayes is not None:
            fresh = bayes.sample(b.get("oracle_samples_per_group", 2000), rng.child(0))
            t1 = check_theorem1(pred, fresh, bayes, cfg.metrics["bins"], b.get("tolerance", 0.03))
            rec["gap_bound"] = {k: getattr(t1, k) for k in
                               ("theorem1_lhs", "theorem1_rhs", "theorem1_tolerance", "theorem1_holds")}
        else:
            rec["gap_bound"] = None
            rec["gap_bound_note"] = "no Bayes oracle for tabular data"
        if cfg.method == "fams":
            posts = fit_posteriors(pred.dist, tr, bc)
            t2 = theorem2_bound(pred.dist, posts, tr, te, b.get("L"), b.get("delta", 0.05),
                                b.get("mc_samples", bc.mc_samples), rng.child(1))
            t2.corollary1_opt_term = corollary1_optimization_term(pred.dist, posts)
            rec["generalization_bound"] = {k: v for k, v in t2.to_dict().items() if not k.startswith("theorem1")}
        else:
            rec["generalization_bound"] = None
            rec["generalization_bound_note"] = "needs a weight distribution and subgroup posteriors (method fams)"
        _write(out / f"repeat_{r:02d}" / "bounds.json", _dump_json(rec))
        records.append(rec)
        timing.append(time.perf_counter() - t0)
    _write(out / "bounds.json", _dump_json(records))
    report = _base_report(cfg)
    report["bounds"] = "bounds.json"
    report["repeats"] = records
    t1_ok = [x["gap_bound"]["theorem1_holds"] for x in records if x["gap_bound"]]
    t2_ok = [x["generalization_bound"]["t2_holds"] for x in records if x["generalization_bound"]]
    report["summary"] = {"gap_bound_holds": sum(t1_ok), "gap_bound_checked": len(t1_ok),
                         "generalization_bound_holds": sum(t2_ok),
                         "generalization_bound_checked": len(t2_ok)}
    return _finish(cfg, out, report, {"repeat_seconds": timing, "total_seconds": sum(timing)})


def cmd_audit(cfg: ExperimentConfig, out: Path) -> dict:
    if cfg.dataset_kind != "scores":
        raise ConfigError("dataset.scores: the audit command reads precomputed scores")
    block = cfg.dataset["scores"]
    t0 = time.perf_counter()
    s, y, g = read_scores_csv(block["path"], block.get("score_column", "score"),
                              block.get("label_column", "label"), block.get("group_column", "group"))
    scored = ScoredDataset(s, y, g)
    rep = sufficiency_gap(scored, cfg.metrics["bins"], cfg.metrics["weighting"])
    tables = [calibration_curve(scored, cfg.metrics["bins"])] + [rep.tables[k] for k in scored.group_ids]
    report = _base_report(cfg)
    report["method"] = None
    report["sufficiency"] = rep.to_dict()
    report["dp_gap"] = dp_gap(scored)
    report["eo_gap"] = eo_gap(scored)
    report["accuracy"] = accuracy(s, y)
    report["files"] = {k: _rel(out, v) for k, v in _write_calibration(out, tables).items()}
    return _finish(cfg, out, report, {"total_seconds": time.perf_counter() - t0})


def compare(report_paths, fmt: str = "csv") -> str:
    """Method-by-metric table of several reports over the same dataset."""
    if len(report_paths) < 2:
        raise ConfigError("compare needs at least two reports")
    reports = []
    for p in report_paths:
        try:
            reports.append(json.loads(Path(p).read_text(encoding="utf-8")))
        except OSError as exc:
            raise DataError(f"cannot read report {p}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: not a JSON report ({exc})") from None
    sigs = {r.get("dataset_signature") for r in reports}
    if len(sigs) != 1:
        raise DataError("reports were computed on different datasets or metric settings")
    rows = []
    for p, r in zip(report_paths, reports):
        if "aggregate" not in r:
            raise DataError(f"{p}: has no aggregate metrics (train or evaluate reports only)")
        a = r["aggregate"]
        rows.append([r["method"], len(r["repeats"]), a["accuracy"]["mean"], a["accuracy"]["std"],
                     a["sufficiency_gap"]["mean"], a["sufficiency_gap"]["std"]])
    header = ["method", "repeats", "acc_mean", "acc_std", "gap_mean", "gap_std"]
    if fmt == "md":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for row in rows:
            lines.append("| " + " | ".join([row[0], str(row[1])] + [f"{v:.4f}" for v in row[2:]]) + " |")
        return "\n".join(lines) + "\n"
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([row[0], str(row[1])] + [repr(float(v)) for v in row[2:]]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fams", description="Fair multi-subgroup learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", required=True, help="YAML experiment config")
        c.add_argument("--seed", type=int, help="override the base seed")
        c.add_argument("--repeats", type=int, help="override the number of repeats")
        c.add_argument("--out", help="override the output directory")
    c = sub.add_parser("compare", help="tabulate several report.json files")
    c.add_argument("reports", nargs="+")
    c.add_argument("--format", choices=("csv", "md"), default="csv")
    c.add_argument("--out", help="write the table here instead of stdout")
    return p


def run(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.command in ("train", "evaluate"):
        return cmd_train(cfg, out, evaluate_only=cfg.command == "evaluate")
    if cfg.command == "sweep":
        return cmd_sweep(cfg, out)
    if cfg.command == "verify-bounds":
        return cmd_verify_bounds(cfg, out)
    return cmd_audit(cfg, out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            table = compare(args.reports, args.format)
            if args.out:
                Path(args.out).write_text(table, encoding="utf-8")
            else:
                sys.stdout.write(table)
            return EXIT_OK
        cfg = load_config(args.config)
        cfg.command = args.command
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed: must be >= 0")
            cfg.seed = args.seed
        if args.repeats is not None:
            if args.repeats < 1:
                raise ConfigError("--repeats: must be >= 1")
            cfg.repeats = args.repeats
        if args.out:
            cfg.output_dir = args.out
        report = run(cfg)
        print(f"wrote {Path(cfg.output_dir) / 'report.json'}")
        if "aggregate" in report:
            a = report["aggregate"]
            print(f"accuracy {a['accuracy']['mean']:.4f} +- {a['accuracy']['std']:.4f}, "
                  f"sufficiency gap {a['sufficiency_gap']['mean']:.4f} +- {a['sufficiency_gap']['std']:.4f}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FamsError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
