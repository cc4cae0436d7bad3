"""Command-line experiment runner.

    dprobfl run CONFIG [--out DIR]
    dprobfl sweep GRID [--out DIR]
    dprobfl account CONFIG
    dprobfl kappa CONFIG

Exit codes: 0 success, 1 runtime failure (partial outputs keep a ``.partial``
suffix), 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import yaml

from . import accountant, config
from .aggregators import RULES, AggregatorSpec, empirical_kappa, robust_compat_check
from .fedsim import TrainingAborted, setup_users, train
from .sketch import CountSketch, spectral_norm_sq
from .tensor import make_rng

log = logging.getLogger("dprobfl")

METRIC_COLUMNS = ("round", "train_loss", "eval_accuracy", "uplink_floats_per_user", "epsilon_dp")
WORKERS_ENV = "DPROBFL_WORKERS"
MANIFEST_VERSION = 1

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def code_version() -> str:
    try:
        return version("dprobfl")
    except PackageNotFoundError:
        return "unknown"


# -- persistence ------------------------------------------------------------


def write_atomic(path: Path, text: str, *, commit: bool = True) -> Path:
    """Write ``text`` to ``path.partial`` and, if ``commit``, rename it over ``path``."""
    path = Path(path)
    partial = path.with_name(path.name + ".partial")
    partial.write_text(text)
    if not commit:
        return partial
    os.replace(partial, path)
    return path


def format_metrics(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            {
                "round": int(r["round"]),
                "train_loss": float(r["train_loss"]),
                "eval_accuracy": float(r["eval_accuracy"]),
                "uplink_floats_per_user": int(r["uplink_floats_per_user"]),
                "epsilon_dp": float(r["epsilon_dp"]),
            }
            for r in reader
        ]


def privacy_report(cfg: config.RunConfig, q: float) -> dict:
    t = cfg.train
    if t.noise_multiplier == 0 or t.local_steps > 1:
        eps, alpha = float("inf"), None
    else:
        eps, alpha = accountant.epsilon_for(t.noise_multiplier, q, t.rounds, t.delta)
    sensitivity = 2 * t.clip_norm / t.batch_size
    return {
        "noise_multiplier": t.noise_multiplier,
        "sensitivity": sensitivity,
        "noise_std": t.noise_multiplier * sensitivity,
        "sampling_rate": q,
        "rounds": t.rounds,
        "delta": t.delta,
        "epsilon_dp": eps,
        "best_order": alpha,
    }


# -- run --------------------------------------------------------------------


def execute(cfg: config.RunConfig, out_dir: Path) -> dict:
    """Train one configuration and write ``metrics.csv`` and ``manifest.json`` into ``out_dir``.

    Raises ``TrainingAborted`` after writing ``.partial`` outputs if training fails.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}
    start = time.perf_counter()
    train_data, eval_data = config.load_datasets(cfg)
    timings["data_s"] = time.perf_counter() - start
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "code_version": code_version(),
        "config": cfg.resolved,
        "notes": [],
    }
    if cfg.train.aggregator.rule == "trimmed_mean" and cfg.train.aggregator.b == 0:
        manifest["notes"].append("plain mean aggregation (trimmed mean with b=0), i.e. FedAvg with one local step")
    t0 = time.perf_counter()
    try:
        result = train(cfg.train, train_data, eval_data)
    except TrainingAborted as exc:
        partial = exc.partial
        manifest.update(status="aborted", error=str(exc), rounds_completed=len(partial.transcripts))
        write_atomic(out_dir / "metrics.csv", format_metrics(partial.metric_rows), commit=False)
        write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True), commit=False)
        raise
    timings["train_s"] = time.perf_counter() - t0
    timings["total_s"] = time.perf_counter() - start
    rows = result.metric_rows
    manifest.update(
        status="ok",
        notes=manifest["notes"] + result.notes,
        timings=timings,
        k=result.k,
        d=result.d,
        final_metrics=rows[-1] if rows else None,
        privacy=privacy_report(cfg, result.sampling_rate),
    )
    write_atomic(out_dir / "metrics.csv", format_metrics(rows))
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _default_out(source: str, suffix: str) -> Path:
    src = Path(source)
    return src.with_name(f"{src.stem}-{suffix}")


def cmd_run(args) -> int:
    try:
        cfg = config.load(args.config)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output_dir or _default_out(args.config, "run"))
    try:
        manifest = execute(cfg, out)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, OSError, ValueError) as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    final = manifest["final_metrics"] or {}
    print(f"wrote {out}; final accuracy {final.get('eval_accuracy')}, epsilon {manifest['privacy']['epsilon_dp']:.4g}")
    return EXIT_OK


# -- sweep ------------------------------------------------------------------

GRID_AXES = ("attack", "aggregator", "compression_rate", "noise_multiplier", "seed")


def _cell_name(cell: dict) -> str:
    atk = cell["attack"]
    agg = cell["aggregator"]
    parts = [atk["kind"]] + [f"{k}{v}" for k, v in sorted(atk.get("params", {}).items())]
    rule = agg["rule"] + ("-nnm" if agg.get("nnm") else "") + (f"-b{agg['b']}" if agg.get("b") is not None else "")
    return "_".join(parts) + f"__{rule}__rate{cell['compression_rate']:g}__nm{cell['noise_multiplier']:g}__seed{cell['seed']}"


def expand_grid(doc: dict, base: dict) -> list[dict]:
    """Cross product of each grid block's axes; missing axes default to the base config."""
    blocks = doc["grid"] if isinstance(doc["grid"], list) else [doc["grid"]]
    cells = []
    for block in blocks:
        unknown = set(block) - set(GRID_AXES)
        if unknown:
            raise config.ConfigError(f"unknown grid axes {sorted(unknown)}")
        axes = {
            "attack": block.get("attack", [base["attack"]]),
            "aggregator": block.get("aggregator", [base["aggregator"]]),
            "compression_rate": block.get("compression_rate", [base["train"]["compression_rate"]]),
            "noise_multiplier": block.get("noise_multiplier", [base["train"]["noise_multiplier"]]),
            "seed": block.get("seed", [base["train"]["seed"]]),
        }
        for values in itertools.product(*(axes[a] for a in GRID_AXES)):
            cells.append(dict(zip(GRID_AXES, values)))
    return cells


def cell_config(base: dict, cell: dict) -> dict:
    attack = {"kind": "none", "params": {}}
    attack.update(cell["attack"])
    aggregator = {"b": None, "nnm": False, "krum_neighbours": None}
    aggregator.update(cell["aggregator"])
    return config.with_overrides(
        base,
        {
            "attack": attack,
            "aggregator": aggregator,
            "train": {
                "compression_rate": cell["compression_rate"],
                "noise_multiplier": cell["noise_multiplier"],
                "seed": cell["seed"],
            },
        },
    )


def _run_cell(args):
    resolved, source, out_dir = args
    try:
        cfg = config.from_dict(resolved, source)
        manifest = execute(cfg, Path(out_dir))
        return {"status": "ok", "final": manifest["final_metrics"], "k": manifest["k"], "epsilon": manifest["privacy"]["epsilon_dp"]}
    except Exception as exc:  # one failing cell must not stop the sweep
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def summarize(cells: list[dict], results: list[dict]) -> list[dict]:
    """Mean and sample std of final accuracy over seeds, per non-seed cell key."""
    groups = {}
    for cell, res in zip(cells, results):
        key = _cell_name(dict(cell, seed="*"))
        groups.setdefault(key, {"cell": cell, "acc": [], "failed": 0, "k": set()})
        if res["status"] == "ok" and res["final"] is not None:
            groups[key]["acc"].append(res["final"]["eval_accuracy"])
            groups[key]["k"].add(res["k"])
        else:
            groups[key]["failed"] += 1
    rows = []
    for key, g in groups.items():
        acc = g["acc"]
        cell = g["cell"]
        rows.append(
            {
                "cell": key,
                "attack": json.dumps(cell["attack"], sort_keys=True),
                "aggregator": json.dumps(cell["aggregator"], sort_keys=True),
                "compression_rate": cell["compression_rate"],
                "noise_multiplier": cell["noise_multiplier"],
                "seeds": len(acc),
                "failed": g["failed"],
                "k": ";".join(str(k) for k in sorted(g["k"])),
                "accuracy_mean": statistics.fmean(acc) if acc else float("nan"),
                "accuracy_std": statistics.stdev(acc) if len(acc) > 1 else 0.0,
            }
        )
    return rows


SUMMARY_COLUMNS = (
    "cell",
    "attack",
    "aggregator",
    "compression_rate",
    "noise_multiplier",
    "seeds",
    "failed",
    "k",
    "accuracy_mean",
    "accuracy_std",
)


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["accuracy_mean"] = float(r["accuracy_mean"])
        r["accuracy_std"] = float(r["accuracy_std"])
        r["seeds"] = int(r["seeds"])
        r["failed"] = int(r["failed"])
        r["attack"] = json.loads(r["attack"])
        r["aggregator"] = json.loads(r["aggregator"])
        r["compression_rate"] = float(r["compression_rate"])
        r["noise_multiplier"] = float(r["noise_multiplier"])
    return rows


def load_grid(path):
    """Parse a grid file: ``base`` (a run config mapping or a path to one) plus ``grid`` axes."""
    path = Path(path)
    try:
        doc = config.read_yaml(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise config.ConfigError(f"{path}: cannot read grid: {exc}") from None
    if not isinstance(doc, dict) or "grid" not in doc or "base" not in doc:
        raise config.ConfigError(f"{path}:1: grid file needs 'base' and 'grid'")
    extra = set(doc) - {"schema_version", "base", "grid", "output"}
    if extra:
        raise config.ConfigError(f"{path}:1: unknown grid keys {sorted(extra)}")
    if isinstance(doc["base"], str):
        base_cfg = config.load(path.parent / doc["base"])
    else:
        base_cfg = config.parse(yaml.safe_dump(doc["base"]), f"{path}#base")
    cells = expand_grid(doc, base_cfg.resolved)
    # validate every cell up front so a typo fails before any training
    for cell in cells:
        config.from_dict(cell_config(base_cfg.resolved, cell), f"{path}#{_cell_name(cell)}")
    return doc, base_cfg, cells


def run_sweep(path, out_dir: Path | None = None, workers: int | None = None) -> tuple[Path, list[dict]]:
    doc, base_cfg, cells = load_grid(path)
    out_dir = Path(out_dir or (doc.get("output") or {}).get("dir") or _default_out(str(path), "sweep"))
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cell_config(base_cfg.resolved, c), str(path), str(out_dir / _cell_name(c))) for c in cells]
    workers = workers or int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    for cell, res in zip(cells, results):
        if res["status"] != "ok":
            log.warning("cell %s failed: %s", _cell_name(cell), res["error"])
    rows = summarize(cells, results)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    write_atomic(out_dir / "summary.csv", buf.getvalue())
    return out_dir, rows


def cmd_sweep(args) -> int:
    try:
        out_dir, rows = run_sweep(args.grid, args.out)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for r in rows:
        print(f"{r['cell']}: {100 * r['accuracy_mean']:.1f} +- {100 * r['accuracy_std']:.1f} ({r['seeds']} seeds, {r['failed']} failed)")
    print(f"wrote {out_dir / 'summary.csv'}")
    return EXIT_OK


# -- account / kappa --------------------------------------------------------


def cmd_account(args) -> int:
    try:
        cfg = config.load(args.config)
        train_data, _ = config.load_datasets(cfg)
        users, _ = setup_users(cfg.train, train_data)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    q = max(users[i].dp.sampling_rate for i in cfg.train.honest_ids)
    print(json.dumps(privacy_report(cfg, q), indent=2))
    return EXIT_OK


def kappa_suite(params: dict) -> dict:
    """Empirical kappa and sketch-pipeline compatibility over random Gaussian instances."""
    n, b, d, k, p = (params[x] for x in ("n", "b", "d", "k", "p"))
    report = {}
    for rule, use_nnm in itertools.product(RULES, (False, True)):
        spec = AggregatorSpec(rule, b, nnm=use_nnm)
        kappas, holds = [], 0
        for trial in range(params["trials"]):
            rng = make_rng(params["seed"], trial)
            vectors = rng.standard_normal((n, d))
            kappas.append(empirical_kappa(spec, vectors).kappa)
            sketch = CountSketch(d, k, p, seed=int(rng.integers(2**63)))
            holds += robust_compat_check(spec, sketch, vectors).holds
        report[spec.label] = {
            "kappa_max": max(kappas),
            "kappa_mean": statistics.fmean(kappas),
            "compat_holds": f"{holds}/{params['trials']}",
        }
    sketch = CountSketch(d, k, p, seed=params["seed"])
    report["spectral_norm_sq"] = spectral_norm_sq(sketch, 200, make_rng(params["seed"], 10**6))
    return report


def cmd_kappa(args) -> int:
    try:
        cfg = config.load(args.config)
    except config.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    params = cfg.kappa or {key: default for key, (_, default) in config.SCHEMA["kappa"].items()}
    try:
        report = kappa_suite(params)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(report, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dprobfl", description="Private, robust, compressed federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train one configuration (a config file or a manifest)")
    p.add_argument("config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help=f"run a grid; worker count from ${WORKERS_ENV}")
    p.add_argument("grid")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("account", help="print the privacy report without training")
    p.add_argument("config")
    p.set_defaults(func=cmd_account)
    p = sub.add_parser("kappa", help="run the robustness certification suite")
    p.add_argument("config")
    p.set_defaults(func=cmd_kappa)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
