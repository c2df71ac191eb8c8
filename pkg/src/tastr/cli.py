"""Command-line entry point: simulate worlds, run the pipeline, evaluate and associate.

Exit codes: 0 success, 1 missing or unreadable input, 2 invalid config,
3 incompatible inputs (dimension mismatch), 4 failure inside a stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import matplotlib
import numpy as np

import tastr
from tastr.association import associate_all
from tastr.config import ExperimentConfig, load_config
from tastr.core import load_dataset, load_topology, save_dataset, save_topology, strip_labels
from tastr.embedding import load_checkpoint
from tastr.errors import ConfigError, DatasetParseError, DimensionError, IntegrityError, TastrError, TopologyError
from tastr.evaluation import association_pr
from tastr.pipeline import evaluate_run_model, merge_by_identity, run_progressive
from tastr.report import write_report
from tastr.seeds import stream
from tastr.simulator import GroundTruth, generate

log = logging.getLogger("tastr")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_INCOMPATIBLE, EXIT_STAGE = 0, 1, 2, 3, 4
ABLATIONS = ("no-str", "no-kmeans", "no-progressive", "none")

DATA_FILES = {"tracklets": "tracklets.jsonl", "topology": "topology.json", "truth": "truth.json"}


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config (missing keys take defaults)")
    p.add_argument("--seed", type=int, help="root seed, overrides the config")
    p.add_argument("--threads", type=int, help="worker threads for per-pair association")
    p.add_argument("--print-config", action="store_true", help="print the resolved config as TOML and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tastr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {tastr.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic camera-network dataset")
    _common(p)
    p.add_argument("--out", default="data", help="output directory")

    p = sub.add_parser("run", help="within-camera training, then progressive association rounds")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by 'simulate'")
    p.add_argument("--out", default="run", help="parent directory for run outputs")
    p.add_argument("--name", default="default", help="run name; outputs go to OUT/NAME")
    p.add_argument("--iterations", type=int, help="number of association rounds")
    p.add_argument("--ablation", action="append", choices=ABLATIONS,
                   help="disable a component; repeat to combine")
    p.add_argument("--weak", action="store_true", help="use per-camera identity labels")
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run", help="run directory whose config.toml fixes the evaluation seeds")
    p.add_argument("--out", help="write the metrics JSON here as well as to stdout")

    p = sub.add_parser("associate", help="one-shot cross-camera association with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ablation", action="append", choices=ABLATIONS)
    p.add_argument("--out", default="matches.csv", help="match CSV path")
    return parser


def resolve_config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    run_dir = getattr(args, "run", None)
    if path is None and run_dir is not None:
        path = Path(run_dir) / "config.toml"
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = load_config(path)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed", f"expected a nonnegative integer, got {args.seed}")
        cfg.seed = args.seed
        cfg.sync_seed()
    p = cfg.pipeline
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("pipeline.threads", f"must be at least 1, got {args.threads}")
        p.threads = args.threads
    if getattr(args, "iterations", None) is not None:
        p.n_iterations = args.iterations
    for ab in getattr(args, "ablation", None) or ():
        if ab == "no-str":
            p.association = replace(p.association, use_str=False)
        elif ab == "no-kmeans":
            p.association = replace(p.association, use_kmeans=False)
        elif ab == "no-progressive":
            p.progressive = False
    if getattr(args, "weak", False):
        p.weakly_supervised = True
    cfg.validate()
    return cfg


def _versions() -> dict:
    return {"tastr": tastr.__version__, "numpy": np.__version__, "matplotlib": matplotlib.__version__,
            "python": platform.python_version()}


def write_manifest(path: Path, cfg: ExperimentConfig, outputs: dict, timings: dict, status: str) -> None:
    manifest = {
        "status": status,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed_registry": cfg.seed_registry(),
        "versions": _versions(),
        "outputs": outputs,
        "timings_s": timings,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_data(data_dir):
    data_dir = Path(data_dir)
    for key in ("tracklets", "topology"):
        if not (data_dir / DATA_FILES[key]).is_file():
            raise FileNotFoundError(f"missing {DATA_FILES[key]} in {data_dir}")
    dataset = load_dataset(data_dir / DATA_FILES["tracklets"])
    topology = load_topology(data_dir / DATA_FILES["topology"])
    truth_path = data_dir / DATA_FILES["truth"]
    truth = GroundTruth.load(truth_path) if truth_path.is_file() else None
    return dataset, topology, truth


def _load_model(path, dataset):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model = load_checkpoint(path)
    if model.d_raw != dataset.d_raw:
        raise DimensionError(f"checkpoint expects d_raw={model.d_raw}, dataset has d_raw={dataset.d_raw}")
    return model


def cmd_simulate(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {k: str(out / v) for k, v in DATA_FILES.items()}
    t0 = time.perf_counter()
    dataset, truth = generate(cfg.sim)
    save_dataset(dataset, out / DATA_FILES["tracklets"])
    save_topology(cfg.sim.resolved_topology(), out / DATA_FILES["topology"])
    truth.save(out / DATA_FILES["truth"])
    write_manifest(out / "manifest.json", cfg, outputs, {"simulate": time.perf_counter() - t0}, "complete")
    print(f"tracklets\t{len(dataset)}")
    print(f"identities\t{len(set(truth.labels.values()))}")
    print(f"true_pairs\t{len(truth.true_pair_set())}")
    return EXIT_OK


def _summary(records) -> None:
    print("iteration\tcmc1\tmap\tmatches\tprecision\trecall")
    for r in records:
        m = r.metrics
        cells = [r.iteration, m.get("cmc1"), m.get("map"), r.num_matches, r.assoc_precision, r.assoc_recall]
        print("\t".join("" if c is None else (f"{c:.4f}" if isinstance(c, float) else str(c)) for c in cells))


def cmd_run(args, cfg: ExperimentConfig) -> int:
    dataset, topology, truth = _load_data(args.data)
    out = Path(args.out) / args.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
    outputs = {"dir": str(out), "config": "config.toml", "metrics": "metrics.json", "cmc": "cmc.csv"}
    timings: dict = {}
    write_manifest(out / "manifest.json", cfg, outputs, timings, "started")
    t0 = time.perf_counter()
    try:
        _, records = run_progressive(dataset, topology, cfg.pipeline, truth=truth, out_dir=out)
    except (TastrError, ValueError, FloatingPointError) as exc:
        write_manifest(out / "manifest.json", cfg, outputs, timings, "failed: pipeline")
        raise StageError("pipeline", exc) from exc
    timings["pipeline"] = time.perf_counter() - t0
    cmc = None
    if (out / "cmc.csv").is_file():
        cmc = np.loadtxt(out / "cmc.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    if not args.no_figures:
        t1 = time.perf_counter()
        outputs["figures"] = [p.name for p in write_report(records, cmc, out)]
        timings["report"] = time.perf_counter() - t1
    write_manifest(out / "manifest.json", cfg, outputs, timings, "complete")
    _summary(records)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    dataset, _, _ = _load_data(args.data)
    model = _load_model(args.checkpoint, dataset)
    if not dataset.labeled:
        raise IntegrityError("evaluation needs identity labels in the dataset")
    report, rematch = evaluate_run_model(model, dataset, cfg.pipeline)
    result = {**report.to_dict(), "num_queries": report.num_queries, "rematch_rank1": rematch}
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_associate(args, cfg: ExperimentConfig) -> int:
    dataset, topology, truth = _load_data(args.data)
    model = _load_model(args.checkpoint, dataset)
    p = cfg.pipeline
    if p.weakly_supervised:
        dataset = merge_by_identity(dataset)
        truth = GroundTruth.from_dataset(dataset)
    try:
        matches = associate_all(strip_labels(dataset), model, topology, p.association,
                                rng=stream(cfg.seed, "assoc1"), threads=p.threads)
    except (TastrError, ValueError) as exc:
        raise StageError("association", exc) from exc
    matches.to_csv(args.out)
    print("pair\taccepted\tcandidates")
    for (a, b), cands in sorted(matches.pairs.items()):
        print(f"{a}-{b}\t{sum(c.accepted for c in cands)}\t{len(cands)}")
    if truth is not None:
        precision, recall, _ = association_pr(matches, truth)
        print(f"precision\t{precision:.4f}\nrecall\t{recall:.4f}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "associate": cmd_associate}


def main(argv=None) -> int:
    level = os.environ.get("TASTR_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_toml())
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetParseError, IntegrityError, TopologyError) as exc:
        print(f"error: unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DimensionError as exc:
        print(f"error: incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
