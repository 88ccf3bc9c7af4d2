# tomoclass/cli.py
import argparse
import json
import logging
import logging.handlers
import os
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Callable, Optional

from pydantic import ValidationError

import tomoclass
from tomoclass.core import config
from tomoclass.core.database import list_runs, record_run
from tomoclass.core.errors import ConfigError, TomoclassError, UsageError
from tomoclass.core.models import RunConfig, RunManifest
from tomoclass.services import pipeline
from tomoclass.services.cube_io import (
    PolChannel, merge_headings, read_cube, read_label_raster, read_species_map,
)
from tomoclass.services.evaluation import render_map
from tomoclass.services.features import build_table, export_table_csv, import_table_csv
from tomoclass.services.geosplit import read_mask, write_mask
from tomoclass.services.hpo import export_trace_csv
from tomoclass.services.model_io import load_model, save_model
from tomoclass.utils.datetime_helpers import format_wall_time, now_local_iso

logger = logging.getLogger("tomoclass")

DEFAULT_TUNE_BUDGET = 20
VERSIONED_PACKAGES = ("numpy", "scipy", "joblib", "pydantic", "openpyxl", "pillow", "sqlalchemy")


# ── Logging ──────────────────────────────────────────────────────────────────
# Configurable via env: LOG_LEVEL (default INFO), LOG_FILE (default logs/tomoclass.log)

def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, config.LOG_LEVEL, logging.INFO)
    root = logging.getLogger()
    root.setLevel(level)
    if any(isinstance(h, logging.handlers.RotatingFileHandler) for h in root.handlers):
        for h in root.handlers:
            h.setLevel(level)
        return
    fmt = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    try:
        os.makedirs(os.path.dirname(config.LOG_FILE) or ".", exist_ok=True)
        file_h = logging.handlers.RotatingFileHandler(
            config.LOG_FILE, maxBytes=10_000_000, backupCount=5, encoding="utf-8")
        file_h.setFormatter(fmt)
        file_h.setLevel(level)
        root.addHandler(file_h)
    except OSError as e:
        print(f"warning: file logging disabled ({e})", file=sys.stderr)
    stream_h = logging.StreamHandler(sys.stderr)
    stream_h.setFormatter(fmt)
    stream_h.setLevel(level)
    root.addHandler(stream_h)


# ── Argument parsing ─────────────────────────────────────────────────────────

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_help()}")


def _test_frac(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("test-frac must be in (0,1)")
    if not (0.0 < v < 1.0):
        raise argparse.ArgumentTypeError("test-frac must be in (0,1)")
    return v


def _channels(text: str) -> list[str]:
    names = [t.strip().upper() for t in text.split(",") if t.strip()]
    valid = [c.value for c in PolChannel]
    for n in names:
        if n not in valid:
            raise argparse.ArgumentTypeError(f"unknown channel {n!r} (choose from {', '.join(valid)})")
    if not names:
        raise argparse.ArgumentTypeError("at least one channel is required")
    return names


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="TOML or YAML experiment config; flags override its keys")
    p.add_argument("--out", dest="out_dir", help="output directory (default $TOMOCLASS_OUTPUT_DIR or ./out)")
    p.add_argument("--threads", type=int, help="worker threads (default $TOMOCLASS_THREADS, else logical cores)")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    return p


def _inputs(p, *names):
    helps = {
        "nw": "NW-heading TOMO1 cube", "se": "SE-heading TOMO1 cube", "cube": "merged TOMO1 cube",
        "labels": "LBL1 species map", "lidar": "LiDAR point text file", "mask": "LBL1 split mask",
        "features": "feature table CSV", "model": "TCML1 model file", "pred": "LBL1 prediction raster",
    }
    for n in names:
        p.add_argument(f"--{n}", help=helps[n])


def _synth_flags(p):
    p.add_argument("--synth-seed", type=int, help="generate a synthetic scene with this seed")
    p.add_argument("--n-range", type=int)
    p.add_argument("--n-azimuth", type=int)
    p.add_argument("--patch-size", type=float, help="mean species patch diameter in pixels")
    p.add_argument("--noise", type=float, help="log-normal multiplicative noise sigma")
    p.add_argument("--unlabeled-frac", type=float)


def _split_flags(p):
    p.add_argument("--split", "--method", dest="split_method", choices=["swath", "square"])
    p.add_argument("--test-frac", type=_test_frac)
    p.add_argument("--square-frac", type=float, help="square side as a fraction of the azimuth extent")
    p.add_argument("--split-seed", type=int)
    p.add_argument("--buffer-px", type=int)
    p.add_argument("--horizontal", action=argparse.BooleanOptionalAction)
    p.add_argument("--tolerance", type=float)


def _feature_flags(p):
    p.add_argument("--channels", type=_channels, help="comma list, e.g. HH,HV,VV")
    p.add_argument("--xy", dest="include_xy", action=argparse.BooleanOptionalAction)
    p.add_argument("--scale", choices=["linear", "db"])
    p.add_argument("--export-features", action="store_true")


def _learner_flags(p):
    p.add_argument("--learner", choices=["tree", "forest", "gbm", "auto"])
    p.add_argument("--seed", type=int)
    p.add_argument("--class-weight", choices=["none", "balanced"])
    p.add_argument("--max-depth", type=int)
    p.add_argument("--min-samples-leaf", type=int)
    p.add_argument("--n-trees", type=int)
    p.add_argument("--n-rounds", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--subsample", type=float)
    p.add_argument("--tune-budget", type=int, help="BO trials (0 = train with given params)")
    p.add_argument("--objective", choices=["accuracy", "balanced_accuracy"])


def _height_flags(p):
    p.add_argument("--height-source", help="first, mean, HH, HV or VV")
    p.add_argument("--threshold-db", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tomoclass", description="TomoSAR tree-species classification pipeline")
    parser.add_argument("--version", action="version", version=f"tomoclass {tomoclass.__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, parents=[common],
                              argument_default=argparse.SUPPRESS)

    p = add("synth", "generate a synthetic two-heading scene")
    _synth_flags(p)

    p = add("merge", "merge NW and SE cubes")
    _inputs(p, "nw", "se")

    p = add("split", "geographic train/test split of a species map")
    _inputs(p, "labels")
    _split_flags(p)

    p = add("features", "build the per-pixel feature table")
    _inputs(p, "cube", "nw", "se", "labels", "mask")
    _feature_flags(p)

    p = add("train", "train a learner on the TRAIN rows of a feature table")
    _inputs(p, "features")
    _learner_flags(p)

    p = add("tune", "Bayesian-optimize a learner's hyperparameters, then train it")
    _inputs(p, "features")
    _learner_flags(p)

    p = add("evaluate", "score a model on the TEST rows of a feature table")
    _inputs(p, "model", "features", "labels")
    p.add_argument("--export-probs", action="store_true")

    p = add("heightstats", "LiDAR height statistics per class and split")
    _inputs(p, "cube", "nw", "se", "labels", "mask", "lidar", "pred")
    _height_flags(p)

    p = add("render", "two-panel truth/prediction PPM map")
    _inputs(p, "labels", "pred")

    for name, text in (("pipeline", "all steps end to end"),
                       ("experiment", "split x XY grid (plus channel combinations) on one scene")):
        p = add(name, text)
        _inputs(p, "nw", "se", "labels", "lidar")
        _synth_flags(p)
        _split_flags(p)
        _feature_flags(p)
        _learner_flags(p)
        _height_flags(p)
        p.add_argument("--export-probs", action="store_true")
        if name == "experiment":
            p.add_argument("--channel-combos", action="store_true")

    add("runs", "list the run ledger of an output directory")
    return parser


def merge_config(ns: argparse.Namespace) -> RunConfig:
    """Config file keys first, then the flags that were actually given."""
    flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    raw = config.load_config(ns.config) if getattr(ns, "config", None) else {}
    raw.update(flags)
    return RunConfig(**raw)


# ── Subcommands ──────────────────────────────────────────────────────────────

def _need(cfg: RunConfig, *names: str, command: str) -> None:
    missing = [f"--{n}" for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError(f"{command} requires {', '.join(missing)}")


def _cube(cfg: RunConfig, command: str):
    if cfg.cube:
        return read_cube(cfg.cube)
    if cfg.nw and cfg.se:
        return merge_headings(read_cube(cfg.nw), read_cube(cfg.se))
    raise UsageError(f"{command} requires --cube or both --nw and --se")


def cmd_synth(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    return pipeline.step_synth(cfg, out)


def cmd_merge(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "nw", "se", command="merge")
    path = out / "merged.tomo"
    pipeline.step_merge(cfg.nw, cfg.se, path)
    return {"merged": path}


def cmd_split(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "labels", command="split")
    mask, report = pipeline.step_split(read_species_map(cfg.labels), cfg)
    outputs = {"mask": out / "split.lbl", "split_report": out / "split_report.csv"}
    write_mask(mask, outputs["mask"])
    pipeline.write_split_report(report, outputs["split_report"])
    for w in report.warnings:
        logger.warning("Split: %s", w)
    return outputs


def cmd_features(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "labels", "mask", command="features")
    table = build_table(_cube(cfg, "features"), read_species_map(cfg.labels), read_mask(cfg.mask),
                        pipeline.feature_spec(cfg), n_jobs=n_jobs)
    path = out / "features.csv"
    export_table_csv(table, path)
    return {"features": path}


def _train(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    table = import_table_csv(cfg.features)
    model, traces = pipeline.build_model(table, cfg, n_jobs)
    outputs = {"model": out / "model.tcml"}
    save_model(model, outputs["model"])
    for family, trace in traces.items():
        outputs[f"trace_{family}"] = out / f"tune_trace_{family}.csv"
        export_trace_csv(trace, outputs[f"trace_{family}"])
    return outputs


def cmd_train(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "features", command="train")
    return _train(cfg, out, n_jobs)


def cmd_tune(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "features", command="tune")
    if cfg.learner not in ("gbm", "forest"):
        raise UsageError("tune supports --learner gbm or forest")
    if cfg.tune_budget == 0:
        cfg = cfg.model_copy(update={"tune_budget": DEFAULT_TUNE_BUDGET})
    return _train(cfg, out, n_jobs)


def cmd_evaluate(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "model", "features", command="evaluate")
    grid = read_species_map(cfg.labels).grid if cfg.labels else None
    _, outputs, _ = pipeline.evaluate(load_model(cfg.model), import_table_csv(cfg.features), out,
                                      n_jobs, cfg.export_probs, grid=grid)
    return outputs


def cmd_heightstats(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "labels", "mask", "lidar", command="heightstats")
    pred = read_label_raster(cfg.pred)[0] if cfg.pred else None
    return pipeline.height_outputs(_cube(cfg, "heightstats"), read_species_map(cfg.labels),
                                   read_mask(cfg.mask), cfg.lidar, cfg, out, n_jobs, pred=pred)


def cmd_render(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    _need(cfg, "labels", "pred", command="render")
    path = out / "map.ppm"
    render_map(read_species_map(cfg.labels), read_label_raster(cfg.pred)[0], path)
    return {"map": path}


def cmd_pipeline(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    return pipeline.run_pipeline(cfg, out, n_jobs)


def cmd_experiment(cfg: RunConfig, out: Path, n_jobs: int) -> dict[str, Path]:
    return pipeline.run_experiment(cfg, out, n_jobs)


COMMANDS: dict[str, Callable[[RunConfig, Path, int], dict[str, Path]]] = {
    "synth": cmd_synth,
    "merge": cmd_merge,
    "split": cmd_split,
    "features": cmd_features,
    "train": cmd_train,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "heightstats": cmd_heightstats,
    "render": cmd_render,
    "pipeline": cmd_pipeline,
    "experiment": cmd_experiment,
}


def cmd_runs(out: Path) -> None:
    rows = list_runs(out)
    if not rows:
        print(f"no runs recorded in {out}")
        return
    for r in rows:
        print(f"{r['id']:>4}  {r['started_at']}  {r['command']:<12} "
              f"{format_wall_time(r['wall_time_s']):>10}  threads={r['threads']}  "
              f"outputs={','.join(r['outputs'])}")


# ── Manifest ─────────────────────────────────────────────────────────────────

def package_versions() -> dict[str, str]:
    out = {"tomoclass": tomoclass.__version__, "python": sys.version.split()[0]}
    for name in VERSIONED_PACKAGES:
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = "unknown"
    return out


def write_manifest(command: str, argv: list[str], cfg: RunConfig, outputs: dict[str, Path],
                   started_at: str, wall: float, n_jobs: int, out: Path) -> Path:
    seeds = {"seed": cfg.seed, "split_seed": cfg.split_seed}
    if cfg.synth_seed is not None:
        seeds["synth_seed"] = cfg.synth_seed
    manifest = RunManifest(
        command=command,
        argv=argv,
        inputs=cfg.inputs(),
        outputs={k: str(v) for k, v in sorted(outputs.items())},
        seeds=seeds,
        versions=package_versions(),
        started_at=started_at,
        wall_time_s=wall,
        threads=n_jobs,
        config=cfg.model_dump(mode="json"),
    )
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    if config.LEDGER_ENABLED:
        try:
            record_run(manifest, out)
        except Exception as e:
            logger.warning("Run ledger update failed: %s", e)
    return path


# ── Entry point ──────────────────────────────────────────────────────────────

def run(argv: Optional[list[str]] = None) -> int:
    """Exit codes: 0 success, 1 usage error, 2 data/format/IO error."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as e:
        print(f"tomoclass: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:          # --help / --version
        return e.code if isinstance(e.code, int) else 0

    configure_logging(getattr(ns, "verbose", False))
    command = ns.command
    try:
        cfg = merge_config(ns)
        out = Path(cfg.out_dir)
        if command == "runs":
            cmd_runs(out)
            return 0
        n_jobs = config.resolve_threads(cfg.threads)
        out.mkdir(parents=True, exist_ok=True)
        started_at = now_local_iso()
        t0 = time.perf_counter()
        logger.info("tomoclass %s: out=%s threads=%d", command, out, n_jobs)
        outputs = COMMANDS[command](cfg, out, n_jobs)
        wall = time.perf_counter() - t0
        manifest = write_manifest(command, argv, cfg, outputs, started_at, wall, n_jobs, out)
        logger.info("%s finished in %s; manifest %s", command, format_wall_time(wall), manifest)
        return 0
    except (UsageError, ConfigError) as e:
        print(f"tomoclass {command}: error: {e}", file=sys.stderr)
        return 1
    except ValidationError as e:
        msgs = "; ".join(_validation_message(err) for err in e.errors())
        print(f"tomoclass {command}: error: {msgs}", file=sys.stderr)
        return 1
    except (TomoclassError, OSError) as e:
        logger.error("%s failed: %s", command, e)
        print(f"tomoclass {command}: error: {e}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("Unhandled exception in %s", command)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
