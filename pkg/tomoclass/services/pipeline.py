"""
End-to-end orchestration: scene -> merged cube -> geo-split -> feature table
-> learner (default, tuned or auto-ensembled) -> report, map and height
statistics. Every step writes its artifact into the run's output directory
and returns the paths it produced.
"""

import csv
import itertools
import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np

from tomoclass.core.errors import DataError, ParameterError
from tomoclass.core.models import RunConfig
from tomoclass.services import evaluation as ev
from tomoclass.services import heightstats as hs
from tomoclass.services.cube_io import (
    HeightRaster, SpeciesMap, TomoCube, merge_headings, rasterize_lidar, read_cube,
    read_lidar, read_species_map, write_cube, write_height_raster, write_label_raster,
)
from tomoclass.services.features import (
    FeatureSpec, FeatureTable, build_table, export_table_csv, holdout_split,
)
from tomoclass.services.geosplit import (
    SplitMask, SplitMethod, SplitReport, square_split, swath_split, validate_split, write_mask,
)
from tomoclass.services.hpo import TuneTrace, export_trace_csv, forest_space, gbm_space, tune
from tomoclass.services.learners import (
    ForestParams, GbmParams, Model, TreeParams, greedy_ensemble, predict, train_forest,
    train_gbm, train_tree,
)
from tomoclass.services.model_io import save_model
from tomoclass.services.synth import SceneConfig, generate_scene, write_scene

logger = logging.getLogger(__name__)

HOLDOUT_FRAC = 0.2
AUTO_DEFAULT_BUDGET = 8


# ── Scene and split ──────────────────────────────────────────────────────────

def scene_config(cfg: RunConfig) -> SceneConfig:
    kw: dict[str, Any] = {"seed": cfg.synth_seed if cfg.synth_seed is not None else 7}
    for src, dst in (("n_range", "n_range"), ("n_azimuth", "n_azimuth"),
                     ("patch_size", "patch_size_px"), ("noise", "noise"),
                     ("unlabeled_frac", "unlabeled_frac")):
        v = getattr(cfg, src)
        if v is not None:
            kw[dst] = v
    return SceneConfig(**kw)


def step_synth(cfg: RunConfig, out_dir: Path) -> dict[str, Path]:
    return write_scene(generate_scene(scene_config(cfg)), out_dir)


def step_merge(nw_path, se_path, out_path: Path) -> TomoCube:
    cube = merge_headings(read_cube(nw_path), read_cube(se_path))
    write_cube(cube, out_path)
    return cube


def step_split(species: SpeciesMap, cfg: RunConfig,
               method: Optional[SplitMethod] = None) -> tuple[SplitMask, SplitReport]:
    method = SplitMethod(method or cfg.split_method)
    if method == SplitMethod.SWATH:
        mask = swath_split(species, cfg.test_frac, cfg.split_seed, horizontal=cfg.horizontal,
                           buffer_px=cfg.buffer_px, tolerance=cfg.tolerance)
    else:
        mask = square_split(species, cfg.square_frac, cfg.test_frac, cfg.split_seed,
                            buffer_px=cfg.buffer_px, tolerance=cfg.tolerance)
    return mask, validate_split(mask, species)


def write_split_report(report: SplitReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "train", "test", "excluded"])
        for r in report.as_rows():
            w.writerow([r["class_id"], r["train"], r["test"], r["excluded"]])
        w.writerow([])
        w.writerow(["test_fraction", repr(report.test_fraction)])
        w.writerow(["n_test_components", report.n_test_components])
        for msg in report.warnings:
            w.writerow(["warning", msg])


def feature_spec(cfg: RunConfig, channels=None, include_xy: Optional[bool] = None) -> FeatureSpec:
    return FeatureSpec(
        channels=list(channels or cfg.channels),
        include_xy=cfg.include_xy if include_xy is None else include_xy,
        scale=cfg.scale,
    )


# ── Learners ─────────────────────────────────────────────────────────────────

def _tree_kw(cfg: RunConfig) -> dict[str, Any]:
    kw: dict[str, Any] = {"class_weight": cfg.class_weight}
    if cfg.max_depth is not None:
        kw["max_depth"] = cfg.max_depth
    if cfg.min_samples_leaf is not None:
        kw["min_samples_leaf"] = cfg.min_samples_leaf
    return kw


def learner_params(family: str, cfg: RunConfig):
    tree_kw = _tree_kw(cfg)
    if family == "tree":
        return TreeParams(**tree_kw)
    if family == "forest":
        kw: dict[str, Any] = {"tree": TreeParams(n_feature_candidates="sqrt", **tree_kw)}
        if cfg.n_trees is not None:
            kw["n_trees"] = cfg.n_trees
        return ForestParams(**kw)
    if family == "gbm":
        tree_kw.setdefault("max_depth", 6)
        kw = {"tree": TreeParams(**tree_kw)}
        for name in ("n_rounds", "learning_rate", "subsample"):
            if getattr(cfg, name) is not None:
                kw[name] = getattr(cfg, name)
        return GbmParams(**kw)
    raise ParameterError(f"unknown learner family {family!r}")


def fit(family: str, train: FeatureTable, params, seed: int, n_jobs: int) -> Model:
    if family == "tree":
        return train_tree(train, params, seed)
    if family == "forest":
        return train_forest(train, params, seed, n_jobs=n_jobs)
    if family == "gbm":
        return train_gbm(train, params, seed, n_jobs=n_jobs)
    raise ParameterError(f"unknown learner family {family!r}")


def _with_values(family: str, base, values: dict[str, Any]):
    tree = base.tree.model_copy(update={"max_depth": int(values["max_depth"])})
    if family == "gbm":
        return base.model_copy(update={
            "tree": tree,
            "learning_rate": float(values["learning_rate"]),
            "n_rounds": int(values["n_rounds"]),
        })
    return base.model_copy(update={"tree": tree, "n_trees": int(values["n_trees"])})


def tune_family(family: str, fit_rows: FeatureTable, val_rows: FeatureTable, cfg: RunConfig,
                budget: int, n_jobs: int) -> tuple[Any, TuneTrace]:
    """BO over the family's default space; objective = negated validation score."""
    if family not in ("gbm", "forest"):
        raise ParameterError(f"tuning supports gbm and forest, not {family!r}")
    base = learner_params(family, cfg)
    space = gbm_space() if family == "gbm" else forest_space()

    def objective(values: dict[str, Any]) -> float:
        model = fit(family, fit_rows, _with_values(family, base, values), cfg.seed, n_jobs)
        pred, _ = predict(model, val_rows, n_jobs=n_jobs)
        return -ev.objective_score(val_rows.labels, pred, cfg.objective)

    best, trace = tune(objective, space, budget, cfg.seed)
    return _with_values(family, base, best), trace


def build_model(table: FeatureTable, cfg: RunConfig, n_jobs: int) -> tuple[Model, dict[str, TuneTrace]]:
    """Train on the table's TRAIN rows: defaults, tuned (tune_budget >= 2) or auto-ensembled."""
    train = table.train()
    if len(train) == 0:
        raise DataError("no training rows after the split")
    if cfg.learner == "auto":
        return auto_model(train, cfg, n_jobs)
    if cfg.tune_budget >= 2 and cfg.learner in ("gbm", "forest"):
        fit_rows, val_rows = holdout_split(train, HOLDOUT_FRAC, cfg.seed)
        params, trace = tune_family(cfg.learner, fit_rows, val_rows, cfg, cfg.tune_budget, n_jobs)
        return fit(cfg.learner, train, params, cfg.seed, n_jobs), {cfg.learner: trace}
    return fit(cfg.learner, train, learner_params(cfg.learner, cfg), cfg.seed, n_jobs), {}


def auto_model(train: FeatureTable, cfg: RunConfig, n_jobs: int) -> tuple[Model, dict[str, TuneTrace]]:
    """Tune GBM and forest on a holdout, then greedy-ensemble them with a default CART."""
    budget = cfg.tune_budget if cfg.tune_budget >= 2 else AUTO_DEFAULT_BUDGET
    fit_rows, val_rows = holdout_split(train, HOLDOUT_FRAC, cfg.seed)
    traces: dict[str, TuneTrace] = {}
    candidates = []
    for family in ("gbm", "forest"):
        params, traces[family] = tune_family(family, fit_rows, val_rows, cfg, budget, n_jobs)
        candidates.append(fit(family, fit_rows, params, cfg.seed, n_jobs))
    candidates.append(fit("tree", fit_rows, learner_params("tree", cfg), cfg.seed, n_jobs))
    return greedy_ensemble(candidates, val_rows, cfg.objective, n_jobs=n_jobs), traces


# ── Evaluation and outputs ───────────────────────────────────────────────────

def evaluate(model: Model, table: FeatureTable, out_dir: Path, n_jobs: int,
             export_probs: bool = False,
             grid: Optional[tuple[int, int]] = None) -> tuple[ev.ClassReport, dict[str, Path], Optional[np.ndarray]]:
    """Report on TEST rows; prediction raster over all table rows when `grid` is given."""
    test = table.test()
    if len(test) == 0:
        raise DataError("no test rows to evaluate")
    pred, probs = predict(model, test, n_jobs=n_jobs)
    classes = sorted(set(int(c) for c in model.classes) | set(int(c) for c in test.labels))
    cm = ev.confusion_matrix(test.labels, pred, classes)
    report = ev.classification_report(cm)
    outputs = {
        "report_txt": out_dir / "report.txt",
        "report_csv": out_dir / "report.csv",
        "report_xlsx": out_dir / "report.xlsx",
        "confusion_csv": out_dir / "confusion.csv",
    }
    outputs["report_txt"].write_text(ev.format_report_text(report, class_names=True), encoding="utf-8")
    ev.export_report_csv(report, outputs["report_csv"])
    ev.export_report_xlsx(report, cm, outputs["report_xlsx"])
    with open(outputs["confusion_csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["true\\pred"] + list(cm.classes))
        for c, row in zip(cm.classes, cm.matrix):
            w.writerow([c] + [int(v) for v in row])
    if export_probs:
        outputs["probabilities_csv"] = out_dir / "probabilities.csv"
        ev.export_probabilities(test.x, test.y, test.labels, pred, probs, model.classes,
                                outputs["probabilities_csv"])
    logger.info(
        "Test accuracy %.4f, balanced accuracy %.4f, macro F1 %.4f, weighted F1 %.4f (%d rows)",
        report.accuracy, report.balanced_accuracy, report.macro_avg.f1,
        report.weighted_avg.f1, report.total_support,
    )
    raster = None
    if grid is not None:
        all_pred, _ = predict(model, table, n_jobs=n_jobs)
        raster = ev.prediction_raster(grid, table.x, table.y, all_pred)
        outputs["pred_lbl"] = out_dir / "pred.lbl"
        write_label_raster(raster, outputs["pred_lbl"])
    return report, outputs, raster


def height_outputs(cube: TomoCube, species: SpeciesMap, mask: SplitMask, lidar_path,
                   cfg: RunConfig, out_dir: Path, n_jobs: int,
                   pred: Optional[np.ndarray] = None) -> dict[str, Path]:
    chm = rasterize_lidar(read_lidar(lidar_path), *species.grid)
    est = hs.estimate_height_raster(cube, cfg.height_source, cfg.threshold_db)
    outputs = {"chm": out_dir / "chm.npy", "height_est": out_dir / "height_est.npy"}
    write_height_raster(chm, outputs["chm"])
    write_height_raster(est, outputs["height_est"])
    groupings = [("truth", None)] + ([("pred", pred)] if pred is not None else [])
    for tag, labels in groupings:
        outputs.update(write_height_tables(chm, species, mask, est, out_dir, tag, labels, n_jobs))
    return outputs


def write_height_tables(chm: HeightRaster, species: SpeciesMap, mask: SplitMask,
                        est: HeightRaster, out_dir: Path, tag: str,
                        labels: Optional[np.ndarray] = None, n_jobs: int = 1) -> dict[str, Path]:
    rows = hs.class_height_stats(chm, species, mask, est, labels=labels)
    blocks = hs.violin_data(chm, species, mask, labels=labels, n_jobs=n_jobs)
    out = {
        f"heightstats_{tag}_txt": out_dir / f"heightstats_{tag}.txt",
        f"heightstats_{tag}_csv": out_dir / f"heightstats_{tag}.csv",
        f"heightstats_{tag}_xlsx": out_dir / f"heightstats_{tag}.xlsx",
        f"violin_{tag}_csv": out_dir / f"violin_{tag}.csv",
    }
    out[f"heightstats_{tag}_txt"].write_text(hs.format_stats_text(rows), encoding="utf-8")
    hs.export_stats_csv(rows, out[f"heightstats_{tag}_csv"])
    title = "LiDAR height statistics by " + ("true" if tag == "truth" else "predicted") + " class"
    hs.export_stats_xlsx(rows, out[f"heightstats_{tag}_xlsx"], title=title)
    hs.export_violin_csv(blocks, out[f"violin_{tag}_csv"])
    return out


# ── Whole runs ───────────────────────────────────────────────────────────────

def resolve_scene(cfg: RunConfig, out_dir: Path) -> dict[str, Path]:
    """Input paths for a run: the given files, or a freshly generated scene."""
    if cfg.synth_seed is not None or not (cfg.nw and cfg.se and cfg.labels):
        paths = step_synth(cfg, out_dir / "scene")
        return {"nw": paths["nw"], "se": paths["se"], "labels": paths["labels"],
                "lidar": paths["lidar"]}
    paths = {"nw": Path(cfg.nw), "se": Path(cfg.se), "labels": Path(cfg.labels)}
    if cfg.lidar:
        paths["lidar"] = Path(cfg.lidar)
    return paths


def run_pipeline(cfg: RunConfig, out_dir: Path, n_jobs: int) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = resolve_scene(cfg, out_dir)
    outputs: dict[str, Path] = {f"input_{k}": v for k, v in inputs.items()}

    outputs["merged"] = out_dir / "merged.tomo"
    cube = step_merge(inputs["nw"], inputs["se"], outputs["merged"])
    species = read_species_map(inputs["labels"])

    mask, split_report = step_split(species, cfg)
    outputs["mask"] = out_dir / "split.lbl"
    write_mask(mask, outputs["mask"])
    outputs["split_report"] = out_dir / "split_report.csv"
    write_split_report(split_report, outputs["split_report"])

    table = build_table(cube, species, mask, feature_spec(cfg), n_jobs=n_jobs)
    if cfg.export_features:
        outputs["features"] = out_dir / "features.csv"
        export_table_csv(table, outputs["features"])

    model, traces = build_model(table, cfg, n_jobs)
    outputs["model"] = out_dir / "model.tcml"
    save_model(model, outputs["model"])
    for family, trace in traces.items():
        outputs[f"trace_{family}"] = out_dir / f"tune_trace_{family}.csv"
        export_trace_csv(trace, outputs[f"trace_{family}"])

    _, eval_out, pred_raster = evaluate(model, table, out_dir, n_jobs, cfg.export_probs,
                                        grid=species.grid)
    outputs.update(eval_out)
    outputs["map"] = out_dir / "map.ppm"
    ev.render_map(species, pred_raster, outputs["map"])

    if "lidar" in inputs:
        outputs.update(height_outputs(cube, species, mask, inputs["lidar"], cfg, out_dir,
                                      n_jobs, pred=pred_raster))
    else:
        logger.info("No LiDAR input; skipping height statistics")
    return outputs


EXPERIMENT_HEADER = ["band", "geosplit", "xy", "channels", "accuracy", "balanced_accuracy", "n_test"]


def run_experiment(cfg: RunConfig, out_dir: Path, n_jobs: int) -> dict[str, Path]:
    """
    Split method x XY grid on one scene, plus every channel subset without XY
    when channel_combos is set. One model per cell, scored on its test rows.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = resolve_scene(cfg, out_dir)
    cube = merge_headings(read_cube(inputs["nw"]), read_cube(inputs["se"]))
    species = read_species_map(inputs["labels"])

    cells = [(m, xy, tuple(cfg.channels)) for m in (SplitMethod.SQUARE, SplitMethod.SWATH)
             for xy in (False, True)]
    if cfg.channel_combos:
        full = tuple(cfg.channels)
        for m in (SplitMethod.SQUARE, SplitMethod.SWATH):
            for r in range(1, len(full)):
                cells += [(m, False, combo) for combo in itertools.combinations(full, r)]

    masks = {m: step_split(species, cfg, m)[0] for m in (SplitMethod.SQUARE, SplitMethod.SWATH)}
    rows = []
    for method, xy, chans in cells:
        table = build_table(cube, species, masks[method], feature_spec(cfg, chans, xy), n_jobs=n_jobs)
        model, _ = build_model(table, cfg, n_jobs)
        test = table.test()
        pred, _ = predict(model, test, n_jobs=n_jobs)
        rows.append({
            "band": cube.band,
            "geosplit": method.value,
            "xy": "with" if xy else "without",
            "channels": "+".join(c.value for c in chans),
            "accuracy": ev.accuracy(test.labels, pred),
            "balanced_accuracy": ev.balanced_accuracy(test.labels, pred),
            "n_test": len(test),
        })
        logger.info("Experiment %s xy=%s channels=%s: acc %.4f, bal %.4f", method.value, xy,
                    rows[-1]["channels"], rows[-1]["accuracy"], rows[-1]["balanced_accuracy"])

    outputs = {"table1_csv": out_dir / "table1.csv", "table1_txt": out_dir / "table1.txt"}
    with open(outputs["table1_csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(EXPERIMENT_HEADER)
        for r in rows:
            w.writerow([r["band"], r["geosplit"], r["xy"], r["channels"], repr(r["accuracy"]),
                        repr(r["balanced_accuracy"]), r["n_test"]])
    outputs["table1_txt"].write_text(format_experiment_text(rows), encoding="utf-8")
    return outputs


def format_experiment_text(rows: list[dict]) -> str:
    head = ["Band", "Geosplit", "XY", "Channels", "Accuracy", "Balanced Accuracy"]
    body = [[r["band"], r["geosplit"].capitalize(), r["xy"].capitalize(), r["channels"],
             f"{r['accuracy']:.2f}", f"{r['balanced_accuracy']:.2f}"] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip()
                     for line in [head] + body) + "\n"
