"""
Confusion matrices, class-wise / overall classification reports and the
two-panel prediction map.

Undefined precision or recall (empty column or row) is reported as 0 and
flagged on the class row. Balanced accuracy and the macro average run over
classes with support > 0; the weighted average uses support as weight, so
weighted recall equals accuracy.
"""

import csv
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from tomoclass.core.errors import DataError, EmptyEvaluationError, ShapeError
from tomoclass.services.cube_io import SPECIES_DICTIONARY, SpeciesMap
from tomoclass.utils.xlsx import save_workbook

logger = logging.getLogger(__name__)

# Index = class id; 0 is background (unlabeled / not predicted).
PALETTE = np.array([
    [230, 230, 230],   # 0 background
    [ 27, 158, 119],   # 1 aspen
    [217,  95,   2],   # 2 pine
    [117, 112, 179],   # 3 beech with deciduous
    [231,  41, 138],   # 4 douglas fir
    [102, 166,  30],   # 5 mixed spruce
    [230, 171,   2],   # 6 oak-beech
    [166, 118,  29],   # 7 oak
    [ 31, 120, 180],   # 8 beech
], dtype=np.uint8)
PANEL_GAP_ROWS = 2
GAP_COLOR = (255, 255, 255)


class Objective(str, Enum):
    ACCURACY = "accuracy"
    BALANCED_ACCURACY = "balanced_accuracy"


@dataclass(frozen=True)
class ConfusionMatrix:
    matrix: np.ndarray            # int64 (K, K); [i, j] = true classes[i] predicted classes[j]
    classes: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


@dataclass
class ClassMetrics:
    class_id: int
    precision: float
    recall: float
    f1: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False


@dataclass
class AverageMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class ClassReport:
    per_class: list[ClassMetrics]
    accuracy: float
    balanced_accuracy: float
    macro_avg: AverageMetrics
    weighted_avg: AverageMetrics
    total_support: int
    flags: list[str] = field(default_factory=list)


# ── Metrics ──────────────────────────────────────────────────────────────────

def confusion_matrix(truth: Sequence[int], pred: Sequence[int],
                     classes: Optional[Sequence[int]] = None) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise DataError(f"truth {truth.shape} and pred {pred.shape} must be equal-length vectors")
    if classes is None:
        classes = np.unique(np.concatenate([truth, pred]))
    cls = np.asarray(sorted(int(c) for c in classes), dtype=np.int64)
    if len(set(cls.tolist())) != len(cls):
        raise DataError("class list has duplicates")
    ti = np.searchsorted(cls, truth)
    pi = np.searchsorted(cls, pred)
    for name, idx, vals in (("truth", ti, truth), ("pred", pi, pred)):
        bad = idx >= len(cls)
        inside = ~bad
        bad[inside] = cls[idx[inside]] != vals[inside]
        if np.any(bad):
            raise DataError(f"{name} label {int(vals[np.argmax(bad)])} not in classes {cls.tolist()}")
    K = len(cls)
    m = np.bincount(ti * K + pi, minlength=K * K).reshape(K, K).astype(np.int64)
    return ConfusionMatrix(matrix=m, classes=tuple(int(c) for c in cls))


def classification_report(cm: ConfusionMatrix) -> ClassReport:
    m = cm.matrix.astype(np.float64)
    total = cm.total
    if total == 0:
        raise EmptyEvaluationError("confusion matrix is empty; nothing to evaluate")
    diag = np.diag(m)
    col = m.sum(axis=0)
    row = m.sum(axis=1)
    per_class = []
    flags = []
    for k, cid in enumerate(cm.classes):
        p_undef = col[k] == 0
        r_undef = row[k] == 0
        p = 0.0 if p_undef else diag[k] / col[k]
        r = 0.0 if r_undef else diag[k] / row[k]
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        per_class.append(ClassMetrics(cid, float(p), float(r), float(f1), int(row[k]), bool(p_undef), bool(r_undef)))
        if p_undef:
            flags.append(f"class {cid}: precision undefined (never predicted)")
        if r_undef:
            flags.append(f"class {cid}: recall undefined (no support)")

    supported = [c for c in per_class if c.support > 0]
    sup = np.array([c.support for c in supported], dtype=np.float64)

    def _avg(attr, weights=None):
        v = np.array([getattr(c, attr) for c in supported])
        return float(np.average(v, weights=weights))

    macro = AverageMetrics(_avg("precision"), _avg("recall"), _avg("f1"), total)
    weighted = AverageMetrics(_avg("precision", sup), _avg("recall", sup), _avg("f1", sup), total)
    return ClassReport(
        per_class=per_class,
        accuracy=float(diag.sum() / total),
        balanced_accuracy=macro.recall,
        macro_avg=macro,
        weighted_avg=weighted,
        total_support=total,
        flags=flags,
    )


def accuracy(truth, pred) -> float:
    truth = np.asarray(truth)
    if truth.size == 0:
        raise EmptyEvaluationError("no rows to score")
    return float(np.mean(truth == np.asarray(pred)))


def balanced_accuracy(truth, pred) -> float:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.size == 0:
        raise EmptyEvaluationError("no rows to score")
    recalls = [float(np.mean(pred[truth == k] == k)) for k in np.unique(truth)]
    return float(np.mean(recalls))


def objective_score(truth, pred, objective: Objective) -> float:
    if Objective(objective) == Objective.BALANCED_ACCURACY:
        return balanced_accuracy(truth, pred)
    return accuracy(truth, pred)


# ── Report output ────────────────────────────────────────────────────────────

def _class_label(cid: int, names: bool) -> str:
    if names and cid in SPECIES_DICTIONARY:
        return f"{cid} {SPECIES_DICTIONARY[cid][1]}"
    return str(cid)


def format_report_text(report: ClassReport, class_names: bool = False) -> str:
    """Class-wise table (left block) followed by the overall table, 2 decimals."""
    labels = [_class_label(c.class_id, class_names) for c in report.per_class]
    w = max([5] + [len(s) for s in labels] + [len("Weighted Avg")])
    lines = [f"{'Class':<{w}}  {'Precision':>9}  {'Recall':>6}  {'F1-Score':>8}  {'Support':>7}"]
    for lbl, c in zip(labels, report.per_class):
        mark = " *" if (c.precision_undefined or c.recall_undefined) else ""
        lines.append(f"{lbl:<{w}}  {c.precision:>9.2f}  {c.recall:>6.2f}  {c.f1:>8.2f}  {c.support:>7d}{mark}")
    lines.append("")
    lines.append(f"{'Metric':<{w}}  {'Precision':>9}  {'Recall':>6}  {'F1-Score':>8}  {'Support':>7}")
    lines.append(f"{'Accuracy':<{w}}  {'':>9}  {'':>6}  {report.accuracy:>8.2f}  {report.total_support:>7d}")
    lines.append(f"{'Balanced Acc':<{w}}  {'':>9}  {'':>6}  {report.balanced_accuracy:>8.2f}  {report.total_support:>7d}")
    for name, a in (("Macro Avg", report.macro_avg), ("Weighted Avg", report.weighted_avg)):
        lines.append(f"{name:<{w}}  {a.precision:>9.2f}  {a.recall:>6.2f}  {a.f1:>8.2f}  {a.support:>7d}")
    if report.flags:
        lines.append("")
        lines.extend(f"* {f}" for f in report.flags)
    return "\n".join(lines) + "\n"


def export_report_csv(report: ClassReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["row", "precision", "recall", "f1_score", "score", "support",
                    "precision_undefined", "recall_undefined"])
        for c in report.per_class:
            w.writerow([c.class_id, repr(c.precision), repr(c.recall), repr(c.f1), "", c.support,
                        int(c.precision_undefined), int(c.recall_undefined)])
        w.writerow(["accuracy", "", "", "", repr(report.accuracy), report.total_support, "", ""])
        w.writerow(["balanced_accuracy", "", "", "", repr(report.balanced_accuracy),
                    report.total_support, "", ""])
        for name, a in (("macro_avg", report.macro_avg), ("weighted_avg", report.weighted_avg)):
            w.writerow([name, repr(a.precision), repr(a.recall), repr(a.f1), "", a.support, "", ""])


def export_report_xlsx(report: ClassReport, cm: ConfusionMatrix, path: str | Path) -> None:
    class_rows = [
        (_class_label(c.class_id, True), c.precision, c.recall, c.f1, c.support)
        for c in report.per_class
    ]
    overall_rows = [
        ("Accuracy", None, None, report.accuracy, report.total_support),
        ("Balanced Accuracy", None, None, report.balanced_accuracy, report.total_support),
        ("Macro Avg", report.macro_avg.precision, report.macro_avg.recall,
         report.macro_avg.f1, report.macro_avg.support),
        ("Weighted Avg", report.weighted_avg.precision, report.weighted_avg.recall,
         report.weighted_avg.f1, report.weighted_avg.support),
    ]
    cols = [("Class", 24), ("Precision", 12), ("Recall", 12), ("F1-Score", 12), ("Support", 12)]
    cm_cols = [("True \\ Pred", 14)] + [(str(c), 10) for c in cm.classes]
    cm_rows = [(str(c),) + tuple(int(v) for v in cm.matrix[i]) for i, c in enumerate(cm.classes)]
    save_workbook([
        ("Report", [("Class-wise metrics", cols, class_rows),
                    ("Overall metrics", cols, overall_rows)]),
        ("Confusion", [("Confusion matrix", cm_cols, cm_rows)]),
    ], path)


# ── Maps ─────────────────────────────────────────────────────────────────────

def prediction_raster(grid: tuple[int, int], x: np.ndarray, y: np.ndarray,
                      labels: np.ndarray) -> np.ndarray:
    """Scatter per-row predictions back to a (range, azimuth) uint8 raster, 0 elsewhere."""
    out = np.zeros(grid, dtype=np.uint8)
    out[np.asarray(y, dtype=np.int64), np.asarray(x, dtype=np.int64)] = np.asarray(labels, dtype=np.uint8)
    return out


def colorize(labels: np.ndarray) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.size and (lab.min() < 0 or lab.max() >= len(PALETTE)):
        raise DataError(f"labels must be 0..{len(PALETTE) - 1} for the map palette")
    return PALETTE[lab.astype(np.int64)]


def render_map(species: SpeciesMap, pred: np.ndarray, path: str | Path) -> None:
    """Binary PPM: truth panel on top, prediction panel below, white gap between."""
    pred = np.asarray(pred)
    if pred.shape != species.grid:
        raise ShapeError(f"prediction raster {pred.shape} != map grid {species.grid}")
    top = colorize(species.labels)
    bottom = colorize(pred)
    gap = np.empty((PANEL_GAP_ROWS, species.grid[1], 3), dtype=np.uint8)
    gap[:] = GAP_COLOR
    Image.fromarray(np.vstack([top, gap, bottom])).save(str(path), format="PPM")
    logger.info("Prediction map written: %s (%dx%d per panel)", path, species.grid[1], species.grid[0])


def export_probabilities(x: np.ndarray, y: np.ndarray, truth: np.ndarray, pred: np.ndarray,
                         probs: np.ndarray, classes: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label", "predicted"] + [f"p_{int(c)}" for c in classes])
        for i in range(len(pred)):
            w.writerow([int(x[i]), int(y[i]), int(truth[i]), int(pred[i])]
                       + [repr(float(v)) for v in probs[i]])
