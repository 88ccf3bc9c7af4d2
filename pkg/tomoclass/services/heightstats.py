"""
LiDAR-referenced height analysis.

  - per (class, split) canopy height statistics with the tomographic height
    error (rmse of estimate minus LiDAR CHM over the same pixels)
  - Gaussian KDE curves (Silverman bandwidth) and box statistics for violin
    plots, exported as CSV
  - tomographic height estimate: top edge of the highest height bin within
    rel_threshold_db of the profile peak

Kurtosis is Fisher excess with population moments. Quartiles interpolate
linearly between order statistics (numpy "linear", type 7).
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde, kurtosis

from tomoclass.core.errors import BandwidthError, ShapeError, StatisticError
from tomoclass.services.cube_io import SPECIES_DICTIONARY, HeightRaster, PolChannel, SpeciesMap, TomoCube
from tomoclass.services.geosplit import Assignment, SplitMask
from tomoclass.utils.xlsx import save_workbook

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD_DB = -3.0
KDE_GRID_POINTS = 512
KDE_CUT = 4.0
SPLIT_ORDER = (Assignment.TEST, Assignment.TRAIN)
SPLIT_NAMES = {Assignment.TRAIN: "Train", Assignment.TEST: "Test"}

ProfileSource = Union[str, PolChannel]      # "first", "mean" or a channel


@dataclass
class HeightStatsRow:
    class_id: int
    split: str
    n: int
    min_m: float
    max_m: float
    mean_m: float
    std_m: float
    excess_kurtosis: Optional[float]
    rmse_m: Optional[float]
    flags: list[str] = field(default_factory=list)


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth_m: float

    def integral(self) -> float:
        return float(trapezoid(self.density, self.grid))


@dataclass
class BoxStats:
    n: int
    minimum: float
    whisker_low: float
    q1: float
    median: float
    q3: float
    whisker_high: float
    maximum: float
    n_outliers: int


@dataclass
class ViolinBlock:
    class_id: int
    split: str
    box: BoxStats
    curve: Optional[DensityCurve]
    flag: str = ""


# ── Statistics ───────────────────────────────────────────────────────────────

def excess_kurtosis(samples) -> float:
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 4:
        raise StatisticError(f"kurtosis needs n >= 4, got {s.size}")
    if np.var(s) == 0.0:
        raise StatisticError("kurtosis undefined for zero variance")
    return float(kurtosis(s, fisher=True, bias=True))


def silverman_bandwidth(samples) -> float:
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise BandwidthError(f"bandwidth needs n >= 2, got {s.size}")
    std = float(np.std(s, ddof=1))
    q1, q3 = np.percentile(s, [25, 75])
    iqr = float(q3 - q1)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if not spread > 0:
        raise BandwidthError("samples have no spread; KDE bandwidth is zero")
    return 0.9 * spread * s.size ** (-0.2)


def kde(samples, grid_points: int = KDE_GRID_POINTS, cut: float = KDE_CUT) -> DensityCurve:
    s = np.asarray(samples, dtype=np.float64).ravel()
    h = silverman_bandwidth(s)
    grid = np.linspace(s.min() - cut * h, s.max() + cut * h, int(grid_points))
    # gaussian_kde scales its factor by the sample std (ddof=1).
    est = gaussian_kde(s, bw_method=h / float(np.std(s, ddof=1)))
    return DensityCurve(grid=grid, density=est(grid), bandwidth_m=h)


def box_stats(samples) -> BoxStats:
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if s.size == 0:
        raise StatisticError("box statistics need at least one sample")
    q1, med, q3 = np.percentile(s, [25, 50, 75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = s[(s >= lo_fence) & (s <= hi_fence)]
    return BoxStats(
        n=int(s.size), minimum=float(s[0]),
        whisker_low=float(inside.min()), q1=float(q1), median=float(med), q3=float(q3),
        whisker_high=float(inside.max()), maximum=float(s[-1]),
        n_outliers=int(s.size - inside.size),
    )


# ── Height estimation ────────────────────────────────────────────────────────

def estimate_height(profile, height_min: float, step: float,
                    rel_threshold_db: float = DEFAULT_THRESHOLD_DB) -> float:
    """Top edge of the highest bin >= peak * 10^(db/10); NaN when the profile is empty."""
    p = np.asarray(profile, dtype=np.float64)
    if p.size == 0 or np.all(np.isnan(p)):
        return math.nan
    peak = np.nanmax(p)
    if not peak > 0:
        return math.nan
    above = np.nonzero(p >= peak * 10.0 ** (rel_threshold_db / 10.0))[0]
    return float(height_min + (above[-1] + 1) * step)


def _profiles(cube: TomoCube, source: ProfileSource) -> np.ndarray:
    if source == "mean":
        return cube.intensity.mean(axis=3, dtype=np.float64)
    ch = cube.channels[0] if source == "first" else PolChannel(source)
    return cube.intensity[:, :, :, cube.channel_index(ch)].astype(np.float64)


def estimate_height_raster(cube: TomoCube, source: ProfileSource = "first",
                           rel_threshold_db: float = DEFAULT_THRESHOLD_DB) -> HeightRaster:
    prof = _profiles(cube, source)                   # (range, azimuth, height)
    with np.errstate(invalid="ignore"):
        peak = np.where(np.isnan(prof), -np.inf, prof).max(axis=2)
        hit = prof >= (peak * 10.0 ** (rel_threshold_db / 10.0))[..., None]
    top = cube.n_height - 1 - np.argmax(hit[..., ::-1], axis=2)
    est = cube.height_min_m + (top + 1) * cube.height_step_m
    est = np.where(cube.valid & (peak > 0), est, np.nan)
    return HeightRaster(height_m=est)


# ── Per-class tables ─────────────────────────────────────────────────────────

def _groups(chm: HeightRaster, species: SpeciesMap, mask: SplitMask,
            labels: Optional[np.ndarray]):
    if not (chm.grid == species.grid == mask.grid):
        raise ShapeError(f"grids disagree: chm {chm.grid}, map {species.grid}, mask {mask.grid}")
    lab = species.labels if labels is None else np.asarray(labels)
    if lab.shape != species.grid:
        raise ShapeError(f"grouping raster {lab.shape} != map grid {species.grid}")
    # Pixels need ground truth even when grouped by predicted class.
    base = chm.valid & (species.labels != 0) & (lab != 0)
    for k in sorted(int(v) for v in np.unique(lab[base])):
        for split in SPLIT_ORDER:
            sel = base & (lab == k) & (mask.assignment == split)
            if sel.any():
                yield k, split, sel


def _stats_row(k: int, split: Assignment, sel: np.ndarray, chm: HeightRaster,
               est: HeightRaster) -> HeightStatsRow:
    h = chm.height_m[sel]
    flags = []
    try:
        kurt = excess_kurtosis(h)
    except StatisticError as e:
        kurt = None
        flags.append(f"kurtosis: {e}")
    e_sel = sel & est.valid
    if e_sel.any():
        d = est.height_m[e_sel] - chm.height_m[e_sel]
        rmse = float(np.sqrt(np.mean(d * d)))
    else:
        rmse = None
        flags.append("rmse: no valid height estimate")
    return HeightStatsRow(
        class_id=k, split=SPLIT_NAMES[split], n=int(h.size),
        min_m=float(h.min()), max_m=float(h.max()), mean_m=float(h.mean()), std_m=float(h.std()),
        excess_kurtosis=kurt, rmse_m=rmse, flags=flags,
    )


def class_height_stats(chm: HeightRaster, species: SpeciesMap, mask: SplitMask,
                       est: HeightRaster, labels: Optional[np.ndarray] = None) -> list[HeightStatsRow]:
    """
    Rows ordered by class id, then Test before Train. `labels` regroups the
    pixels (e.g. by predicted class); the default groups by ground truth.
    """
    if est.grid != chm.grid:
        raise ShapeError(f"estimate grid {est.grid} != chm grid {chm.grid}")
    rows = [_stats_row(k, s, sel, chm, est) for k, s, sel in _groups(chm, species, mask, labels)]
    logger.info("Height statistics: %d (class, split) rows", len(rows))
    return rows


def _violin_block(k, split, h, grid_points, cut) -> ViolinBlock:
    box = box_stats(h)
    try:
        return ViolinBlock(k, SPLIT_NAMES[split], box, kde(h, grid_points, cut))
    except BandwidthError as e:
        return ViolinBlock(k, SPLIT_NAMES[split], box, None, flag=str(e))


def violin_data(chm: HeightRaster, species: SpeciesMap, mask: SplitMask,
                labels: Optional[np.ndarray] = None, grid_points: int = KDE_GRID_POINTS,
                cut: float = KDE_CUT, n_jobs: int = 1) -> list[ViolinBlock]:
    groups = [(k, s, chm.height_m[sel]) for k, s, sel in _groups(chm, species, mask, labels)]
    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_violin_block)(k, s, h, grid_points, cut) for k, s, h in groups
    )


# ── Output ───────────────────────────────────────────────────────────────────

def _name(k: int) -> str:
    return SPECIES_DICTIONARY[k][1] if k in SPECIES_DICTIONARY else str(k)


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.2f}"


STATS_HEADER = ["Tree Name", "Min (m)", "Max (m)", "Mean (m)", "Std Dev (m)",
                "Kurtosis", "RMSE (m)", "Split"]


def format_stats_text(rows: Sequence[HeightStatsRow]) -> str:
    body = [[_name(r.class_id), _fmt(r.min_m), _fmt(r.max_m), _fmt(r.mean_m), _fmt(r.std_m),
             _fmt(r.excess_kurtosis), _fmt(r.rmse_m), r.split] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(STATS_HEADER, *body)]
    out = []
    for line in [STATS_HEADER] + body:
        cells = [str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(line, widths))]
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


def export_stats_csv(rows: Sequence[HeightStatsRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "class_name", "split", "n", "min_m", "max_m", "mean_m", "std_m",
                    "excess_kurtosis", "rmse_m", "flags"])
        for r in rows:
            w.writerow([r.class_id, _name(r.class_id), r.split, r.n, repr(r.min_m), repr(r.max_m),
                        repr(r.mean_m), repr(r.std_m),
                        "" if r.excess_kurtosis is None else repr(r.excess_kurtosis),
                        "" if r.rmse_m is None else repr(r.rmse_m), "; ".join(r.flags)])


def export_stats_xlsx(rows: Sequence[HeightStatsRow], path: str | Path,
                      title: str = "LiDAR height statistics") -> None:
    cols = [("Tree Name", 44)] + [(h, 12) for h in STATS_HEADER[1:]] + [("n", 10)]
    body = [(_name(r.class_id), r.min_m, r.max_m, r.mean_m, r.std_m, r.excess_kurtosis,
             r.rmse_m, r.split, r.n) for r in rows]
    save_workbook([("Height stats", [(title, cols, body)])], path)


def export_violin_csv(blocks: Sequence[ViolinBlock], path: str | Path) -> None:
    """record=box rows carry quartiles/whiskers, record=curve rows the KDE, record=flag degenerate groups."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["record", "class_id", "split", "name", "height_m", "value"])
        for b in blocks:
            box = b.box
            for name in ("n", "minimum", "whisker_low", "q1", "median", "q3",
                         "whisker_high", "maximum", "n_outliers"):
                w.writerow(["box", b.class_id, b.split, name, "", repr(getattr(box, name))])
            if b.curve is None:
                w.writerow(["flag", b.class_id, b.split, "density", "", b.flag])
                continue
            w.writerow(["box", b.class_id, b.split, "bandwidth_m", "", repr(b.curve.bandwidth_m)])
            for g, d in zip(b.curve.grid, b.curve.density):
                w.writerow(["curve", b.class_id, b.split, "density", repr(float(g)), repr(float(d))])
