"""
Spatially contiguous train/test partitions.

Two layouts: a single swath (band of columns, or rows when horizontal)
covering a fraction of the width, and randomly placed non-touching squares
whose side is a fraction of the width. Fractions are measured over labeled,
non-excluded pixels.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from tomoclass.core.errors import (
    FormatError, ParameterError, SaturationError, ShapeError, SplitFractionError,
)
from tomoclass.services.cube_io import SpeciesMap, read_label_raster, write_label_raster
from tomoclass.utils.validators import check_open_fraction, round_half_up

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.02
MAX_SQUARE_ATTEMPTS = 10_000
_EPS = 1e-12

# 4-connectivity for component counting
_FOUR = ndimage.generate_binary_structure(2, 1)


class Assignment(IntEnum):
    EXCLUDED = 0
    TRAIN = 1
    TEST = 2


class SplitMethod(str, Enum):
    SWATH = "swath"
    SQUARE = "square"


@dataclass(frozen=True)
class SplitMask:
    assignment: np.ndarray              # uint8 (range, azimuth) of Assignment codes
    method: SplitMethod
    seed: int
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.uint8)
        if a.ndim != 2:
            raise ShapeError(f"split mask must be 2-D, got {a.shape}")
        if a.size and a.max() > Assignment.TEST:
            raise FormatError(f"split mask codes must be 0..2, got {int(a.max())}")
        a = np.array(a, copy=True)
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "method", SplitMethod(self.method))

    @property
    def grid(self) -> tuple[int, int]:
        return self.assignment.shape

    @property
    def train(self) -> np.ndarray:
        return self.assignment == Assignment.TRAIN

    @property
    def test(self) -> np.ndarray:
        return self.assignment == Assignment.TEST


@dataclass
class ClassSplitCounts:
    train: int = 0
    test: int = 0
    excluded: int = 0


@dataclass
class SplitReport:
    per_class: dict[int, ClassSplitCounts]
    test_fraction: float
    n_test_components: int
    labeled_total: int
    warnings: list[str] = field(default_factory=list)

    def as_rows(self) -> list[dict]:
        return [
            {"class_id": k, "train": c.train, "test": c.test, "excluded": c.excluded}
            for k, c in sorted(self.per_class.items())
        ]


def _labeled_test_fraction(assignment: np.ndarray, labeled: np.ndarray) -> float:
    used = labeled & (assignment != Assignment.EXCLUDED)
    n = int(used.sum())
    if n == 0:
        return 0.0
    return float((used & (assignment == Assignment.TEST)).sum()) / n


def _apply_buffer(assignment: np.ndarray, buffer_px: int) -> np.ndarray:
    """Mark TRAIN pixels within buffer_px (Chebyshev) of TEST as EXCLUDED."""
    if buffer_px <= 0:
        return assignment
    near = ndimage.binary_dilation(
        assignment == Assignment.TEST, structure=np.ones((3, 3), bool), iterations=buffer_px,
    )
    out = assignment.copy()
    out[near & (assignment == Assignment.TRAIN)] = Assignment.EXCLUDED
    return out


# ── Swath ────────────────────────────────────────────────────────────────────

def swath_split(
    species: SpeciesMap,
    test_width_frac: float = 0.20,
    seed: int = 0,
    horizontal: bool = False,
    buffer_px: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
) -> SplitMask:
    check_open_fraction("test_width_frac", test_width_frac)
    nr, na = species.grid
    extent = nr if horizontal else na
    width = round_half_up(test_width_frac * extent)
    if width < 1 or width >= extent:
        raise ParameterError(
            f"swath of {width} {'rows' if horizontal else 'columns'} does not fit a grid "
            f"{extent} wide (test_width_frac={test_width_frac})"
        )
    labeled = species.labels != 0
    rng = np.random.default_rng(seed)
    starts = rng.permutation(extent - width + 1)

    achieved = 0.0
    for start in starts:
        a = np.full((nr, na), Assignment.TRAIN, dtype=np.uint8)
        if horizontal:
            a[start:start + width, :] = Assignment.TEST
        else:
            a[:, start:start + width] = Assignment.TEST
        a = _apply_buffer(a, buffer_px)
        achieved = _labeled_test_fraction(a, labeled)
        if abs(achieved - test_width_frac) <= tolerance + _EPS:
            logger.info(
                "Swath split: start=%d width=%d (%s), labeled test fraction %.4f",
                int(start), width, "rows" if horizontal else "columns", achieved,
            )
            return SplitMask(
                assignment=a,
                method=SplitMethod.SWATH,
                seed=int(seed),
                params={
                    "test_width_frac": float(test_width_frac),
                    "width": int(width),
                    "start": int(start),
                    "horizontal": bool(horizontal),
                    "buffer_px": int(buffer_px),
                    "tolerance": float(tolerance),
                },
            )
    raise SplitFractionError(
        f"no swath position gives a labeled test fraction within {tolerance} of "
        f"{test_width_frac} (last {achieved:.4f})",
        achieved,
    )


# ── Squares ──────────────────────────────────────────────────────────────────

def square_split(
    species: SpeciesMap,
    square_side_frac: float = 0.05,
    target_test_frac: float = 0.20,
    seed: int = 0,
    buffer_px: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    max_attempts: int = MAX_SQUARE_ATTEMPTS,
) -> SplitMask:
    check_open_fraction("square_side_frac", square_side_frac)
    check_open_fraction("target_test_frac", target_test_frac)
    nr, na = species.grid
    side = round_half_up(square_side_frac * na)
    if side < 1 or side > nr or side > na:
        raise ParameterError(f"square side {side} px does not fit grid {nr}x{na}")
    labeled = species.labels != 0
    n_labeled = int(labeled.sum())
    if n_labeled == 0:
        raise ParameterError("species map has no labeled pixels")
    # Packing bound with a one-pixel gap between squares.
    packable = ((nr + 1) // (side + 1)) * ((na + 1) // (side + 1)) * side * side
    if target_test_frac - tolerance > packable / float(nr * na) + _EPS:
        raise ParameterError(
            f"target {target_test_frac} unreachable with non-touching {side}px squares "
            f"(at most {packable / float(nr * na):.3f} of the grid)"
        )

    rng = np.random.default_rng(seed)
    test = np.zeros((nr, na), dtype=bool)
    near = np.zeros((nr, na), dtype=bool)        # TEST dilated by buffer_px
    labeled_cum = np.pad(np.cumsum(np.cumsum(labeled, axis=0), axis=1), ((1, 0), (1, 0)))
    squares: list[tuple[int, int]] = []
    n_test = 0
    n_excluded = 0
    achieved = 0.0
    attempts = 0
    while attempts < max_attempts:
        attempts += 1
        r0 = int(rng.integers(0, nr - side + 1))
        c0 = int(rng.integers(0, na - side + 1))
        # Reject overlap and 4-adjacency so each square stays its own component.
        if test[max(r0 - 1, 0):r0 + side + 1, c0:c0 + side].any() or \
                test[r0:r0 + side, max(c0 - 1, 0):c0 + side + 1].any():
            continue
        gain = int(labeled_cum[r0 + side, c0 + side] - labeled_cum[r0, c0 + side]
                   - labeled_cum[r0 + side, c0] + labeled_cum[r0, c0])
        excluded = n_excluded
        if buffer_px > 0:
            # Only the square's Chebyshev neighbourhood changes state.
            wr = slice(max(r0 - buffer_px, 0), r0 + side + buffer_px)
            wc = slice(max(c0 - buffer_px, 0), c0 + side + buffer_px)
            lab_w, test_w = labeled[wr, wc], test[wr, wc]
            sq_w = np.zeros_like(test_w)
            sq_w[r0 - wr.start:r0 - wr.start + side, c0 - wc.start:c0 - wc.start + side] = True
            before = int((lab_w & near[wr, wc] & ~test_w).sum())
            after = int((lab_w & ~test_w & ~sq_w).sum())
            excluded += after - before
        used = n_labeled - excluded
        frac = (n_test + gain) / used if used > 0 else 1.0
        if frac > target_test_frac + tolerance + _EPS:
            continue
        test[r0:r0 + side, c0:c0 + side] = True
        if buffer_px > 0:
            near[wr, wc] = True
        squares.append((r0, c0))
        n_test += gain
        n_excluded = excluded
        achieved = frac
        if achieved >= target_test_frac - _EPS:
            break

    if achieved < target_test_frac - tolerance - _EPS:
        raise SaturationError(
            f"square placement saturated after {attempts} attempts: "
            f"{len(squares)} squares, labeled test fraction {achieved:.4f} "
            f"(target {target_test_frac} ± {tolerance})",
            achieved,
        )
    a = np.where(test, Assignment.TEST, Assignment.TRAIN).astype(np.uint8)
    a = _apply_buffer(a, buffer_px)
    achieved = _labeled_test_fraction(a, labeled)
    if abs(achieved - target_test_frac) > tolerance + _EPS:
        raise SplitFractionError(
            f"buffered square split reaches labeled test fraction {achieved:.4f}, "
            f"outside {target_test_frac} ± {tolerance}",
            achieved,
        )
    logger.info(
        "Square split: %d squares of %dpx in %d attempts, labeled test fraction %.4f",
        len(squares), side, attempts, achieved,
    )
    return SplitMask(
        assignment=a,
        method=SplitMethod.SQUARE,
        seed=int(seed),
        params={
            "square_side_frac": float(square_side_frac),
            "target_test_frac": float(target_test_frac),
            "side": int(side),
            "n_squares": len(squares),
            "buffer_px": int(buffer_px),
            "tolerance": float(tolerance),
        },
    )


# ── Validation ───────────────────────────────────────────────────────────────

def count_test_components(mask: SplitMask) -> int:
    _, n = ndimage.label(mask.test, structure=_FOUR)
    return int(n)


def validate_split(mask: SplitMask, species: SpeciesMap) -> SplitReport:
    if mask.grid != species.grid:
        raise ShapeError(f"mask grid {mask.grid} != species grid {species.grid}")
    lab = species.labels
    a = mask.assignment
    per_class: dict[int, ClassSplitCounts] = {}
    for k in np.unique(lab[lab != 0]):
        sel = lab == k
        per_class[int(k)] = ClassSplitCounts(
            train=int((sel & (a == Assignment.TRAIN)).sum()),
            test=int((sel & (a == Assignment.TEST)).sum()),
            excluded=int((sel & (a == Assignment.EXCLUDED)).sum()),
        )
    warnings = []
    for k, c in sorted(per_class.items()):
        if c.train == 0 and c.test > 0:
            warnings.append(f"class {k} absent from train")
        if c.test == 0 and c.train > 0:
            warnings.append(f"class {k} absent from test")
    for w in warnings:
        logger.warning("validate_split: %s", w)
    return SplitReport(
        per_class=per_class,
        test_fraction=_labeled_test_fraction(a, lab != 0),
        n_test_components=count_test_components(mask),
        labeled_total=int((lab != 0).sum()),
        warnings=warnings,
    )


# ── Persistence ──────────────────────────────────────────────────────────────

def _meta_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def write_mask(mask: SplitMask, path: str | Path) -> None:
    write_label_raster(mask.assignment, path)
    _meta_path(path).write_text(
        json.dumps(
            {"method": mask.method.value, "seed": mask.seed, "params": mask.params},
            indent=2, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )


def read_mask(path: str | Path) -> SplitMask:
    a, _ = read_label_raster(path)
    meta_p = _meta_path(path)
    if not meta_p.exists():
        raise FormatError(f"{path}: missing split sidecar {meta_p.name}")
    try:
        meta = json.loads(meta_p.read_text(encoding="utf-8"))
        return SplitMask(assignment=a, method=meta["method"], seed=int(meta["seed"]),
                         params=dict(meta.get("params", {})))
    except (KeyError, ValueError) as e:
        raise FormatError(f"{meta_p}: bad split sidecar: {e}")
