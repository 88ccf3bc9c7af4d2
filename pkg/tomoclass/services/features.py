"""
Voxel cube -> labeled feature table.

Column order: channel-major in the order the FeatureSpec lists channels,
height bin ascending within a channel (f_<CH>_<bin>), then f_x and f_y when
requested. Rows follow row-major pixel order (range, then azimuth).
"""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, field_validator

from tomoclass.core.errors import ChannelError, DataError, FormatError, ShapeError
from tomoclass.services.cube_io import PolChannel, SpeciesMap, TomoCube
from tomoclass.services.geosplit import Assignment, SplitMask

logger = logging.getLogger(__name__)

SPLIT_NAMES = {Assignment.TRAIN: "train", Assignment.TEST: "test"}


class Scale(str, Enum):
    LINEAR = "linear"
    DB = "db"


class FeatureSpec(BaseModel):
    channels: list[PolChannel] = [PolChannel.HH, PolChannel.HV, PolChannel.VV]
    include_xy: bool = False
    scale: Scale = Scale.LINEAR
    db_floor: float = -60.0

    @field_validator("channels")
    @classmethod
    def _channels_nonempty(cls, v):
        if not v:
            raise ValueError("channels must be nonempty")
        if len(set(v)) != len(v):
            raise ValueError("channels must not repeat")
        return v

    @field_validator("db_floor")
    @classmethod
    def _finite_floor(cls, v):
        if not math.isfinite(v):
            raise ValueError("db_floor must be finite")
        return v


@dataclass(frozen=True)
class FeatureTable:
    columns: tuple[str, ...]
    X: np.ndarray          # float64 (n, d)
    labels: np.ndarray     # int64 (n,), class ids 1..8
    x: np.ndarray          # int64 azimuth index
    y: np.ndarray          # int64 range index
    split: np.ndarray      # uint8 Assignment codes (TRAIN/TEST)

    def __post_init__(self):
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise ShapeError(f"feature matrix {self.X.shape} vs {len(self.columns)} columns")
        for name in ("labels", "x", "y", "split"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have {n} entries")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.columns)

    def subset(self, rows: np.ndarray) -> "FeatureTable":
        return FeatureTable(
            columns=self.columns,
            X=self.X[rows],
            labels=self.labels[rows],
            x=self.x[rows],
            y=self.y[rows],
            split=self.split[rows],
        )

    def train(self) -> "FeatureTable":
        return self.subset(self.split == Assignment.TRAIN)

    def test(self) -> "FeatureTable":
        return self.subset(self.split == Assignment.TEST)


def schema_hash(columns) -> str:
    return hashlib.sha256("\n".join(columns).encode("utf-8")).hexdigest()[:16]


def feature_columns(spec: FeatureSpec, n_height: int) -> tuple[str, ...]:
    cols = [f"f_{ch.value}_{b}" for ch in spec.channels for b in range(n_height)]
    if spec.include_xy:
        cols += ["f_x", "f_y"]
    return tuple(cols)


def to_db(v: np.ndarray, db_floor: float) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(v, 10.0 ** (db_floor / 10.0)))


def _block_features(cube: TomoCube, rows: np.ndarray, cols: np.ndarray,
                    ch_idx: list[int], spec: FeatureSpec) -> np.ndarray:
    vox = cube.intensity[rows, cols]                 # (n, n_height, n_channels)
    feats = vox[:, :, ch_idx].transpose(0, 2, 1).reshape(len(rows), -1).astype(np.float64)
    if spec.scale == Scale.DB:
        feats = to_db(feats, spec.db_floor)
    if spec.include_xy:
        feats = np.hstack([feats, cols[:, None].astype(np.float64), rows[:, None].astype(np.float64)])
    return feats


def build_table(
    cube: TomoCube,
    species: SpeciesMap,
    mask: SplitMask,
    spec: Optional[FeatureSpec] = None,
    n_jobs: int = 1,
    block_rows: int = 64,
) -> FeatureTable:
    spec = spec or FeatureSpec()
    if not (cube.grid == species.grid == mask.grid):
        raise ShapeError(f"grids disagree: cube {cube.grid}, map {species.grid}, mask {mask.grid}")
    missing = [ch.value for ch in spec.channels if ch not in cube.channels]
    if missing:
        raise ChannelError(f"channels {missing} not in cube {[c.value for c in cube.channels]}")
    ch_idx = [cube.channel_index(ch) for ch in spec.channels]

    keep = (species.labels != 0) & cube.valid & (mask.assignment != Assignment.EXCLUDED)
    rows, cols = np.nonzero(keep)                    # row-major order
    columns = feature_columns(spec, cube.n_height)

    if len(rows) == 0:
        X = np.zeros((0, len(columns)))
    else:
        # Blocks of range lines; concatenation order matches the sequential scan.
        bounds = np.searchsorted(rows, np.arange(0, cube.n_range + block_rows, block_rows))
        spans = [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        parts = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_block_features)(cube, rows[a:b], cols[a:b], ch_idx, spec) for a, b in spans
        )
        X = np.vstack(parts)

    table = FeatureTable(
        columns=columns,
        X=X,
        labels=species.labels[rows, cols].astype(np.int64),
        x=cols.astype(np.int64),
        y=rows.astype(np.int64),
        split=mask.assignment[rows, cols].astype(np.uint8),
    )
    logger.info(
        "Feature table: %d rows (%d train / %d test), %d columns",
        len(table), int((table.split == Assignment.TRAIN).sum()),
        int((table.split == Assignment.TEST).sum()), len(columns),
    )
    return table


def class_counts(table: FeatureTable) -> dict[int, int]:
    if len(table) == 0:
        return {}
    ids, counts = np.unique(table.labels, return_counts=True)
    return {int(k): int(c) for k, c in zip(ids, counts)}


def holdout_split(table: FeatureTable, frac: float = 0.2,
                  seed: int = 0) -> tuple["FeatureTable", "FeatureTable"]:
    """Seeded random (fit, validation) partition of a table's rows."""
    n = len(table)
    if n < 2:
        raise DataError("need at least 2 rows for a holdout split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(frac * n))), n - 1)
    val_rows = np.sort(perm[:n_val])
    fit_rows = np.sort(perm[n_val:])
    return table.subset(fit_rows), table.subset(val_rows)


# ── CSV ──────────────────────────────────────────────────────────────────────

def export_table_csv(table: FeatureTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(list(table.columns) + ["x", "y", "label", "split"])
        for i in range(len(table)):
            w.writerow(
                [repr(float(v)) for v in table.X[i]]
                + [int(table.x[i]), int(table.y[i]), int(table.labels[i]),
                   SPLIT_NAMES[Assignment(int(table.split[i]))]]
            )


def import_table_csv(path: str | Path) -> FeatureTable:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty feature CSV")
        if len(header) < 4 or header[-2:] != ["label", "split"]:
            raise FormatError(f"{path}: header must end with x, y, label, split")
        columns = tuple(header[:-4])
        split_codes = {v: k for k, v in SPLIT_NAMES.items()}
        X, xs, ys, labels, split = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: {len(row)} fields, expected {len(header)}")
            try:
                X.append([float(v) for v in row[:-4]])
                xs.append(int(row[-4]))
                ys.append(int(row[-3]))
                labels.append(int(row[-2]))
                split.append(int(split_codes[row[-1]]))
            except (ValueError, KeyError) as e:
                raise FormatError(f"{path}:{lineno}: {e}")
    return FeatureTable(
        columns=columns,
        X=np.array(X, dtype=np.float64).reshape(len(X), len(columns)),
        labels=np.array(labels, dtype=np.int64),
        x=np.array(xs, dtype=np.int64),
        y=np.array(ys, dtype=np.int64),
        split=np.array(split, dtype=np.uint8),
    )
