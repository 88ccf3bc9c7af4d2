"""
Deterministic synthetic scenes: species patches, per-heading tomographic
cubes and LiDAR returns.

Species patches are Voronoi cells over seeded sites, assigned to classes by
largest remaining pixel deficit. patch_aspect scales the metric so cells run
that many times longer in azimuth than in range. Each pixel gets a canopy height from its
class profile; its vertical profile per channel is

    floor
    + a_kc * bump(center of the bin holding the canopy height)
    + understory_ratio * a_kc * bump(canopy height - crown depth)
    + ground_ratio_k * a_kc * bump(center of the bin holding 0 m)

with bump(c) = exp(-(z - c)^2 / (2 * 1.5^2)), times mean-one lognormal
noise. The NW cube covers the western 60 % of the columns, the SE cube the
eastern 60 %, each with its own noise.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.spatial import cKDTree

from tomoclass.core.errors import ConfigError
from tomoclass.services.cube_io import (
    N_CLASSES, SPECIES_PROPORTIONS, Heading, LidarPoints, PolChannel, SpeciesMap, TomoCube,
    write_cube, write_lidar, write_species_map,
)

logger = logging.getLogger(__name__)

BUMP_SIGMA_M = 1.5
PROPORTION_TOLERANCE = 0.03
NW_COVER = 0.6
SE_COVER = 0.6


def _normalized_proportions() -> dict[int, float]:
    total = sum(SPECIES_PROPORTIONS.values())
    return {k: v / total for k, v in SPECIES_PROPORTIONS.items()}


# Mean canopy height and spread (m) per class, LiDAR train statistics of the study area.
DEFAULT_HEIGHTS: dict[int, tuple[float, float]] = {
    1: (22.93, 5.20), 2: (22.47, 4.15), 3: (19.59, 6.66), 4: (17.13, 3.97),
    5: (18.77, 4.12), 6: (16.46, 6.88), 7: (17.17, 3.06), 8: (19.01, 4.19),
}

# Canopy amplitude per channel (HH, HV, VV). Class 1 stands apart; 2/3/6/7 nearly coincide.
DEFAULT_SIGNATURES: dict[int, tuple[float, float, float]] = {
    1: (1.00, 0.30, 0.80),
    2: (0.72, 0.38, 0.66),
    3: (0.68, 0.40, 0.70),
    4: (0.60, 0.50, 0.95),
    5: (0.90, 0.58, 0.48),
    6: (0.70, 0.36, 0.72),
    7: (0.74, 0.41, 0.68),
    8: (0.42, 0.22, 0.58),
}

DEFAULT_GROUND_RATIO: dict[int, float] = {
    1: 0.35, 2: 0.55, 3: 0.56, 4: 0.45, 5: 0.68, 6: 0.54, 7: 0.57, 8: 0.28,
}


class SceneConfig(BaseModel):
    n_range: int = Field(120, ge=4)
    n_azimuth: int = Field(168, ge=4)
    n_height: int = Field(36, ge=4)
    height_min_m: float = -10.0
    height_step_m: float = Field(2.0, gt=0)
    channels: list[PolChannel] = [PolChannel.HH, PolChannel.HV, PolChannel.VV]
    proportions: dict[int, float] = Field(default_factory=_normalized_proportions)
    heights: dict[int, tuple[float, float]] = Field(default_factory=lambda: dict(DEFAULT_HEIGHTS))
    signatures: dict[int, tuple[float, ...]] = Field(default_factory=lambda: dict(DEFAULT_SIGNATURES))
    ground_ratio: dict[int, float] = Field(default_factory=lambda: dict(DEFAULT_GROUND_RATIO))
    understory_ratio: float = Field(0.3, ge=0, lt=0.5)
    crown_depth_m: float = Field(6.0, gt=0)
    floor: float = Field(2e-3, ge=0)
    patch_size_px: float = Field(12.0, gt=0)
    patch_aspect: float = Field(1.0, gt=0)          # > 1 stretches stands along azimuth
    noise: float = Field(0.25, ge=0)
    unlabeled_frac: float = Field(0.0, ge=0, lt=1)
    lidar_points_per_pixel: int = Field(2, ge=1)
    seed: int = 7

    @field_validator("proportions")
    @classmethod
    def _proportions_sum(cls, v):
        if not v:
            raise ValueError("proportions must name at least one class")
        if any(k < 1 or k > N_CLASSES for k in v) or any(p < 0 for p in v.values()):
            raise ValueError(f"proportions need class ids 1..{N_CLASSES} and nonnegative shares")
        if abs(sum(v.values()) - 1.0) > 1e-6:
            raise ValueError(f"proportions must sum to 1, got {sum(v.values()):.6f}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        top = self.height_min_m + self.n_height * self.height_step_m
        for k in self.proportions:
            for table, name in ((self.heights, "heights"), (self.signatures, "signatures"),
                                (self.ground_ratio, "ground_ratio")):
                if k not in table:
                    raise ValueError(f"class {k} missing from {name}")
            mean, spread = self.heights[k]
            if not (self.height_min_m < mean < top) or spread < 0:
                raise ValueError(f"class {k} height {mean} outside axis [{self.height_min_m}, {top})")
            sig = self.signatures[k]
            if len(sig) != len(self.channels) or min(sig) <= 0:
                raise ValueError(f"class {k} needs {len(self.channels)} positive channel amplitudes")
            if not (0 <= self.ground_ratio[k] < 0.8):
                raise ValueError(f"class {k} ground_ratio must be in [0, 0.8)")
        if not (self.height_min_m < 0 < top):
            raise ValueError("height axis must contain 0 m for the ground return")
        return self

    @property
    def height_top_m(self) -> float:
        return self.height_min_m + self.n_height * self.height_step_m


@dataclass(frozen=True)
class Scene:
    config: SceneConfig
    nw: TomoCube
    se: TomoCube
    species: SpeciesMap
    lidar: LidarPoints
    canopy_height_m: np.ndarray          # float64 (range, azimuth)


# ── Generation ───────────────────────────────────────────────────────────────

def _assign_classes(cfg: SceneConfig, cell: np.ndarray, n_sites: int,
                    rng: np.random.Generator) -> np.ndarray:
    areas = np.bincount(cell.ravel(), minlength=n_sites)
    site_class = np.zeros(n_sites, dtype=np.uint8)
    order = np.argsort(-areas, kind="stable")
    n_pix = cell.size
    labeled = np.ones(n_sites, dtype=bool)
    if cfg.unlabeled_frac > 0:
        dropped = 0
        for s in rng.permutation(n_sites):
            if dropped >= cfg.unlabeled_frac * n_pix:
                break
            labeled[s] = False
            dropped += areas[s]
    n_lab = int(areas[labeled].sum())
    classes = sorted(cfg.proportions)
    target = np.array([cfg.proportions[k] * n_lab for k in classes])
    got = np.zeros(len(classes))
    for s in order:
        if not labeled[s] or areas[s] == 0:
            continue
        j = int(np.argmax(target - got))
        site_class[s] = classes[j]
        got[j] += areas[s]
    labels = site_class[cell]
    if n_lab:
        for k, t, g in zip(classes, target, got):
            if abs(g - t) / n_lab > PROPORTION_TOLERANCE:
                raise ConfigError(
                    f"class {k}: {g / n_lab:.4f} of labeled pixels vs configured "
                    f"{cfg.proportions[k]:.4f}; grid too small for these proportions "
                    f"(try a smaller patch_size_px)"
                )
    return labels


def _bump(z: np.ndarray, center: np.ndarray) -> np.ndarray:
    d = (z[None, None, :] - center[..., None]) / BUMP_SIGMA_M
    return np.exp(-0.5 * d * d)


def _bin_center(cfg: SceneConfig, h: np.ndarray) -> np.ndarray:
    idx = np.floor((h - cfg.height_min_m) / cfg.height_step_m)
    idx = np.clip(idx, 0, cfg.n_height - 1)
    return cfg.height_min_m + (idx + 0.5) * cfg.height_step_m


def _clean_profiles(cfg: SceneConfig, labels: np.ndarray, canopy: np.ndarray) -> np.ndarray:
    z = cfg.height_min_m + (np.arange(cfg.n_height) + 0.5) * cfg.height_step_m
    nc = len(cfg.channels)
    classes = sorted(cfg.proportions)
    amp = np.zeros((256, nc))
    ground = np.zeros(256)
    amp[0] = np.mean([cfg.signatures[k] for k in classes], axis=0)
    ground[0] = float(np.mean([cfg.ground_ratio[k] for k in classes]))
    for k in classes:
        amp[k] = cfg.signatures[k]
        ground[k] = cfg.ground_ratio[k]
    a = amp[labels]                                   # (range, azimuth, channel)
    g = ground[labels]
    canopy_bump = _bump(z, _bin_center(cfg, canopy))
    under_bump = _bump(z, canopy - cfg.crown_depth_m)
    ground_bump = _bump(z, _bin_center(cfg, np.zeros_like(canopy)))
    shape = canopy_bump + cfg.understory_ratio * under_bump + g[..., None] * ground_bump
    return cfg.floor + shape[..., None] * a[:, :, None, :]


def _noisy(clean: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return clean.astype(np.float32)
    z = rng.standard_normal(clean.shape)
    return (clean * np.exp(sigma * z - 0.5 * sigma * sigma)).astype(np.float32)


def generate_scene(cfg: SceneConfig) -> Scene:
    nr, na = cfg.n_range, cfg.n_azimuth
    rng_sites, rng_height, rng_nw, rng_se, rng_lidar = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)
    )

    n_sites = max(len(cfg.proportions), int(round(nr * na / cfg.patch_size_px ** 2)))
    sites = rng_sites.random((n_sites, 2)) * np.array([nr, na])
    rr, cc = np.mgrid[0:nr, 0:na]
    stretch = np.array([math.sqrt(cfg.patch_aspect), 1.0 / math.sqrt(cfg.patch_aspect)])
    _, cell = cKDTree(sites * stretch).query(
        np.column_stack([rr.ravel() + 0.5, cc.ravel() + 0.5]) * stretch)
    cell = cell.reshape(nr, na)
    labels = _assign_classes(cfg, cell, n_sites, rng_sites)

    mean = np.full(256, 18.0)
    spread = np.full(256, 5.0)
    for k, (m, s) in cfg.heights.items():
        mean[k], spread[k] = m, s
    lo = max(cfg.height_step_m, 0.0)
    hi = cfg.height_top_m - 2 * cfg.height_step_m
    canopy = mean[labels] + spread[labels] * rng_height.standard_normal((nr, na))
    canopy = np.clip(canopy, lo, hi)

    clean = _clean_profiles(cfg, labels, canopy)
    cols = np.arange(na)
    nw_valid = np.broadcast_to(cols < math.ceil(NW_COVER * na), (nr, na))
    se_valid = np.broadcast_to(cols >= math.floor((1.0 - SE_COVER) * na), (nr, na))
    common = dict(channels=tuple(cfg.channels), height_min_m=cfg.height_min_m,
                  height_step_m=cfg.height_step_m, band="P")
    nw = TomoCube(intensity=_noisy(clean, cfg.noise, rng_nw), heading=Heading.NW,
                  valid=nw_valid, **common)
    se = TomoCube(intensity=_noisy(clean, cfg.noise, rng_se), heading=Heading.SE,
                  valid=se_valid, **common)

    k = cfg.lidar_points_per_pixel
    rows = np.repeat(rr.ravel(), k)
    colz = np.repeat(cc.ravel(), k)
    z = np.repeat(canopy.ravel(), k) + rng_lidar.uniform(-0.5, 0.5, rows.size)
    pts = np.column_stack([
        colz + rng_lidar.random(rows.size),
        rows + rng_lidar.random(rows.size),
        z,
    ])

    species = SpeciesMap(labels=labels)
    counts = species.class_counts()
    logger.info(
        "Synthetic scene %dx%d, seed %d: %d patches, class pixels %s",
        nr, na, cfg.seed, n_sites, counts,
    )
    return Scene(config=cfg, nw=nw, se=se, species=species,
                 lidar=LidarPoints(points=pts), canopy_height_m=canopy)


# ── Output ───────────────────────────────────────────────────────────────────

SCENE_FILES = {
    "nw": "cube_nw.tomo",
    "se": "cube_se.tomo",
    "labels": "labels.lbl",
    "lidar": "lidar.txt",
    "truth": "truth_heights.csv",
    "config": "scene.json",
}


def write_scene(scene: Scene, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in SCENE_FILES.items()}
    write_cube(scene.nw, paths["nw"])
    write_cube(scene.se, paths["se"])
    write_species_map(scene.species, paths["labels"])
    write_lidar(scene.lidar, paths["lidar"], header=f"synthetic scene seed {scene.config.seed}")
    write_truth_heights(scene, paths["truth"])
    paths["config"].write_text(
        json.dumps(scene.config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    logger.info("Scene written to %s", out)
    return paths


def write_truth_heights(scene: Scene, path: str | Path) -> None:
    lab = scene.species.labels
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "class_id", "canopy_height_m"])
        nr, na = lab.shape
        for r in range(nr):
            for c in range(na):
                w.writerow([c, r, int(lab[r, c]), repr(float(scene.canopy_height_m[r, c]))])


def read_truth_heights(path: str | Path, grid: tuple[int, int]) -> np.ndarray:
    out = np.full(grid, np.nan)
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out[int(row["y"]), int(row["x"])] = float(row["canopy_height_m"])
    return out


def nearest_centroid_oracle(profiles: np.ndarray, labels: np.ndarray,
                            train: np.ndarray, test: np.ndarray) -> np.ndarray:
    """
    Nearest class centroid on per-channel profile energy (sum over height).

    profiles (n, n_height, n_channels); train/test boolean row selectors.
    Returns predicted class ids for the test rows.
    """
    energy = np.nansum(profiles, axis=1)
    classes = np.unique(labels[train])
    centroids = np.vstack([energy[train & (labels == k)].mean(axis=0) for k in classes])
    d = ((energy[test][:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return classes[np.argmin(d, axis=1)]
