"""
Cube, label-raster and LiDAR I/O.

Formats (all little-endian):

  TOMO1 cube     "TOMO1\\0", u32 n_range, n_azimuth, n_height, n_channels,
                 f32 height_min_m, f32 height_step_m, u8 heading,
                 u8 band length + band bytes, u8 per channel code,
                 f32 payload in C order (range, azimuth, height, channel).
                 NaN marks nodata.
  LBL1 raster    "LBL1\\0", u32 n_range, u32 n_azimuth, u8 payload, then an
                 optional "DICT" + u32 length + UTF-8 JSON class dictionary.
  LiDAR text     one "x y z" triple per line, '#' starts a comment.

Grid frame: x is the azimuth index, y the range index.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from tomoclass.core.errors import (
    DomainError, FormatError, HeaderError, ShapeError, TruncationError,
)

logger = logging.getLogger(__name__)

CUBE_MAGIC = b"TOMO1\0"
LABEL_MAGIC = b"LBL1\0"
DICT_MAGIC = b"DICT"
NODATA_LABEL = 0
N_CLASSES = 8


class PolChannel(str, Enum):
    HH = "HH"
    HV = "HV"
    VV = "VV"

    @property
    def code(self) -> int:
        return _CHANNEL_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "PolChannel":
        for ch, c in _CHANNEL_CODES.items():
            if c == code:
                return ch
        raise HeaderError(f"unknown channel code {code}")


_CHANNEL_CODES = {PolChannel.HH: 0, PolChannel.HV: 1, PolChannel.VV: 2}


class Heading(str, Enum):
    NW = "NW"
    SE = "SE"
    MERGED = "MERGED"

    @property
    def code(self) -> int:
        return ("NW", "SE", "MERGED").index(self.value)

    @classmethod
    def from_code(cls, code: int) -> "Heading":
        try:
            return cls(("NW", "SE", "MERGED")[code])
        except IndexError:
            raise HeaderError(f"unknown heading code {code}")


# ── Forest types of the study area (index → code, name) ─────────────────────

SPECIES_DICTIONARY: dict[int, tuple[str, str]] = {
    1: ("AA0", "Aspen forest"),
    2: ("AA1", "Pine forest"),
    3: ("AA2", "Beech forest with deciduous woods"),
    4: ("AB0", "Douglas fir forest"),
    5: ("AJ0", "Mixed spruce forest with native deciduous woods"),
    6: ("AJ1", "Oak-beech forest"),
    7: ("AK0", "Oak forest"),
    8: ("AS0", "Beech forest"),
}

# Pixel shares of the study area, same order as the dictionary.
SPECIES_PROPORTIONS: dict[int, float] = {
    1: 0.6034, 2: 0.0487, 3: 0.0270, 4: 0.1086,
    5: 0.1698, 6: 0.0243, 7: 0.0081, 8: 0.0100,
}


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


# ── Domain types ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TomoCube:
    intensity: np.ndarray               # float32 (range, azimuth, height, channel)
    channels: tuple[PolChannel, ...]
    height_min_m: float
    height_step_m: float
    band: str = "P"
    heading: Heading = Heading.MERGED
    valid: np.ndarray = field(default=None)  # bool (range, azimuth)

    def __post_init__(self):
        inten = np.asarray(self.intensity, dtype=np.float32)
        if inten.ndim != 4:
            raise ShapeError(f"intensity must be 4-D, got shape {inten.shape}")
        nr, na, nh, nc = inten.shape
        if min(nr, na, nh, nc) < 1:
            raise ShapeError(f"cube dimensions must be >= 1, got {inten.shape}")
        chans = tuple(PolChannel(c) for c in self.channels)
        if len(chans) != nc:
            raise ShapeError(f"{len(chans)} channel tags for {nc} payload channels")
        if len(set(chans)) != len(chans):
            raise HeaderError(f"duplicate channels {[c.value for c in chans]}")
        if not (math.isfinite(self.height_step_m) and self.height_step_m > 0):
            raise HeaderError(f"height_step_m must be > 0, got {self.height_step_m}")
        if not math.isfinite(self.height_min_m):
            raise HeaderError("height_min_m must be finite")
        valid = self.valid
        if valid is None:
            valid = ~np.isnan(inten).any(axis=(2, 3))
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != (nr, na):
                raise ShapeError(f"valid mask shape {valid.shape} != {(nr, na)}")
        inten = np.array(inten, copy=True)
        inten[~valid] = np.nan
        if np.any(inten[valid] < 0):
            raise DomainError("intensity must be >= 0 on valid pixels")
        object.__setattr__(self, "intensity", _freeze(inten))
        object.__setattr__(self, "valid", _freeze(np.array(valid, copy=True)))
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "heading", Heading(self.heading))
        object.__setattr__(self, "height_min_m", float(self.height_min_m))
        object.__setattr__(self, "height_step_m", float(self.height_step_m))

    @property
    def n_range(self) -> int:
        return self.intensity.shape[0]

    @property
    def n_azimuth(self) -> int:
        return self.intensity.shape[1]

    @property
    def n_height(self) -> int:
        return self.intensity.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.intensity.shape[:2]

    def bin_centers(self) -> np.ndarray:
        return self.height_min_m + (np.arange(self.n_height) + 0.5) * self.height_step_m

    def channel_index(self, ch: PolChannel) -> int:
        return self.channels.index(PolChannel(ch))


@dataclass(frozen=True)
class SpeciesMap:
    labels: np.ndarray                  # uint8 (range, azimuth), 0 = no ground truth
    dictionary: dict[int, tuple[str, str]] = field(
        default_factory=lambda: dict(SPECIES_DICTIONARY)
    )

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError(f"label raster must be 2-D, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > N_CLASSES):
            raise DomainError(f"labels must be in [0, {N_CLASSES}], got max {int(lab.max())}")
        d = {int(k): (str(v[0]), str(v[1])) for k, v in self.dictionary.items()}
        if sorted(d) != list(range(1, N_CLASSES + 1)):
            raise DomainError(f"dictionary must cover ids 1..{N_CLASSES}, got {sorted(d)}")
        object.__setattr__(self, "labels", _freeze(lab.astype(np.uint8)))
        object.__setattr__(self, "dictionary", d)

    @property
    def grid(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def n_range(self) -> int:
        return self.labels.shape[0]

    @property
    def n_azimuth(self) -> int:
        return self.labels.shape[1]

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels.ravel(), minlength=N_CLASSES + 1)
        return {k: int(counts[k]) for k in range(1, N_CLASSES + 1) if counts[k]}

    def class_name(self, class_id: int) -> str:
        return self.dictionary.get(class_id, ("?", f"class {class_id}"))[1]


@dataclass(frozen=True)
class LidarPoints:
    points: np.ndarray                  # float64 (n, 3): x, y, z

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise FormatError("LiDAR coordinates must be finite")
        object.__setattr__(self, "points", _freeze(p))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class HeightRaster:
    height_m: np.ndarray                # float64 (range, azimuth), NaN = nodata
    dropped: int = 0                    # out-of-grid points discarded while rasterizing

    def __post_init__(self):
        h = np.asarray(self.height_m, dtype=np.float64)
        if h.ndim != 2:
            raise ShapeError(f"height raster must be 2-D, got shape {h.shape}")
        if np.isinf(h).any():
            raise DomainError("height raster must not contain infinities")
        object.__setattr__(self, "height_m", _freeze(np.array(h, copy=True)))

    @property
    def grid(self) -> tuple[int, int]:
        return self.height_m.shape

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.height_m)


# ── TOMO1 cubes ──────────────────────────────────────────────────────────────

_CUBE_FIXED = struct.Struct("<4I2fB")


def write_cube(cube: TomoCube, path: str | Path) -> None:
    band = cube.band.encode("utf-8")
    if len(band) > 255:
        raise HeaderError("band tag longer than 255 bytes")
    nr, na, nh, nc = cube.intensity.shape
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC)
        f.write(_CUBE_FIXED.pack(nr, na, nh, nc, cube.height_min_m,
                                 cube.height_step_m, cube.heading.code))
        f.write(struct.pack("<B", len(band)) + band)
        f.write(bytes(ch.code for ch in cube.channels))
        f.write(np.ascontiguousarray(cube.intensity, dtype="<f4").tobytes(order="C"))


def read_cube(path: str | Path) -> TomoCube:
    data = Path(path).read_bytes()
    if not data.startswith(CUBE_MAGIC):
        raise FormatError(f"{path}: not a TOMO1 cube (bad magic)")
    off = len(CUBE_MAGIC)
    if len(data) < off + _CUBE_FIXED.size + 1:
        raise TruncationError(f"{path}: header truncated")
    nr, na, nh, nc, hmin, step, heading = _CUBE_FIXED.unpack_from(data, off)
    off += _CUBE_FIXED.size
    if step <= 0 or not math.isfinite(step):
        raise HeaderError(f"{path}: height_step_m must be > 0, got {step}")
    if min(nr, na, nh, nc) < 1:
        raise HeaderError(f"{path}: zero dimension in header {(nr, na, nh, nc)}")
    blen = data[off]
    off += 1
    if len(data) < off + blen + nc:
        raise TruncationError(f"{path}: header truncated")
    band = data[off:off + blen].decode("utf-8")
    off += blen
    channels = tuple(PolChannel.from_code(c) for c in data[off:off + nc])
    off += nc
    expected = nr * na * nh * nc * 4
    if len(data) - off != expected:
        raise TruncationError(
            f"{path}: payload is {len(data) - off} bytes, header dims need {expected}"
        )
    inten = np.frombuffer(data, dtype="<f4", offset=off).reshape(nr, na, nh, nc)
    cube = TomoCube(
        intensity=inten.astype(np.float32),
        channels=channels,
        height_min_m=hmin,
        height_step_m=step,
        band=band,
        heading=Heading.from_code(heading),
    )
    logger.debug("Read cube %s: %s, %d valid pixels", path, inten.shape, int(cube.valid.sum()))
    return cube


# ── Heading merge ────────────────────────────────────────────────────────────

def merge_headings(nw: TomoCube, se: TomoCube) -> TomoCube:
    """
    Combine the two acquisitions: mean where both are valid, the single
    valid one elsewhere, invalid where neither is.
    """
    if nw.intensity.shape != se.intensity.shape:
        raise ShapeError(f"heading cubes differ in shape {nw.intensity.shape} vs {se.intensity.shape}")
    if nw.channels != se.channels:
        raise ShapeError("heading cubes carry different channels")
    if (nw.height_min_m, nw.height_step_m) != (se.height_min_m, se.height_step_m):
        raise ShapeError("heading cubes use different height axes")
    if {nw.heading, se.heading} != {Heading.NW, Heading.SE}:
        raise ShapeError(f"expected one NW and one SE cube, got {nw.heading.value}/{se.heading.value}")

    a, b = nw.intensity, se.intensity
    va, vb = nw.valid, se.valid
    out = np.full(a.shape, np.nan, dtype=np.float32)
    both = va & vb
    out[both] = (a[both] + b[both]) * np.float32(0.5)
    only_a = va & ~vb
    only_b = vb & ~va
    out[only_a] = a[only_a]
    out[only_b] = b[only_b]
    logger.info(
        "Merged headings: %d both, %d NW only, %d SE only, %d empty",
        int(both.sum()), int(only_a.sum()), int(only_b.sum()), int((~(va | vb)).sum()),
    )
    return TomoCube(
        intensity=out,
        channels=nw.channels,
        height_min_m=nw.height_min_m,
        height_step_m=nw.height_step_m,
        band=nw.band,
        heading=Heading.MERGED,
        valid=va | vb,
    )


# ── LBL1 rasters ─────────────────────────────────────────────────────────────

def write_label_raster(labels: np.ndarray, path: str | Path,
                       dictionary: Optional[dict[int, tuple[str, str]]] = None) -> None:
    lab = np.ascontiguousarray(labels, dtype=np.uint8)
    nr, na = lab.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<2I", nr, na))
        f.write(lab.tobytes(order="C"))
        if dictionary is not None:
            blob = json.dumps(
                {str(k): list(v) for k, v in sorted(dictionary.items())},
                sort_keys=True, separators=(",", ":"),
            ).encode("utf-8")
            f.write(DICT_MAGIC + struct.pack("<I", len(blob)) + blob)


def read_label_raster(path: str | Path) -> tuple[np.ndarray, Optional[dict]]:
    data = Path(path).read_bytes()
    if not data.startswith(LABEL_MAGIC):
        raise FormatError(f"{path}: not an LBL1 raster (bad magic)")
    off = len(LABEL_MAGIC)
    if len(data) < off + 8:
        raise TruncationError(f"{path}: header truncated")
    nr, na = struct.unpack_from("<2I", data, off)
    off += 8
    if len(data) < off + nr * na:
        raise TruncationError(f"{path}: payload shorter than {nr}x{na}")
    lab = np.frombuffer(data, dtype=np.uint8, count=nr * na, offset=off).reshape(nr, na).copy()
    off += nr * na
    dictionary = None
    if off < len(data):
        if data[off:off + 4] != DICT_MAGIC or len(data) < off + 8:
            raise TruncationError(f"{path}: {len(data) - off} unexpected trailing bytes")
        (blen,) = struct.unpack_from("<I", data, off + 4)
        blob = data[off + 8:off + 8 + blen]
        if len(blob) != blen:
            raise TruncationError(f"{path}: dictionary block truncated")
        try:
            dictionary = {int(k): (v[0], v[1]) for k, v in json.loads(blob).items()}
        except (ValueError, IndexError, TypeError) as e:
            raise FormatError(f"{path}: bad dictionary block: {e}")
    return lab, dictionary


def write_species_map(species: SpeciesMap, path: str | Path) -> None:
    embed = species.dictionary if species.dictionary != SPECIES_DICTIONARY else None
    write_label_raster(species.labels, path, embed)


def read_species_map(path: str | Path) -> SpeciesMap:
    lab, dictionary = read_label_raster(path)
    if lab.size and lab.max() > N_CLASSES:
        raise DomainError(f"{path}: label {int(lab.max())} outside [0, {N_CLASSES}]")
    species = SpeciesMap(labels=lab, dictionary=dictionary or dict(SPECIES_DICTIONARY))
    logger.debug("Read species map %s: %s, counts %s", path, lab.shape, species.class_counts())
    return species


# ── LiDAR ────────────────────────────────────────────────────────────────────

def read_lidar(path: str | Path) -> LidarPoints:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'x y z', got {s!r}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate in {s!r}")
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return LidarPoints(pts)


def write_lidar(points: LidarPoints, path: str | Path, header: str = "") -> None:
    with open(path, "w", encoding="utf-8") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        for x, y, z in points.points:
            f.write(f"{x!r} {y!r} {z!r}\n")


def rasterize_lidar(points: LidarPoints, n_range: int, n_azimuth: int) -> HeightRaster:
    """Canopy height model: max z per 1x1 cell, NaN where no point fell."""
    if n_range < 1 or n_azimuth < 1:
        raise ShapeError(f"grid dims must be positive, got {(n_range, n_azimuth)}")
    p = points.points
    col = np.floor(p[:, 0])
    row = np.floor(p[:, 1])
    inside = (col >= 0) & (col < n_azimuth) & (row >= 0) & (row < n_range)
    dropped = int((~inside).sum())
    if dropped:
        logger.warning("rasterize_lidar: dropped %d out-of-grid points of %d", dropped, len(p))
    flat = row[inside].astype(np.int64) * n_azimuth + col[inside].astype(np.int64)
    chm = np.full(n_range * n_azimuth, -np.inf)
    np.maximum.at(chm, flat, p[inside, 2])
    chm[np.isneginf(chm)] = np.nan
    return HeightRaster(chm.reshape(n_range, n_azimuth), dropped=dropped)


def write_height_raster(raster: HeightRaster, path: str | Path) -> None:
    with open(path, "wb") as f:
        np.save(f, np.asarray(raster.height_m, dtype=np.float64))


def read_height_raster(path: str | Path) -> HeightRaster:
    try:
        arr = np.load(path, allow_pickle=False)
    except ValueError as e:
        raise FormatError(f"{path}: not a height raster: {e}")
    return HeightRaster(arr)
