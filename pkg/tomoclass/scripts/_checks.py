"""Shared helpers for the check scripts: [OK]/[FAIL] printer, section runner, tiny fixtures."""
import sys
import tempfile
import traceback
from pathlib import Path

import numpy as np

from tomoclass.services.cube_io import Heading, SpeciesMap, TomoCube
from tomoclass.services.features import FeatureTable
from tomoclass.services.geosplit import Assignment, SplitMask, SplitMethod

PASS, FAIL = [], []


def check(name, cond, detail=''):
    """Print one check line; returns 1 on failure so sections can sum them."""
    if cond:
        PASS.append(name); print(f'  [OK]   {name}')
        return 0
    FAIL.append(name); print(f'  [FAIL] {name} :: {detail}')
    return 1


def raises(fn, exc):
    """(raised expected exc?, message) for fn()."""
    try:
        fn()
    except exc as e:
        return True, str(e)
    except Exception as e:
        return False, f'{type(e).__name__}: {e}'
    return False, 'no exception'


def run_sections(title, sections):
    print(f'===== {title} =====')
    for fn in sections:
        print(f'\n--- {fn.__name__} ---')
        try:
            fn()
        except AssertionError:
            pass
        except Exception:
            FAIL.append(fn.__name__)
            traceback.print_exc()
    print('\n===== RESULT =====')
    print(f'PASS: {len(PASS)}/{len(PASS) + len(FAIL)}')
    print(f'FAIL: {len(FAIL)}')
    if FAIL:
        for f in FAIL: print(f'  - {f}')
        return 1
    print(f'\n[DONE] {title}: all checks passed.')
    return 0


def exit_with(code):
    sys.exit(code)


def workdir():
    return Path(tempfile.mkdtemp(prefix='tomoclass-check-'))


# ── Fixtures ─────────────────────────────────────────────────────────────────

def cube_of(intensity, channels=('HH',), heading=Heading.MERGED, hmin=-10.0, step=2.0, band='P'):
    return TomoCube(intensity=np.asarray(intensity, dtype=np.float32), channels=tuple(channels),
                    height_min_m=hmin, height_step_m=step, band=band, heading=heading)


def species_of(labels):
    return SpeciesMap(labels=np.asarray(labels, dtype=np.uint8))


def mask_of(assignment, method=SplitMethod.SWATH):
    return SplitMask(assignment=np.asarray(assignment, dtype=np.uint8), method=method, seed=0)


def all_train(grid):
    return mask_of(np.full(grid, Assignment.TRAIN, dtype=np.uint8))


def table_of(X, labels, split=None):
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    split = np.full(n, Assignment.TRAIN, dtype=np.uint8) if split is None else np.asarray(split, dtype=np.uint8)
    return FeatureTable(
        columns=tuple(f'f{j}' for j in range(d)),
        X=X,
        labels=np.asarray(labels, dtype=np.int64),
        x=np.arange(n, dtype=np.int64),
        y=np.zeros(n, dtype=np.int64),
        split=split,
    )


def blobs(n_per_class, centers, sigma, seed):
    """Gaussian blobs: rows (n_per_class * len(centers), dim), labels 1..K."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    X = np.vstack([c + sigma * rng.standard_normal((n_per_class, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(1, len(centers) + 1), n_per_class)
    return X, y
