"""
Scene-level checks on synthetic data: the boosted-tree accuracy floor against
the nearest-centroid oracle, the XY / geosplit trend on a clustered scene and
the macro vs weighted F1 gap on the study proportions.

Full-size scenes run with TOMOCLASS_FULL_CHECKS=1; the default run uses
smaller grids with the same assertions. Wall times are printed per section.
"""
import time

import numpy as np

from tomoclass.core import config
from tomoclass.scripts._checks import check, exit_with, run_sections
from tomoclass.services import evaluation as ev
from tomoclass.services.cube_io import merge_headings
from tomoclass.services.features import FeatureSpec, build_table
from tomoclass.services.geosplit import square_split, swath_split
from tomoclass.services.learners import GbmParams, TreeParams, predict, train_gbm
from tomoclass.services.synth import (
    DEFAULT_HEIGHTS, DEFAULT_SIGNATURES, SceneConfig, generate_scene, nearest_centroid_oracle,
)

N_JOBS = config.resolve_threads()

FLOOR_GRID = (120, 168) if config.FULL_CHECKS else (80, 112)
FLOOR_GBM = GbmParams(n_rounds=20, tree=TreeParams(max_depth=4))

TREND_GRID = (120, 168) if config.FULL_CHECKS else (60, 84)
TREND_PATCH = 24.0 if config.FULL_CHECKS else 12.0
TREND_GBM = GbmParams(n_rounds=20 if config.FULL_CHECKS else 10, tree=TreeParams(max_depth=4))

_floor = {}


def _default_scene_run():
    """Default scene, seed 7, swath split: GBM and oracle predictions on the TEST rows (cached)."""
    if not _floor:
        t0 = time.perf_counter()
        scene = generate_scene(SceneConfig(seed=7, n_range=FLOOR_GRID[0], n_azimuth=FLOOR_GRID[1]))
        cube = merge_headings(scene.nw, scene.se)
        mask = swath_split(scene.species, 0.20, seed=0)
        table = build_table(cube, scene.species, mask, FeatureSpec(), n_jobs=N_JOBS)
        t1 = time.perf_counter()
        model = train_gbm(table.train(), FLOOR_GBM, seed=0, n_jobs=N_JOBS)
        test = table.test()
        pred, _ = predict(model, test, n_jobs=N_JOBS)
        t2 = time.perf_counter()

        nr, na, nh, nc = cube.intensity.shape
        profiles = cube.intensity.reshape(nr * na, nh, nc).astype(np.float64)
        labels = scene.species.labels.ravel().astype(np.int64)
        oracle = nearest_centroid_oracle(profiles, labels, mask.train.ravel(), mask.test.ravel())
        _floor.update(truth=test.labels, pred=pred, oracle_truth=labels[mask.test.ravel()],
                      oracle=oracle, t_prep=t1 - t0, t_fit=t2 - t1)
    return _floor


def test_learner_floor():
    fails = 0
    run = _default_scene_run()
    acc = ev.accuracy(run['truth'], run['pred'])
    oracle = ev.accuracy(run['oracle_truth'], run['oracle'])
    print(f'  {FLOOR_GRID[0]}x{FLOOR_GRID[1]} scene: GBM {acc:.4f}, oracle {oracle:.4f}; '
          f'scene+features {run["t_prep"]:.1f}s, fit+predict {run["t_fit"]:.1f}s on {N_JOBS} thread(s)')
    fails += check('GBM test accuracy >= 0.90', acc >= 0.90, f'{acc:.4f}')
    fails += check('GBM >= nearest-centroid oracle - 0.02', acc >= oracle - 0.02, f'{acc:.4f} vs {oracle:.4f}')
    fails += check('oracle and GBM score the same TEST pixels',
                   len(run['oracle']) == len(run['pred']) and
                   np.array_equal(np.sort(run['oracle_truth']), np.sort(run['truth'])))
    assert fails == 0


def test_imbalance_gap():
    fails = 0
    run = _default_scene_run()
    rep = ev.classification_report(ev.confusion_matrix(run['truth'], run['pred']))
    macro, weighted = rep.macro_avg.f1, rep.weighted_avg.f1
    print(f'  macro F1 {macro:.3f}, weighted F1 {weighted:.3f}')
    fails += check('macro F1 below weighted F1 by >= 0.10', weighted - macro >= 0.10,
                   f'{macro:.3f} vs {weighted:.3f}')
    fails += check('balanced accuracy <= accuracy', rep.balanced_accuracy <= rep.accuracy)
    assert fails == 0


def _stand_scene():
    """
    Elongated stands; every minority species shares one signature and height
    distribution, so only class 1 is separable from the profiles alone.
    """
    minority_sig = DEFAULT_SIGNATURES[2]
    return SceneConfig(
        seed=7, n_range=TREND_GRID[0], n_azimuth=TREND_GRID[1],
        patch_size_px=TREND_PATCH, patch_aspect=6.0,
        signatures={k: DEFAULT_SIGNATURES[1] if k == 1 else minority_sig for k in range(1, 9)},
        heights={k: DEFAULT_HEIGHTS[1] if k == 1 else (20.0, 4.0) for k in range(1, 9)},
        ground_ratio={k: 0.35 if k == 1 else 0.55 for k in range(1, 9)},
    )


def test_xy_trend():
    fails = 0
    t0 = time.perf_counter()
    scene = generate_scene(_stand_scene())
    cube = merge_headings(scene.nw, scene.se)
    masks = {
        'swath': swath_split(scene.species, 0.20, seed=0),
        'square': square_split(scene.species, 0.05, 0.20, seed=0),
    }
    scores = {}
    for method, mask in masks.items():
        for xy in (False, True):
            table = build_table(cube, scene.species, mask, FeatureSpec(include_xy=xy), n_jobs=N_JOBS)
            model = train_gbm(table.train(), TREND_GBM, seed=0, n_jobs=N_JOBS)
            test = table.test()
            pred, _ = predict(model, test, n_jobs=N_JOBS)
            scores[method, xy] = (ev.accuracy(test.labels, pred), ev.balanced_accuracy(test.labels, pred))
    dt = time.perf_counter() - t0
    for (method, xy), (acc, bal) in scores.items():
        print(f'  {method:6s} xy={"with" if xy else "without":7s} accuracy {acc:.4f}  balanced {bal:.4f}')
    print(f'  {TREND_GRID[0]}x{TREND_GRID[1]} stand scene, 4 cells: {dt:.1f}s on {N_JOBS} thread(s)')

    for method in masks:
        without, with_xy = scores[method, False][0], scores[method, True][0]
        fails += check(f'{method}: accuracy with XY >= without', with_xy >= without,
                       f'{with_xy:.4f} vs {without:.4f}')
    lopsided = [k for k, (acc, bal) in scores.items() if bal > acc]
    fails += check('balanced accuracy <= accuracy in all four cells', not lopsided, lopsided)
    assert fails == 0


def main():
    return run_sections('scenario checks', [test_learner_floor, test_imbalance_gap, test_xy_trend])


if __name__ == '__main__':
    exit_with(main())
