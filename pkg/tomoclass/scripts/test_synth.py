"""Synthetic scene generator: proportions, determinism and oracle properties."""
import numpy as np
from pydantic import ValidationError

from tomoclass.core.errors import ConfigError
from tomoclass.scripts._checks import check, exit_with, raises, run_sections, workdir
from tomoclass.services.cube_io import merge_headings, rasterize_lidar
from tomoclass.services.heightstats import estimate_height_raster
from tomoclass.services.synth import (
    SCENE_FILES, SceneConfig, generate_scene, nearest_centroid_oracle, read_truth_heights, write_scene,
)


def test_proportions():
    fails = 0
    scene = generate_scene(SceneConfig(seed=7))
    counts = scene.species.class_counts()
    share = counts[1] / sum(counts.values())
    fails += check('default scene, seed 7 -> class 1 within 0.6034 +- 0.03', abs(share - 0.6034) <= 0.03,
                   f'{share:.4f}')
    fails += check('every class present', sorted(counts) == list(range(1, 9)), counts)
    fails += check('desk-scale grid 120 x 168', scene.species.grid == (120, 168))
    merged = merge_headings(scene.nw, scene.se)
    fails += check('headings overlap and cover the grid',
                   bool(merged.valid.all()) and bool((scene.nw.valid & scene.se.valid).any())
                   and not scene.nw.valid.all())

    ok, msg = raises(lambda: generate_scene(SceneConfig(n_range=4, n_azimuth=4, proportions={k: 0.125 for k in range(1, 9)})), ConfigError)
    fails += check('grid too small for the proportions -> ConfigError', ok, msg)
    ok, _ = raises(lambda: SceneConfig(proportions={1: 0.5, 2: 0.2}), ValidationError)
    fails += check('proportions not summing to 1 rejected', ok)
    assert fails == 0


def test_determinism():
    fails = 0
    a, b = workdir(), workdir()
    cfg = SceneConfig(seed=11, n_range=48, n_azimuth=64, patch_size_px=6.0)
    pa = write_scene(generate_scene(cfg), a)
    pb = write_scene(generate_scene(cfg), b)
    same = [k for k in SCENE_FILES if pa[k].read_bytes() == pb[k].read_bytes()]
    fails += check('same config and seed -> byte-identical files', same == list(SCENE_FILES), same)
    pc = write_scene(generate_scene(cfg.model_copy(update={'seed': 12})), workdir())
    fails += check('another seed -> another cube', pc['nw'].read_bytes() != pa['nw'].read_bytes())

    scene = generate_scene(cfg)
    truth = read_truth_heights(pa['truth'], scene.species.grid)
    fails += check('ground-truth sidecar matches the scene', np.array_equal(truth, scene.canopy_height_m))
    chm = rasterize_lidar(scene.lidar, *scene.species.grid)
    fails += check('LiDAR covers every pixel', bool(chm.valid.all()))
    fails += check('LiDAR max within 0.5 m of canopy', float(np.abs(chm.height_m - scene.canopy_height_m).max()) <= 0.5)
    assert fails == 0


def test_noiseless():
    fails = 0
    scene = generate_scene(SceneConfig(seed=7, noise=0.0))
    merged = merge_headings(scene.nw, scene.se)
    est = estimate_height_raster(merged)
    err = np.abs(est.height_m - scene.canopy_height_m)
    fails += check('noiseless height estimate within one bin (2 m)', bool(est.valid.all()) and float(err.max()) <= 2.0,
                   f'max error {np.nanmax(err):.3f}')

    nr, na, nh, nc = merged.intensity.shape
    profiles = merged.intensity.reshape(nr * na, nh, nc).astype(np.float64)
    labels = scene.species.labels.ravel().astype(np.int64)
    train = np.random.default_rng(0).random(labels.size) < 0.5
    pred = nearest_centroid_oracle(profiles, labels, train, ~train)
    acc = float(np.mean(pred == labels[~train]))
    fails += check('nearest-centroid oracle -> 100% on noiseless profiles', acc == 1.0, f'{acc:.4f}')

    flat = generate_scene(SceneConfig(seed=1, noise=0.0, n_range=16, n_azimuth=20,
                                      proportions={1: 1.0}, heights={1: (20.0, 0.0)}))
    peak = np.argmax(merge_headings(flat.nw, flat.se).intensity[:, :, :, 0], axis=2)
    fails += check('single class, flat 20 m -> peak bin holds 20 m', bool((peak == 15).all()),
                   np.unique(peak).tolist())
    assert fails == 0


def test_clustering():
    fails = 0
    lab = generate_scene(SceneConfig(seed=7, patch_size_px=16.0)).species.labels
    same = np.concatenate([(lab[1:, :] == lab[:-1, :]).ravel(), (lab[:, 1:] == lab[:, :-1]).ravel()])
    agree = float(same.mean())
    fails += check('coarse patches -> >= 90% 4-neighbour agreement', agree >= 0.9, f'{agree:.3f}')

    stands = generate_scene(SceneConfig(seed=7, patch_size_px=16.0, patch_aspect=4.0)).species.labels
    along = float((stands[:, 1:] == stands[:, :-1]).mean())
    across = float((stands[1:, :] == stands[:-1, :]).mean())
    fails += check('patch_aspect 4 -> stands run along azimuth', along > across, f'{along:.3f} vs {across:.3f}')

    part = generate_scene(SceneConfig(seed=7, unlabeled_frac=0.2)).species.labels
    frac = float(np.mean(part == 0))
    fails += check('unlabeled fraction honoured', 0.2 <= frac <= 0.35, f'{frac:.3f}')
    assert fails == 0


def main():
    return run_sections('synth checks', [test_proportions, test_determinism, test_noiseless, test_clustering])


if __name__ == '__main__':
    exit_with(main())
