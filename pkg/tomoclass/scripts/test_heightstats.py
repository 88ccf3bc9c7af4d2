"""Height statistics, KDE/box data and the tomographic height estimate."""
import csv
import math

import numpy as np
from openpyxl import load_workbook

from tomoclass.core import config
from tomoclass.core.errors import BandwidthError, ShapeError, StatisticError
from tomoclass.scripts._checks import check, cube_of, exit_with, mask_of, raises, run_sections, species_of, workdir
from tomoclass.services.cube_io import HeightRaster
from tomoclass.services.geosplit import Assignment
from tomoclass.services.heightstats import (
    box_stats, class_height_stats, estimate_height, estimate_height_raster, excess_kurtosis,
    export_stats_csv, export_stats_xlsx, export_violin_csv, format_stats_text, kde,
    silverman_bandwidth, violin_data,
)

FIVE = [10.0, 12.0, 14.0, 16.0, 18.0]


def _row(values):
    return HeightRaster(np.asarray([values], dtype=np.float64))


def test_kurtosis():
    fails = 0
    n = 1_000_000 if config.FULL_CHECKS else 100_000
    rng = np.random.default_rng(21)
    k = excess_kurtosis(rng.standard_normal(n))
    fails += check(f'{n} normal draws -> 0 +- 0.05', abs(k) <= 0.05, f'{k:.4f}')
    k = excess_kurtosis(rng.random(n))
    fails += check(f'{n} uniform draws -> -1.2 +- 0.05', abs(k + 1.2) <= 0.05, f'{k:.4f}')
    fails += check('population-moment convention', abs(excess_kurtosis([1, 2, 3, 4]) - (-1.36)) < 1e-12)
    ok, msg = raises(lambda: excess_kurtosis([3.0] * 10), StatisticError)
    fails += check('constant samples -> StatisticError', ok, msg)
    ok, msg = raises(lambda: excess_kurtosis([1.0, 2.0, 3.0]), StatisticError)
    fails += check('n < 4 -> StatisticError', ok, msg)
    assert fails == 0


def test_class_stats():
    fails = 0
    sp = species_of(np.ones((1, 5), dtype=np.uint8))
    test_only = mask_of(np.full((1, 5), Assignment.TEST, dtype=np.uint8))
    chm = _row(FIVE)
    rows = class_height_stats(chm, sp, test_only, _row([h + 1 for h in FIVE]))
    r = rows[0]
    fails += check('one (class, split) row', len(rows) == 1 and (r.class_id, r.split, r.n) == (1, 'Test', 5))
    fails += check('{10..18}: mean 14, std 2.828', r.mean_m == 14.0 and abs(r.std_m - math.sqrt(8)) < 1e-12,
                   f'{r.std_m}')
    fails += check('est = chm + 1 -> rmse 1', r.rmse_m == 1.0)
    fails += check('min <= mean <= max', r.min_m <= r.mean_m <= r.max_m)

    flat = _row([10.0] * 5)
    r = class_height_stats(flat, sp, test_only, flat)[0]
    fails += check('all 10 m -> min=max=mean=10, std 0', (r.min_m, r.max_m, r.mean_m, r.std_m) == (10.0, 10.0, 10.0, 0.0))
    fails += check('est = chm -> rmse 0', r.rmse_m == 0.0)
    fails += check('kurtosis flagged', r.excess_kurtosis is None and any('kurtosis' in f for f in r.flags), r.flags)

    lab = np.array([[2, 2, 1, 1], [2, 2, 1, 1]], dtype=np.uint8)
    a = np.array([[1, 2, 1, 2], [1, 2, 1, 2]], dtype=np.uint8)
    grid_chm = HeightRaster(np.arange(8, dtype=np.float64).reshape(2, 4) + 5.0)
    rows = class_height_stats(grid_chm, species_of(lab), mask_of(a), grid_chm)
    fails += check('rows ordered by class, Test before Train',
                   [(r.class_id, r.split) for r in rows] == [(1, 'Test'), (1, 'Train'), (2, 'Test'), (2, 'Train')])
    pred = np.ones((2, 4), dtype=np.uint8)
    by_pred = class_height_stats(grid_chm, species_of(lab), mask_of(a), grid_chm, labels=pred)
    fails += check('grouping by predicted class', [r.class_id for r in by_pred] == [1, 1]
                   and sum(r.n for r in by_pred) == 8)

    holes = HeightRaster(np.array([[np.nan, 12.0, 14.0, 16.0, 18.0]]))
    r = class_height_stats(holes, sp, test_only, holes)[0]
    fails += check('nodata CHM pixels skipped', r.n == 4 and r.min_m == 12.0)
    ok, msg = raises(lambda: class_height_stats(_row([1.0, 2.0]), sp, test_only, _row([1.0, 2.0])), ShapeError)
    fails += check('grid mismatch -> ShapeError', ok, msg)

    d = workdir()
    rows = class_height_stats(chm, sp, test_only, _row([h + 1 for h in FIVE]))
    text = format_stats_text(rows)
    fails += check('text row reads like the height table', 'Aspen forest' in text and '14.00' in text
                   and '2.83' in text and text.splitlines()[0].startswith('Tree Name'))
    export_stats_csv(rows, d / 'stats.csv')
    with open(d / 'stats.csv', newline='', encoding='utf-8') as f:
        got = list(csv.DictReader(f))
    fails += check('CSV full precision', abs(float(got[0]['std_m']) - math.sqrt(8)) < 1e-12)
    export_stats_xlsx(rows, d / 'stats.xlsx')
    ws = load_workbook(d / 'stats.xlsx')['Height stats']
    fails += check('xlsx row', ws['A3'].value == 'Aspen forest' and ws['D3'].value == 14.0 and ws['H3'].value == 'Test')
    assert fails == 0


def test_kde_and_box():
    fails = 0
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(20):
        s = rng.gamma(2.0, 5.0, int(rng.integers(2, 300)))
        worst = max(worst, abs(kde(s).integral() - 1.0))
    fails += check('curves integrate to 1 +- 1e-3', worst <= 1e-3, f'{worst:.1e}')

    c = kde([0.0, 10.0])
    h = c.bandwidth_m
    mix = (np.exp(-0.5 * (c.grid / h) ** 2) + np.exp(-0.5 * ((c.grid - 10.0) / h) ** 2)) / (2 * h * math.sqrt(2 * math.pi))
    fails += check('{0, 10} equals the two-kernel mixture', np.allclose(c.density, mix, rtol=1e-10, atol=1e-15))
    fails += check('{0, 10} curve symmetric', np.allclose(c.density, c.density[::-1], rtol=1e-9, atol=1e-15))
    fails += check('Silverman bandwidth', abs(h - 0.9 * min(np.std([0, 10], ddof=1), 5.0 / 1.34) * 2 ** -0.2) < 1e-12)

    c = kde(rng.normal(20.0, 2.0, 10_000))
    mode = c.grid[np.argmax(c.density)]
    fails += check('N(20, 2^2) draws -> mode 20 +- 0.3', abs(mode - 20.0) <= 0.3, f'{mode:.3f}')
    fails += check('grid ascending, density >= 0', bool((np.diff(c.grid) > 0).all() and (c.density >= 0).all()))

    # cut=3 reaches one bandwidth less into each tail than the default
    s = rng.normal(20.0, 2.0, 500)
    c3, c4 = kde(s, cut=3.0), kde(s)
    h = c3.bandwidth_m
    fails += check('cut 3 -> grid spans [min - 3h, max + 3h]',
                   math.isclose(c3.grid[0], s.min() - 3 * h) and math.isclose(c3.grid[-1], s.max() + 3 * h))
    fails += check('cut 3 grid inside the default cut 4 grid', c4.grid[0] < c3.grid[0] and c3.grid[-1] < c4.grid[-1])
    fails += check('cut 3 -> density >= 0, integrates to 1 +- 1e-3',
                   bool((c3.density >= 0).all()) and abs(c3.integral() - 1.0) <= 1e-3, f'{c3.integral():.6f}')
    c = kde([0.0, 10.0], cut=3.0)
    fails += check('{0, 10} at cut 3 integrates to 1 +- 2e-3 (one outer tail each)',
                   abs(c.integral() - 1.0) <= 2e-3, f'{c.integral():.6f}')

    ok, msg = raises(lambda: silverman_bandwidth([4.0, 4.0, 4.0]), BandwidthError)
    fails += check('no spread -> BandwidthError', ok, msg)
    ok, msg = raises(lambda: kde([1.0]), BandwidthError)
    fails += check('single sample -> BandwidthError', ok, msg)

    b = box_stats(FIVE)
    fails += check('{10..18} quartiles 12/14/16', (b.q1, b.median, b.q3) == (12.0, 14.0, 16.0))
    fails += check('no outliers, whiskers at the ends', b.n_outliers == 0 and (b.whisker_low, b.whisker_high) == (10.0, 18.0))
    b = box_stats(FIVE + [60.0])
    fails += check('1.5 IQR rule marks 60 as outlier', b.n_outliers == 1 and b.whisker_high == 18.0 and b.maximum == 60.0)
    assert fails == 0


def test_violin_export():
    fails = 0
    d = workdir()
    lab = np.array([[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]], dtype=np.uint8)
    chm = HeightRaster(np.array([[7.0] * 5 + FIVE]))
    mask = mask_of(np.full((1, 10), Assignment.TRAIN, dtype=np.uint8))
    blocks = violin_data(chm, species_of(lab), mask, grid_points=64, n_jobs=2)
    fails += check('two classes -> two blocks in class order', [b.class_id for b in blocks] == [1, 2])
    one = blocks[0]
    fails += check('constant heights: quartiles equal, density flagged',
                   one.box.q1 == one.box.median == one.box.q3 == 7.0 and one.curve is None and one.flag)
    fails += check('varied heights get a curve', blocks[1].curve is not None and len(blocks[1].curve.grid) == 64)

    export_violin_csv(blocks, d / 'violin.csv')
    with open(d / 'violin.csv', newline='', encoding='utf-8') as f:
        rows = list(csv.DictReader(f))
    fails += check('flag row for the constant class', any(r['record'] == 'flag' and r['class_id'] == '1' for r in rows))
    curve = [r for r in rows if r['record'] == 'curve']
    fails += check('64 curve rows, class 2 only', len(curve) == 64 and {r['class_id'] for r in curve} == {'2'})
    med = [r for r in rows if r['record'] == 'box' and r['class_id'] == '2' and r['name'] == 'median']
    fails += check('box median exported', float(med[0]['value']) == 14.0)
    assert fails == 0


def test_estimate_height():
    fails = 0
    fails += check('all-zero profile -> nodata', math.isnan(estimate_height(np.zeros(36), -10.0, 2.0)))
    single = np.zeros(20); single[15] = 1.0
    fails += check('single bin centred at 20 m -> 21 m', estimate_height(single, -11.0, 2.0) == 21.0)
    fails += check('[0.1, 1.0, 0.45, 0.05] at -3 dB -> -6 m',
                   estimate_height([0.1, 1.0, 0.45, 0.05], -10.0, 2.0, -3.0) == -6.0)

    rng = np.random.default_rng(17)
    profiles = rng.random((50, 36)) ** 4
    thresholds = np.linspace(-20.0, 0.0, 21)
    mono, bounded = True, True
    for p in profiles:
        h = [estimate_height(p, -10.0, 2.0, t) for t in thresholds]
        mono &= all(b <= a for a, b in zip(h, h[1:]))
        bounded &= all(-10.0 <= v <= -10.0 + 36 * 2.0 for v in h)
    fails += check('raising the threshold never raises the height', mono)
    fails += check('estimate within the height axis', bounded)

    inten = rng.random((3, 4, 36, 2)).astype(np.float32)
    inten[0, 0] = 0.0
    inten[1, 2] = np.nan
    cube = cube_of(inten, channels=('HH', 'VV'))
    ras = estimate_height_raster(cube)
    direct = np.array([[estimate_height(inten[r, c, :, 0], -10.0, 2.0) for c in range(4)] for r in range(3)])
    fails += check('raster = per-pixel estimate (first channel)', np.array_equal(ras.height_m, direct, equal_nan=True))
    vv = estimate_height_raster(cube, source='VV')
    fails += check('channel choice honoured',
                   vv.height_m[2, 3] == estimate_height(inten[2, 3, :, 1], -10.0, 2.0))
    fails += check('zero / invalid pixels -> nodata', not ras.valid[0, 0] and not ras.valid[1, 2])
    assert fails == 0


def main():
    return run_sections('heightstats checks',
                        [test_kurtosis, test_class_stats, test_kde_and_box, test_violin_export, test_estimate_height])


if __name__ == '__main__':
    exit_with(main())
