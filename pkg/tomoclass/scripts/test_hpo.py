"""Gaussian-process surrogate, expected improvement and the BO tuning loop."""
import csv
import math

import numpy as np
from scipy.stats import norm

from tomoclass.core import config
from tomoclass.core.errors import DataError, ParameterError
from tomoclass.scripts._checks import check, exit_with, raises, run_sections, workdir
from tomoclass.services.hpo import (
    Dim, DimKind, KernelSettings, Observation, ParamSpace, expected_improvement, export_trace_csv,
    forest_space, gbm_space, gp_fit, sq_exp_kernel, tune,
)

UNIT = ParamSpace(dims=[Dim(name='x', kind=DimKind.REAL, lower=0.0, upper=1.0)])


def test_gp():
    fails = 0
    gp = gp_fit([Observation(np.array([0.4]), 3.5)], KernelSettings(noise_variance=1e-9))
    mean, var = gp.predict(np.array([[0.4]]))
    fails += check('one point: posterior mean = observed', abs(mean[0] - 3.5) < 1e-6, f'{mean[0]}')
    fails += check('one point: variance ~ 0 there', var[0] < 1e-6, f'{var[0]:.2e}')

    gp = gp_fit([Observation(np.array([0.0]), 1.0), Observation(np.array([0.1]), 3.0)])
    mean, var = gp.predict(np.array([[1.0]]))
    fails += check('far query reverts to prior mean', abs(mean[0] - 2.0) < 1e-3, f'{mean[0]}')
    fails += check('far query reverts to prior variance', abs(var[0] - gp.prior_variance) < 1e-3, f'{var[0]}')

    xs = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    obs = [Observation(np.array([x]), 2.0 * x + 1.0) for x in xs]
    smooth = KernelSettings(lengthscale=0.5)
    gp = gp_fit(obs, smooth)
    mean, _ = gp.predict(np.array([[0.375]]))
    fails += check('linear samples: mid-point within 0.05', abs(mean[0] - 1.75) <= 0.05, f'{mean[0]}')

    # Same posterior mean from a dense solve of the GP equations.
    y = 2.0 * xs + 1.0
    ys = (y - y.mean()) / y.std()
    ls = np.array([0.5])
    K = sq_exp_kernel(xs[:, None], xs[:, None], ls, 1.0) + 1e-6 * np.eye(5)
    ks = sq_exp_kernel(np.array([[0.375]]), xs[:, None], ls, 1.0)
    direct = float(ks @ np.linalg.solve(K, ys)) * y.std() + y.mean()
    fails += check('matches dense solve', abs(direct - mean[0]) < 1e-7, f'{direct} vs {mean[0]}')

    rng = np.random.default_rng(3)
    obs = [Observation(rng.random(2), float(rng.standard_normal())) for _ in range(12)]
    gp = gp_fit(obs)
    _, var = gp.predict(rng.random((500, 2)))
    fails += check('variance <= prior variance', bool((var <= gp.prior_variance + 1e-9).all()))

    ok, msg = raises(lambda: Observation(np.array([1.5]), 0.0), ParameterError)
    fails += check('input outside unit cube rejected', ok, msg)
    ok, msg = raises(lambda: gp_fit([]), DataError)
    fails += check('no observations -> DataError', ok, msg)
    assert fails == 0


def test_expected_improvement():
    fails = 0
    fails += check('mean = best, stdev 0 -> 0', expected_improvement(1.0, 0.0, 1.0) == 0.0)
    phi0 = 1.0 / math.sqrt(2.0 * math.pi)
    fails += check('mean = best, stdev 1 -> phi(0)', abs(expected_improvement(0.0, 1.0, 0.0) - phi0) < 1e-12)
    n = 1_000_000 if config.FULL_CHECKS else 100_000
    rng = np.random.default_rng(0)
    # one uniform per stratum of (0, 1), mapped through the normal quantile
    draws = norm.ppf((np.arange(n) + rng.random(n)) / n)
    mc = float(np.maximum(0.0 - draws, 0.0).mean())
    fails += check(f'Monte-Carlo ({n} stratified draws) within 1e-3 of 0.39894',
                   abs(mc - expected_improvement(0.0, 1.0, 0.0)) < 1e-3 and abs(mc - 0.39894) < 1e-3, f'{mc}')
    fails += check('hopeless point -> < 1e-12', expected_improvement(10.0, 0.01, 0.0) < 1e-12)

    means = np.linspace(-2, 2, 41)
    grid = np.array([expected_improvement(means, s, 0.0) for s in np.linspace(0, 3, 31)])
    fails += check('EI >= 0 everywhere', bool((grid >= 0).all()))
    below = means <= 0.0
    fails += check('EI non-decreasing in stdev when mean <= best',
                   bool((np.diff(grid[:, below], axis=0) >= -1e-15).all()))
    fails += check('scalar in, float out', isinstance(expected_improvement(0.0, 1.0, 0.5), float))

    mean, sd, best = rng.normal(0, 3, 100_000), rng.exponential(1.0, 100_000), rng.normal(0, 3, 100_000)
    sd[::10] = 0.0
    ei = expected_improvement(mean, sd, best)
    fails += check('100000 random inputs -> EI >= 0', bool((ei >= 0).all() and np.isfinite(ei).all()))
    certain = sd == 0.0
    fails += check('stdev 0 -> max(best - mean, 0)', np.array_equal(ei[certain], np.maximum(best - mean, 0.0)[certain]))
    assert fails == 0


def test_spaces():
    fails = 0
    lr = Dim(name='lr', kind=DimKind.LOG_REAL, lower=0.01, upper=0.3)
    worst = max(abs(lr.decode(lr.encode(v)) - v) / v for v in np.geomspace(0.01, 0.3, 50))
    fails += check('LOG_REAL decode(encode(v)) within 1e-12', worst < 1e-12, f'{worst:.1e}')

    depth = Dim(name='d', kind=DimKind.INT, lower=3, upper=8)
    vals = [depth.decode(u) for u in np.linspace(0, 1, 6001)]
    counts = np.bincount(vals)[3:]
    fails += check('INT ends map to bounds', depth.decode(0.0) == 3 and depth.decode(1.0) == 8)
    fails += check('INT values get equal slices', counts.max() - counts.min() <= 2, f'{counts}')
    fails += check('INT encode lands on the value', all(depth.decode(depth.encode(v)) == v for v in range(3, 9)))

    fails += check('default GBM space', gbm_space().names == ['learning_rate', 'max_depth', 'n_rounds'])
    fails += check('default forest space', forest_space().names == ['n_trees', 'max_depth'])
    ok, _ = raises(lambda: Dim(name='bad', kind=DimKind.LOG_REAL, lower=0.0, upper=1.0), ValueError)
    fails += check('LOG_REAL lower 0 rejected', ok)
    assert fails == 0


def _quadratic(p):
    return (p['x'] - 0.3) ** 2


def test_tune():
    fails = 0
    seeds = range(100) if config.FULL_CHECKS else range(5)
    misses, rising = [], 0
    for s in seeds:
        best, trace = tune(_quadratic, UNIT, 25, seed=s)
        if abs(best['x'] - 0.3) > 0.05:
            misses.append((s, best['x']))
        inc = trace.incumbents
        rising += any(b > a for a, b in zip(inc, inc[1:]))
    allowed = len(seeds) // 20 if config.FULL_CHECKS else 1
    fails += check(f'(x-0.3)^2, budget 25 -> |x-0.3| <= 0.05 in {len(seeds) - len(misses)}/{len(seeds)} runs',
                   len(misses) <= allowed, misses[:3])
    fails += check('incumbent never increases', rising == 0)

    calls = []

    def record(p):
        calls.append(p['x'])
        return _quadratic(p)
    best, trace = tune(record, UNIT, 2, seed=4)
    fails += check('budget 2 -> better of the 2 seeded points',
                   len(calls) == 2 and _quadratic(best) == min(_quadratic({'x': c}) for c in calls))

    _, trace = tune(lambda p: 7.0, UNIT, 8, seed=1)
    fails += check('constant objective -> constant incumbent', trace.incumbents == [7.0] * 8)

    def flaky(p):
        if p['x'] > 0.5:
            raise RuntimeError('diverged')
        return _quadratic(p)
    best, trace = tune(flaky, UNIT, 12, seed=2)
    failed = [t for t in trace.trials if t.status == 'failed']
    fails += check('failing trials recorded as +inf', bool(failed) and all(t.objective == math.inf for t in failed))
    fails += check('failed trials never win', best['x'] <= 0.5)

    ok, msg = raises(lambda: tune(lambda p: 1 / 0, UNIT, 4, seed=0), DataError)
    fails += check('every trial failing -> DataError', ok, msg)
    ok, msg = raises(lambda: tune(_quadratic, UNIT, 1), ParameterError)
    fails += check('budget 1 rejected', ok, msg)

    seen = []
    ints = ParamSpace(dims=[Dim(name='k', kind=DimKind.INT, lower=0, upper=2)])
    best, trace = tune(lambda p: seen.append(p['k']) or (p['k'] - 1) ** 2, ints, 10, seed=0)
    fails += check('duplicate integer configs not re-evaluated', len(seen) == len(set(seen)) and len(seen) <= 3)
    fails += check('integer optimum found', best == {'k': 1} or 1 not in seen, f'{best} {seen}')
    fails += check('cached trials marked', all(t.status in ('ok', 'cached') for t in trace.trials))

    d = workdir()
    export_trace_csv(trace, d / 'trace.csv')
    with open(d / 'trace.csv', newline='', encoding='utf-8') as f:
        rows = list(csv.reader(f))
    fails += check('trace CSV header + one row per trial',
                   rows[0] == ['trial', 'k', 'objective', 'incumbent', 'status'] and len(rows) == len(trace.trials) + 1)
    assert fails == 0


def main():
    return run_sections('hpo checks', [test_gp, test_expected_improvement, test_spaces, test_tune])


if __name__ == '__main__':
    exit_with(main())
