"""
Bayesian hyperparameter search: Gaussian-process surrogate on the unit cube
with expected improvement, candidates drawn at random.

Objectives are minimized. Kernel settings are fixed per run; targets are
standardized inside gp_fit and predictions come back in original units.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.stats import norm

from tomoclass.core.errors import ConditioningError, DataError, ParameterError
from tomoclass.utils.validators import round_half_up

logger = logging.getLogger(__name__)

N_CANDIDATES = 1024
JITTER_FLOOR = 1e-9
JITTER_CEILING = 1e-4


# ── Parameter spaces ─────────────────────────────────────────────────────────

class DimKind(str, Enum):
    REAL = "real"
    LOG_REAL = "log_real"
    INT = "int"


class Dim(BaseModel):
    name: str
    kind: DimKind
    lower: float
    upper: float

    @model_validator(mode="after")
    def _bounds(self):
        if not (self.lower < self.upper):
            raise ValueError(f"{self.name}: lower must be < upper")
        if self.kind == DimKind.LOG_REAL and self.lower <= 0:
            raise ValueError(f"{self.name}: LOG_REAL needs lower > 0")
        return self

    def decode(self, u: float) -> Union[float, int]:
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == DimKind.REAL:
            return self.lower + u * (self.upper - self.lower)
        if self.kind == DimKind.LOG_REAL:
            lo, hi = math.log(self.lower), math.log(self.upper)
            return math.exp(lo + u * (hi - lo))
        # Each integer owns an equal slice of [0, 1].
        lo, hi = int(math.ceil(self.lower)), int(math.floor(self.upper))
        v = round_half_up(lo - 0.5 + u * (hi - lo + 1))
        return int(min(max(v, lo), hi))

    def encode(self, v: float) -> float:
        if self.kind == DimKind.REAL:
            return (v - self.lower) / (self.upper - self.lower)
        if self.kind == DimKind.LOG_REAL:
            return (math.log(v) - math.log(self.lower)) / (math.log(self.upper) - math.log(self.lower))
        lo, hi = int(math.ceil(self.lower)), int(math.floor(self.upper))
        return (v - lo + 0.5) / (hi - lo + 1)


class ParamSpace(BaseModel):
    dims: list[Dim]

    @field_validator("dims")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("parameter space needs at least one dimension")
        names = [d.name for d in v]
        if len(set(names)) != len(names):
            raise ValueError("dimension names must be unique")
        return v

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def decode(self, x: Sequence[float]) -> dict[str, Any]:
        return {d.name: d.decode(u) for d, u in zip(self.dims, x)}

    def encode(self, params: dict[str, Any]) -> np.ndarray:
        return np.array([d.encode(params[d.name]) for d in self.dims])


def gbm_space() -> ParamSpace:
    return ParamSpace(dims=[
        Dim(name="learning_rate", kind=DimKind.LOG_REAL, lower=0.01, upper=0.3),
        Dim(name="max_depth", kind=DimKind.INT, lower=3, upper=8),
        Dim(name="n_rounds", kind=DimKind.INT, lower=50, upper=300),
    ])


def forest_space() -> ParamSpace:
    return ParamSpace(dims=[
        Dim(name="n_trees", kind=DimKind.INT, lower=50, upper=400),
        Dim(name="max_depth", kind=DimKind.INT, lower=4, upper=16),
    ])


# ── Gaussian process ─────────────────────────────────────────────────────────

class KernelSettings(BaseModel):
    lengthscale: Union[float, list[float]] = 0.2
    signal_variance: float = Field(1.0, gt=0)
    noise_variance: float = Field(1e-6, ge=JITTER_FLOOR)

    def lengthscales(self, d: int) -> np.ndarray:
        ls = np.broadcast_to(np.asarray(self.lengthscale, dtype=np.float64), (d,)).copy()
        if np.any(ls <= 0):
            raise ParameterError("lengthscales must be > 0")
        return ls


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    y: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).ravel()
        if np.any((x < 0) | (x > 1)):
            raise ParameterError("observation inputs must lie in the unit cube")
        if not math.isfinite(self.y):
            raise ParameterError("observation target must be finite")
        object.__setattr__(self, "x", x)


def sq_exp_kernel(A: np.ndarray, B: np.ndarray, ls: np.ndarray, s2: float) -> np.ndarray:
    D = (A[:, None, :] - B[None, :, :]) / ls
    return s2 * np.exp(-0.5 * np.sum(D * D, axis=2))


@dataclass(frozen=True)
class GpPosterior:
    X: np.ndarray
    y: np.ndarray                 # standardized targets
    y_mean: float
    y_std: float
    lengthscales: np.ndarray
    signal_variance: float
    noise_variance: float         # after any jitter escalation
    chol: tuple                   # scipy cho_factor output
    alpha: np.ndarray

    @property
    def prior_variance(self) -> float:
        return self.signal_variance * self.y_std ** 2

    def predict(self, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=np.float64))
        Ks = sq_exp_kernel(Xq, self.X, self.lengthscales, self.signal_variance)
        mean = Ks @ self.alpha
        c, lower = self.chol
        V = solve_triangular(c, Ks.T, lower=lower, trans=0 if lower else 1)
        var = self.signal_variance - np.sum(V * V, axis=0)
        var = np.clip(var, 0.0, self.signal_variance)
        return mean * self.y_std + self.y_mean, var * self.y_std ** 2


def gp_fit(obs: Sequence[Observation], settings: Optional[KernelSettings] = None) -> GpPosterior:
    settings = settings or KernelSettings()
    if not obs:
        raise DataError("gp_fit needs at least one observation")
    X = np.vstack([o.x for o in obs])
    y_raw = np.array([o.y for o in obs], dtype=np.float64)
    y_mean = float(y_raw.mean())
    y_std = float(y_raw.std())
    if y_std == 0.0:
        y_std = 1.0
    y = (y_raw - y_mean) / y_std

    ls = settings.lengthscales(X.shape[1])
    K = sq_exp_kernel(X, X, ls, settings.signal_variance)
    noise = max(settings.noise_variance, JITTER_FLOOR)
    while True:
        try:
            chol = cho_factor(K + noise * np.eye(len(y)), lower=True)
            if np.all(np.isfinite(chol[0])):
                break
        except LinAlgError:
            pass
        if noise >= JITTER_CEILING:
            raise ConditioningError(
                f"kernel matrix not positive definite with jitter {noise:g} ({len(y)} points)"
            )
        logger.debug("Cholesky failed at jitter %g, escalating", noise)
        noise = min(noise * 10.0, JITTER_CEILING)
    alpha = cho_solve(chol, y)
    return GpPosterior(
        X=X, y=y, y_mean=y_mean, y_std=y_std, lengthscales=ls,
        signal_variance=settings.signal_variance, noise_variance=noise,
        chol=chol, alpha=alpha,
    )


def expected_improvement(mean, stdev, best):
    """EI for minimization. Scalars in, float out; arrays in, array out."""
    mean = np.asarray(mean, dtype=np.float64)
    stdev = np.asarray(stdev, dtype=np.float64)
    diff = best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stdev > 0, diff / np.where(stdev > 0, stdev, 1.0), 0.0)
        ei = np.where(stdev > 0, diff * norm.cdf(z) + stdev * norm.pdf(z), np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


# ── Tuning loop ──────────────────────────────────────────────────────────────

@dataclass
class TrialRecord:
    trial: int
    params: dict[str, Any]
    objective: float
    incumbent: float
    status: str                   # "ok" | "failed" | "cached"


@dataclass
class TuneTrace:
    space: ParamSpace
    trials: list[TrialRecord] = field(default_factory=list)

    @property
    def incumbents(self) -> list[float]:
        return [t.incumbent for t in self.trials]


def latin_hypercube(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return np.column_stack([(rng.permutation(n) + rng.random(n)) / n for _ in range(d)])


def _key(params: dict[str, Any]) -> tuple:
    return tuple(sorted(params.items()))


def tune(
    objective: Callable[[dict[str, Any]], float],
    space: ParamSpace,
    budget: int,
    seed: int = 0,
    settings: Optional[KernelSettings] = None,
    n_candidates: int = N_CANDIDATES,
) -> tuple[dict[str, Any], TuneTrace]:
    """
    Minimize objective(params) over the space within `budget` trials.

    The first max(5, budget // 4) trials (capped at budget) come from a seeded
    Latin hypercube; the rest maximize EI over random candidates. A failing
    objective is recorded as +inf; for the surrogate such trials count as the
    worst value seen so far.
    """
    if budget < 2:
        raise ParameterError(f"budget must be >= 2, got {budget}")
    d = len(space.dims)
    n_init = min(budget, max(5, budget // 4))
    rng = np.random.default_rng(seed)
    init = latin_hypercube(n_init, d, rng)

    trace = TuneTrace(space=space)
    X_seen: list[np.ndarray] = []
    y_seen: list[float] = []
    cache: dict[tuple, float] = {}
    best_val = math.inf
    best_params: Optional[dict[str, Any]] = None

    for trial in range(budget):
        status = "ok"
        if trial < n_init:
            x = init[trial]
        else:
            x = _propose(space, X_seen, y_seen, cache, settings, n_candidates, seed, trial)
            if x is None:
                logger.info("Tuning stopped after %d trials: candidate space exhausted", trial)
                break
        params = space.decode(x)
        key = _key(params)
        if key in cache:
            val = cache[key]
            status = "cached"
        else:
            try:
                val = float(objective(params))
                if not math.isfinite(val):
                    raise ValueError(f"objective returned {val}")
            except Exception as e:
                logger.warning("Trial %d failed for %s: %s", trial + 1, params, e)
                val = math.inf
                status = "failed"
            cache[key] = val
        X_seen.append(np.asarray(x, dtype=np.float64))
        y_seen.append(val)
        if val < best_val:
            best_val, best_params = val, params
        trace.trials.append(TrialRecord(trial + 1, params, val, best_val, status))
        logger.debug("Trial %d %s -> %.6g (incumbent %.6g)", trial + 1, params, val, best_val)

    if best_params is None:
        raise DataError("every tuning trial failed")
    logger.info("Tuning done: %d trials, best %.6g at %s", len(trace.trials), best_val, best_params)
    return best_params, trace


def _propose(space, X_seen, y_seen, cache, settings, n_candidates, seed, trial):
    y = np.array(y_seen)
    finite = np.isfinite(y)
    if not finite.any():
        # Nothing to model yet: fall back to a seeded random point.
        return np.random.default_rng([seed, trial]).random(len(space.dims))
    y_fit = np.where(finite, y, y[finite].max())
    gp = gp_fit([Observation(x, float(v)) for x, v in zip(X_seen, y_fit)], settings)
    cand = np.random.default_rng([seed, trial]).random((n_candidates, len(space.dims)))
    mean, var = gp.predict(cand)
    ei = expected_improvement(mean, np.sqrt(var), float(y[finite].min()))
    for j in np.argsort(-ei, kind="stable"):
        if _key(space.decode(cand[j])) not in cache:
            return cand[j]
    return None


def export_trace_csv(trace: TuneTrace, path: str | Path) -> None:
    names = trace.space.names
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["trial"] + names + ["objective", "incumbent", "status"])
        for t in trace.trials:
            w.writerow([t.trial] + [t.params[n] for n in names]
                       + [repr(t.objective), repr(t.incumbent), t.status])
