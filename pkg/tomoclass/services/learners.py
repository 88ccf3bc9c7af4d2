"""
Tree learners: CART, random forest, multiclass gradient boosting, and the
greedy validation-weighted ensemble on top of them.

Every learner works on a FeatureTable and returns a Model that remembers the
column schema hash it was trained on. Randomness is drawn from generators
seeded by (seed, tree or round index), so the result does not depend on how
many workers run the per-tree jobs.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal, Optional, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, field_validator

from tomoclass.core.errors import DataError, DomainError, ParameterError, SchemaError
from tomoclass.services.cart import GINI, MSE, Tree, grow_tree, presort, resolve_candidates
from tomoclass.services.evaluation import Objective, objective_score
from tomoclass.services.features import FeatureTable

logger = logging.getLogger(__name__)

MAX_ENSEMBLE_STEPS = 25
PREDICT_CHUNK_ROWS = 4096

ClassWeight = Literal["none", "balanced"]


# ── Parameters ───────────────────────────────────────────────────────────────

class TreeParams(BaseModel):
    max_depth: int = Field(12, ge=1)
    min_samples_leaf: int = Field(5, ge=1)
    n_feature_candidates: Union[int, Literal["all", "sqrt", "log2"]] = "all"
    class_weight: ClassWeight = "none"

    @field_validator("n_feature_candidates")
    @classmethod
    def _positive(cls, v):
        if isinstance(v, int) and v < 1:
            raise ValueError("n_feature_candidates must be >= 1")
        return v


class ForestParams(BaseModel):
    n_trees: int = Field(200, ge=1)
    tree: TreeParams = Field(default_factory=lambda: TreeParams(n_feature_candidates="sqrt"))
    bootstrap: bool = True


class GbmParams(BaseModel):
    n_rounds: int = Field(100, ge=1)
    learning_rate: float = Field(0.1, gt=0.0, le=1.0)
    tree: TreeParams = Field(default_factory=lambda: TreeParams(max_depth=6))
    subsample: float = Field(1.0, gt=0.0, le=1.0)


class ModelKind(str, Enum):
    TREE = "tree"
    FOREST = "forest"
    GBM = "gbm"
    ENSEMBLE = "ensemble"


@dataclass
class Model:
    kind: ModelKind
    classes: np.ndarray                 # int64 ascending class ids
    schema_hash: str
    n_features: int
    seed: int
    params: dict = field(default_factory=dict)
    trees: list[Tree] = field(default_factory=list)
    learning_rate: float = 0.0          # GBM only
    train_loss: list[float] = field(default_factory=list)
    members: list["Model"] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return int(self.classes.shape[0])


# ── Helpers ──────────────────────────────────────────────────────────────────

def _prepare(train: FeatureTable, class_weight: str):
    if len(train) == 0:
        raise DataError("training table is empty")
    classes = np.unique(train.labels).astype(np.int64)
    y = np.searchsorted(classes, train.labels)
    if class_weight == "balanced":
        counts = np.bincount(y, minlength=len(classes)).astype(np.float64)
        w = (len(y) / (len(classes) * counts))[y]
    else:
        w = np.ones(len(y))
    return classes, y, w


def softmax(F: np.ndarray) -> np.ndarray:
    Z = F - F.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def multinomial_logloss(F: np.ndarray, y: np.ndarray) -> float:
    Z = F - F.max(axis=1, keepdims=True)
    log_p = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    return float(-log_p[np.arange(len(y)), y].mean())


def softmax_residuals(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Negative gradient of the multinomial log-loss: 1{y_i=k} - p_ik."""
    R = -softmax(F)
    R[np.arange(len(y)), y] += 1.0
    return R


def _fit_cart(X, order, y_onehot_w, counts, p: TreeParams, rng) -> Tree:
    return grow_tree(
        X, order, y_onehot_w, counts, GINI,
        max_depth=p.max_depth,
        min_samples_leaf=p.min_samples_leaf,
        n_candidates=resolve_candidates(p.n_feature_candidates, X.shape[1]),
        rng=rng,
    )


# ── Training ─────────────────────────────────────────────────────────────────

def train_tree(train: FeatureTable, p: Optional[TreeParams] = None, seed: int = 0) -> Model:
    p = p or TreeParams()
    classes, y, w = _prepare(train, p.class_weight)
    X = train.X
    stats = np.zeros((len(y), len(classes)))
    stats[np.arange(len(y)), y] = w
    tree = _fit_cart(X, presort(X), stats, np.ones(len(y), dtype=np.int64), p,
                     np.random.default_rng([seed, 0]))
    logger.info("CART: %d nodes, depth %d, %d classes", tree.n_nodes, tree.depth, len(classes))
    return Model(
        kind=ModelKind.TREE, classes=classes, schema_hash=train.schema_hash,
        n_features=X.shape[1], seed=int(seed), params=p.model_dump(), trees=[tree],
    )


def train_forest(train: FeatureTable, p: Optional[ForestParams] = None, seed: int = 0,
                 n_jobs: int = 1) -> Model:
    p = p or ForestParams()
    classes, y, w = _prepare(train, p.tree.class_weight)
    X = train.X
    n = len(y)
    order = presort(X)
    stats_w = np.zeros((n, len(classes)))
    stats_w[np.arange(n), y] = w

    def fit_one(t: int) -> Tree:
        rng = np.random.default_rng([seed, t])
        if p.bootstrap:
            counts = np.bincount(rng.integers(0, n, size=n), minlength=n)
        else:
            counts = np.ones(n, dtype=np.int64)
        # One-hot stats scaled by multiplicity so duplicate draws weigh in.
        return _fit_cart(X, order, stats_w * counts[:, None], counts, p.tree, rng)

    trees = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(fit_one)(t) for t in range(p.n_trees))
    logger.info(
        "Forest: %d trees, mean depth %.1f, %d classes",
        len(trees), float(np.mean([t.depth for t in trees])), len(classes),
    )
    return Model(
        kind=ModelKind.FOREST, classes=classes, schema_hash=train.schema_hash,
        n_features=X.shape[1], seed=int(seed), params=p.model_dump(), trees=trees,
    )


def train_gbm(train: FeatureTable, p: Optional[GbmParams] = None, seed: int = 0,
              n_jobs: int = 1) -> Model:
    """
    Multiclass softmax boosting.

    Each round fits one regression tree per class to r_ik = 1{y_i=k} - p_ik
    (squared-error splits) and sets leaf values by the one-step Newton rule

        gamma = (K-1)/K * sum(w r) / sum(w |r| (1-|r|))

    then adds learning_rate * tree to F_k. All K trees of a round use the
    probabilities from the start of that round.
    """
    p = p or GbmParams()
    classes, y, w = _prepare(train, p.tree.class_weight)
    K = len(classes)
    if K < 2:
        raise DomainError("gradient boosting needs at least 2 classes in the training table")
    X = train.X
    n = len(y)
    order = presort(X)
    n_cand = resolve_candidates(p.tree.n_feature_candidates, X.shape[1])
    scale = (K - 1.0) / K

    F = np.zeros((n, K))
    losses = [multinomial_logloss(F, y)]
    trees: list[Tree] = []
    for r in range(p.n_rounds):
        rng = np.random.default_rng([seed, r])
        if p.subsample < 1.0:
            take = rng.choice(n, size=max(1, int(round(p.subsample * n))), replace=False)
            inbag = np.zeros(n, dtype=np.int64)
            inbag[take] = 1
        else:
            inbag = np.ones(n, dtype=np.int64)
        R = softmax_residuals(F, y)
        wr = w * inbag

        def fit_class(k: int) -> Tree:
            rk = R[:, k]
            num = wr * rk
            den = wr * np.abs(rk) * (1.0 - np.abs(rk))

            def leaf_value(rows):
                d = den[rows].sum()
                if d < 1e-150:
                    return np.zeros(1)
                return np.array([scale * num[rows].sum() / d])

            return grow_tree(
                X, order, np.column_stack([num, wr]), inbag, MSE,
                max_depth=p.tree.max_depth,
                min_samples_leaf=p.tree.min_samples_leaf,
                n_candidates=n_cand,
                rng=np.random.default_rng([seed, r, k]),
                leaf_value=leaf_value,
            )

        round_trees = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(fit_class)(k) for k in range(K)
        )
        for k, t in enumerate(round_trees):
            F[:, k] += p.learning_rate * t.predict(X)[:, 0]
        trees.extend(round_trees)
        losses.append(multinomial_logloss(F, y))
        logger.debug("GBM round %d: train log-loss %.6f", r + 1, losses[-1])

    logger.info("GBM: %d rounds x %d classes, final train log-loss %.4f", p.n_rounds, K, losses[-1])
    return Model(
        kind=ModelKind.GBM, classes=classes, schema_hash=train.schema_hash,
        n_features=X.shape[1], seed=int(seed), params=p.model_dump(), trees=trees,
        learning_rate=p.learning_rate, train_loss=losses,
    )


# ── Prediction ───────────────────────────────────────────────────────────────

def _proba_block(model: Model, X: np.ndarray) -> np.ndarray:
    if model.kind in (ModelKind.TREE, ModelKind.FOREST):
        acc = np.zeros((X.shape[0], model.n_classes))
        for t in model.trees:
            acc += t.predict(X)
        P = acc / len(model.trees)
    elif model.kind == ModelKind.GBM:
        K = model.n_classes
        F = np.zeros((X.shape[0], K))
        for i, t in enumerate(model.trees):
            F[:, i % K] += model.learning_rate * t.predict(X)[:, 0]
        P = softmax(F)
    else:
        P = np.zeros((X.shape[0], model.n_classes))
        for member, wt in zip(model.members, model.weights):
            idx = np.searchsorted(model.classes, member.classes)
            P[:, idx] += wt * _proba_block(member, X)
    P = np.clip(P, 0.0, None)
    return P / P.sum(axis=1, keepdims=True)


def predict_proba(model: Model, rows: FeatureTable, n_jobs: int = 1) -> np.ndarray:
    if rows.schema_hash != model.schema_hash:
        raise SchemaError(
            f"feature schema {rows.schema_hash} does not match the model's {model.schema_hash}"
        )
    X = rows.X
    if X.shape[0] == 0:
        return np.zeros((0, model.n_classes))
    bounds = list(range(0, X.shape[0], PREDICT_CHUNK_ROWS)) + [X.shape[0]]
    parts = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_proba_block)(model, X[a:b]) for a, b in zip(bounds[:-1], bounds[1:])
    )
    return np.vstack(parts)


def predict(model: Model, rows: FeatureTable, n_jobs: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """(labels, probabilities); argmax ties go to the lowest class id."""
    P = predict_proba(model, rows, n_jobs=n_jobs)
    labels = model.classes[np.argmax(P, axis=1)] if len(P) else np.zeros(0, dtype=np.int64)
    return labels, P


# ── Ensembling ───────────────────────────────────────────────────────────────

def greedy_ensemble(
    models: list[Model],
    val: FeatureTable,
    objective: Objective = Objective.ACCURACY,
    max_steps: int = MAX_ENSEMBLE_STEPS,
    n_jobs: int = 1,
) -> Model:
    """Forward selection with replacement over probability-averaged members."""
    if not models:
        raise ParameterError("greedy_ensemble needs at least one candidate model")
    if len(val) == 0:
        raise DataError("validation table is empty")
    classes = np.unique(np.concatenate([m.classes for m in models])).astype(np.int64)
    probs = []
    for m in models:
        P = np.zeros((len(val), len(classes)))
        P[:, np.searchsorted(classes, m.classes)] = predict_proba(m, val, n_jobs=n_jobs)
        probs.append(P)

    counts = np.zeros(len(models), dtype=np.int64)
    running = np.zeros((len(val), len(classes)))
    best = -np.inf
    for step in range(max_steps):
        scores = [
            objective_score(val.labels, classes[np.argmax(running + P, axis=1)], objective)
            for P in probs
        ]
        j = int(np.argmax(scores))
        if scores[j] <= best:
            break
        counts[j] += 1
        running += probs[j]
        best = scores[j]
        logger.debug("Ensemble step %d: add candidate %d, %s=%.4f", step + 1, j, objective.value, best)

    keep = np.nonzero(counts)[0]
    weights = (counts[keep] / counts.sum()).tolist()
    logger.info(
        "Greedy ensemble: %d of %d candidates kept, weights %s, %s=%.4f",
        len(keep), len(models), [round(x, 3) for x in weights], objective.value, best,
    )
    return Model(
        kind=ModelKind.ENSEMBLE, classes=classes, schema_hash=models[0].schema_hash,
        n_features=models[0].n_features, seed=models[0].seed,
        params={"objective": objective.value, "steps": int(counts.sum()),
                "candidates": [models[i].kind.value for i in keep]},
        members=[models[i] for i in keep], weights=weights,
    )
