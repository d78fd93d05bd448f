"""Two-stage training, cross-validation, random search and the K sweep."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cnsc.data import Cohort
from cnsc.errors import DegenerateDataError, NumericError
from cnsc.model import CnscModel, Normalizer
from cnsc.nn import MLP, Adam, seeded_rng
from cnsc.objective import factual_nll, ipw_weights, propensity_ce, weighted_nll

log = logging.getLogger(__name__)

GRID = {
    "depth": (1, 2, 3),
    "latent_dim": (25, 50, 100),
    "learning_rate": (1e-3, 1e-4),
    "batch_size": (250, 500),
}

# stream ids under a run seed
_SPLIT_STREAM = 11
_SEARCH_STREAM = 12
_W_INIT_STREAM = 21
_W_SHUFFLE_STREAM = 22
_MODEL_SHUFFLE_STREAM = 31


@dataclass(frozen=True)
class TrainConfig:
    k: int = 3
    epochs: int = 1000
    batch_size: int = 250
    learning_rate: float = 1e-3
    depth: int = 1
    width: int = 50
    latent_dim: int = 25
    patience: int = 10
    seed: int = 0
    adjusted: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FoldSplit:
    train: np.ndarray
    early_stop: np.ndarray
    selection: np.ndarray
    test: np.ndarray


@dataclass
class TrainReport:
    config: dict
    val_trace: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_nll: float = float("inf")
    test_nll: float | None = None
    wall_clock: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PropensityModel:
    net: MLP
    normalizer: Normalizer

    def __call__(self, x) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.net(self.normalizer.transform(np.atleast_2d(x)))[:, 0]))
        return np.clip(p, 1e-12, 1.0 - 1e-12)


def make_folds(n: int, n_folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Outer folds; each development set is split 80/10/10 into train/early-stop/selection."""
    rng = seeded_rng(seed, _SPLIT_STREAM)
    order = rng.permutation(n)
    chunks = np.array_split(order, n_folds)
    splits = []
    for i, test in enumerate(chunks):
        dev = np.concatenate([c for j, c in enumerate(chunks) if j != i])
        dev = dev[rng.permutation(dev.size)]
        n_tr = int(round(0.8 * dev.size))
        n_es = int(round(0.1 * dev.size))
        splits.append(FoldSplit(dev[:n_tr], dev[n_tr : n_tr + n_es], dev[n_tr + n_es :], np.sort(test)))
    return splits


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def train_propensity(train: Cohort, val: Cohort, config: TrainConfig, normalizer: Normalizer) -> PropensityModel:
    """Fit the treatment classifier by cross-entropy with early stopping on ``val``."""
    if np.unique(train.a).size < 2:
        raise DegenerateDataError("treatment column has a single class")
    rng = seeded_rng(config.seed, _W_INIT_STREAM)
    net = MLP.build([train.n_covariates, *[config.width] * config.depth, 1], rng)
    xtr, xval = normalizer.transform(train.x), normalizer.transform(val.x)
    params = net.parameters("W.")
    opt = Adam(lr=config.learning_rate)
    shuffle = seeded_rng(config.seed, _W_SHUFFLE_STREAM)
    best, best_params, stale = float("inf"), _snapshot(params), 0
    for epoch in range(config.epochs):
        for idx in _batches(len(train), config.batch_size, shuffle):
            _, grads = propensity_ce(net, xtr[idx], train.a[idx], return_grad=True)
            opt.step(params, grads)
        val_loss = propensity_ce(net, xval, val.a)
        if val_loss < best:
            best, best_params, stale = val_loss, _snapshot(params), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    for k, v in best_params.items():
        params[k][...] = v
    return PropensityModel(net, normalizer)


def sample_weights(model: CnscModel, cohort: Cohort, adjusted: bool) -> np.ndarray:
    if not adjusted:
        return np.ones(len(cohort))
    return ipw_weights(model.propensity(cohort.x), cohort.a)


def train_model(
    train: Cohort, val: Cohort, propensity: PropensityModel, config: TrainConfig
) -> tuple[CnscModel, TrainReport]:
    """Fit assignment, hazards and latents on the weighted likelihood.

    The propensity network is copied into the model and never updated.
    Parameters are restored to the epoch with the lowest validation loss.
    """
    start = time.perf_counter()
    model = CnscModel.build(
        train.n_covariates,
        config.k,
        latent_dim=config.latent_dim,
        depth=config.depth,
        width=config.width,
        seed=config.seed,
        normalizer=propensity.normalizer,
        config=config.to_dict(),
    )
    model.W = propensity.net.copy()
    w_train = sample_weights(model, train, config.adjusted)
    w_val = sample_weights(model, val, config.adjusted)
    params = model.stage2_parameters()
    opt = Adam(lr=config.learning_rate)
    shuffle = seeded_rng(config.seed, _MODEL_SHUFFLE_STREAM)
    report = TrainReport(config=config.to_dict(), seed=config.seed)
    best_params, stale = _snapshot(params), 0
    for epoch in range(config.epochs):
        for b, idx in enumerate(_batches(len(train), config.batch_size, shuffle)):
            loss, grads = weighted_nll(model, train.subset(idx), w_train[idx], return_grad=True)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}")
            try:
                opt.step(params, grads)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}") from exc
        val_loss = weighted_nll(model, val, w_val)
        report.val_trace.append(val_loss)
        if val_loss < report.best_val_nll:
            report.best_val_nll, report.best_epoch = val_loss, epoch
            best_params, stale = _snapshot(params), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_parameters(best_params)
    report.wall_clock = time.perf_counter() - start
    log.info("trained K=%d in %d epochs (best %d, val %.5f)", config.k, len(report.val_trace),
             report.best_epoch, report.best_val_nll)
    return model, report


def fit(cohort: Cohort, split: FoldSplit, config: TrainConfig) -> tuple[CnscModel, TrainReport]:
    """Both training stages on one split; the report carries the test NLL."""
    train, val = cohort.subset(split.train), cohort.subset(split.early_stop)
    normalizer = Normalizer.fit(train.x, train.t)
    propensity = train_propensity(train, val, config, normalizer)
    model, report = train_model(train, val, propensity, config)
    if split.test.size:
        report.test_nll = factual_nll(model, cohort.subset(split.test))
    return model, report


def grid_configs(base: TrainConfig, grid: dict | None = None) -> list[TrainConfig]:
    grid = GRID if grid is None else grid
    names = sorted(grid)
    return [base.replace(**dict(zip(names, values))) for values in itertools.product(*(grid[n] for n in names))]


@dataclass
class SearchResult:
    best: TrainConfig
    candidates: list[TrainConfig]
    scores: list[float]
    model: CnscModel
    report: TrainReport


def random_grid_search(
    cohort: Cohort,
    split: FoldSplit,
    base: TrainConfig,
    n_iter: int = 10,
    seed: int = 0,
    grid: dict | None = None,
) -> SearchResult:
    """Sample ``n_iter`` distinct grid points, keep the best selection-split NLL.

    The score is the training objective (weighted when ``base.adjusted``)
    evaluated on the selection split. Returns the winning fitted model too.
    """
    configs = grid_configs(base, grid)
    rng = seeded_rng(seed, _SEARCH_STREAM)
    picks = rng.choice(len(configs), size=min(n_iter, len(configs)), replace=False)
    candidates = [configs[i] for i in picks]
    selection = cohort.subset(split.selection)
    scores, best = [], None
    for cfg in candidates:
        model, report = fit(cohort, split, cfg)
        score = weighted_nll(model, selection, sample_weights(model, selection, cfg.adjusted))
        scores.append(score)
        log.info("candidate %s -> selection NLL %.5f", _short(cfg), score)
        if best is None or score < best[0]:
            best = (score, cfg, model, report)
    return SearchResult(best[1], candidates, scores, best[2], best[3])


def _short(cfg: TrainConfig) -> str:
    return f"depth={cfg.depth} L={cfg.latent_dim} lr={cfg.learning_rate:g} bs={cfg.batch_size}"


@dataclass
class FoldResult:
    fold: int
    config: TrainConfig
    model: CnscModel
    report: TrainReport


def cross_validate(
    cohort: Cohort,
    base: TrainConfig,
    n_folds: int = 5,
    folds: list[int] | None = None,
    tune: bool = True,
    n_iter: int = 10,
    grid: dict | None = None,
) -> list[FoldResult]:
    """Train one model per outer fold (optionally tuned) and report its test NLL."""
    splits = make_folds(len(cohort), n_folds, base.seed)
    results = []
    for i in folds if folds is not None else range(n_folds):
        split = splits[i]
        run = base.replace(seed=int(seeded_rng(base.seed, i).integers(2**31)))
        if tune:
            res = random_grid_search(cohort, split, run, n_iter=n_iter, seed=run.seed, grid=grid)
            config, model, report = res.best, res.model, res.report
        else:
            config = run
            model, report = fit(cohort, split, run)
        results.append(FoldResult(i, config, model, report))
    return results


@dataclass
class SweepResult:
    ks: list[int]
    mean_nll: list[float]
    std_nll: list[float]
    fold_nll: list[list[float]]

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.ks, self.mean_nll))


def sweep_k(
    cohort: Cohort,
    k_range,
    base: TrainConfig,
    n_folds: int = 5,
    folds: list[int] | None = None,
    tune: bool = True,
    n_iter: int = 10,
    grid: dict | None = None,
) -> SweepResult:
    """Cross-validated unweighted test NLL for every K in ``k_range``."""
    ks = list(k_range)
    if any(b - a != 1 for a, b in zip(ks, ks[1:])):
        raise ValueError("k_range must be contiguous and increasing")
    means, stds, per_fold = [], [], []
    for k in ks:
        results = cross_validate(cohort, base.replace(k=k), n_folds, folds, tune, n_iter, grid)
        vals = [r.report.test_nll for r in results]
        per_fold.append(vals)
        means.append(float(np.mean(vals)))
        stds.append(float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
        log.info("K=%d test NLL %.5f", k, means[-1])
    return SweepResult(ks, means, stds, per_fold)
