"""Evaluation metrics: clustering agreement, effect-curve errors, RMST, importance."""

from __future__ import annotations

import io
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from cnsc.data import Cohort
from cnsc.errors import DomainError
from cnsc.nn import seeded_rng
from cnsc.objective import factual_nll
from cnsc.synth import GroundTruth, true_gate, true_population_effect

GRID_POINTS = 200
N_PERMUTATIONS = 10


@dataclass
class EffectCurve:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")


def _comb2(counts: np.ndarray) -> int:
    return sum(int(c) * (int(c) - 1) // 2 for c in np.ravel(counts))


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected Rand index from the contingency table.

    Pair counts are integers, so the ratio is formed exactly and rounded once.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be 1-d and of equal length")
    if a.size == 0:
        raise ValueError("adjusted Rand index of empty partitions is undefined")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    index = _comb2(table)
    rows = _comb2(table.sum(axis=1))
    cols = _comb2(table.sum(axis=0))
    total = a.size * (a.size - 1) // 2
    expected = Fraction(rows * cols, total) if total else Fraction(0)
    max_index = Fraction(rows + cols, 2)
    if max_index == expected:
        # only reachable when both partitions are the same trivial one
        return 1.0
    return float((index - expected) / (max_index - expected))


def _integrate_squared_gap(grid_a, va, grid_b, vb, t_max: float) -> float:
    lo = max(grid_a[0], grid_b[0])
    if t_max > max(grid_a[-1], grid_b[-1]):
        raise DomainError(f"t_max={t_max} lies beyond both grids")
    pts = np.union1d(grid_a, grid_b)
    pts = np.union1d(pts[(pts >= lo) & (pts <= t_max)], [t_max])
    diff = np.interp(pts, grid_a, va) - np.interp(pts, grid_b, vb)
    # exact integral of the squared piecewise-linear gap: the trapezoid value
    # minus h*(b-a)^2/6 on every interval
    a, b, h = diff[:-1], diff[1:], np.diff(pts)
    return float(np.sum(h * (a * a + a * b + b * b)) / 3.0)


def ise_group(est: EffectCurve, truth: EffectCurve, t_max: float) -> float:
    """Integrated squared gap between two effect curves on ``[0, t_max]``.

    Both curves are linearly interpolated onto the union of their grids and
    the square of the interpolated gap is integrated exactly.
    """
    return _integrate_squared_gap(est.grid, est.values, truth.grid, truth.values, t_max)


def evaluation_grid(cohort: Cohort, points: int = GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, last_event_time(cohort), points)


def last_event_time(cohort: Cohort) -> float:
    events = cohort.t[cohort.d == 1]
    return float(events.max() if events.size else cohort.t.max())


def population_effect(model, x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Average individual effect over the rows of ``x``."""
    return np.asarray(model.ite_curves(x, grid)).mean(axis=0)


def ise_population(model, ground_truth: GroundTruth, cohort: Cohort, t_max: float | None = None,
                   grid: np.ndarray | None = None, rep: int = 0) -> float:
    """ISE between the cohort-averaged estimated effect and the pooled oracle effect."""
    t_max = last_event_time(cohort) if t_max is None else t_max
    grid = np.linspace(0.0, t_max, GRID_POINTS) if grid is None else np.asarray(grid, dtype=float)
    est = population_effect(model, cohort.x, grid)
    truth = true_population_effect(ground_truth, grid, rep=rep)
    return _integrate_squared_gap(grid, est, grid, truth, t_max)


def match_subgroups(est_curves: np.ndarray, true_curves: np.ndarray, grid: np.ndarray, t_max: float):
    """Minimum-total-ISE assignment of estimated to true subgroups.

    Returns ``(pairs, cost)`` where ``pairs`` lists ``(est_index, true_index)``
    ordered by true index, and ``cost`` is the full ISE matrix.
    """
    cost = np.array([[_integrate_squared_gap(grid, e, grid, t, t_max) for t in true_curves] for e in est_curves])
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
    return pairs, cost


def elbow_select(nll_by_k) -> int:
    """Pick the K with the largest discrete second difference of the NLL curve.

    Ties go to the smallest K.
    """
    ks = sorted(nll_by_k)
    if len(ks) < 3:
        raise ValueError("elbow selection needs at least three values of K")
    if any(b - a != 1 for a, b in zip(ks, ks[1:])):
        raise ValueError("K values must be consecutive")
    v = np.array([nll_by_k[k] for k in ks], dtype=float)
    second = (v[:-2] - v[1:-1]) - (v[1:-1] - v[2:])
    tol = 1e-12 * max(1.0, float(np.max(np.abs(v))))
    best = int(np.flatnonzero(second >= second.max() - tol)[0])
    return ks[best + 1]


def rmst(grid, survival, horizon: float) -> float:
    """Area under a survival curve on ``[0, horizon]`` by the trapezoid rule."""
    grid = np.asarray(grid, dtype=float)
    survival = np.asarray(survival, dtype=float)
    if grid.shape != survival.shape or grid.ndim != 1:
        raise ValueError("grid and survival must align")
    if grid[0] != 0:
        raise DomainError("grid must start at time 0")
    if horizon > grid[-1] or horizon < 0:
        raise DomainError(f"horizon {horizon} outside the grid")
    keep = grid < horizon
    pts = np.append(grid[keep], horizon)
    vals = np.append(survival[keep], np.interp(horizon, grid, survival))
    return float(np.trapezoid(vals, pts))


def permutation_importance(model, cohort: Cohort, covariate: int, n_perm: int = N_PERMUTATIONS, seed: int = 0,
                           permutations=None) -> float:
    """Mean increase in unweighted factual NLL when one covariate column is shuffled."""
    if not 0 <= covariate < cohort.n_covariates:
        raise IndexError(f"covariate {covariate} out of range")
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    base = factual_nll(model, cohort)
    if permutations is None:
        rng = seeded_rng(seed, covariate)
        permutations = [rng.permutation(len(cohort)) for _ in range(n_perm)]
    deltas = []
    for perm in permutations:
        x = cohort.x.copy()
        x[:, covariate] = cohort.x[np.asarray(perm), covariate]
        deltas.append(factual_nll(model, cohort.with_x(x)) - base)
    return float(np.mean(deltas))


@dataclass
class MetricReport:
    test_nll: float
    t_max: float
    rmst_per_group_per_regime: list[list[float]]
    importance: list[float]
    rand_index: float | None = None
    ise_per_group: list[float] | None = None
    ise_pop: float | None = None
    group_matching: list[list[int]] | None = None
    curves: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("curves")
        return d

    def curves_csv(self) -> str:
        """Effect curves as CSV (grid, estimated per subgroup, true per subgroup)."""
        grid = self.curves["grid"]
        est = self.curves["estimated"]
        true = self.curves.get("true")
        header = ["t"] + [f"est_{k}" for k in range(len(est))]
        if true is not None:
            header += [f"true_{k}" for k in range(len(true))]
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        for i, t in enumerate(grid):
            row = [t] + [c[i] for c in est] + ([c[i] for c in true] if true is not None else [])
            buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return buf.getvalue()


def evaluate(model, cohort: Cohort, ground_truth: GroundTruth | None = None, n_perm: int = N_PERMUTATIONS,
             seed: int = 0, importance: bool = True) -> MetricReport:
    """Full report for one model on one (test) cohort.

    Without ground truth the clustering and effect-error fields stay ``None``.
    """
    t_max = last_event_time(cohort)
    grid = np.linspace(0.0, t_max, GRID_POINTS)
    surv = model.subgroup_survival(grid)  # (G, K, 2)
    rm = [[rmst(grid, surv[:, k, a], t_max) for a in (0, 1)] for k in range(model.k)]
    imp = [permutation_importance(model, cohort, j, n_perm, seed) for j in range(cohort.n_covariates)] if importance else []
    est_curves = model.gate_curves(grid)
    report = MetricReport(factual_nll(model, cohort), t_max, rm, imp,
                          curves={"grid": grid, "estimated": est_curves})
    if ground_truth is not None:
        if cohort.z is not None:
            report.rand_index = adjusted_rand_index(cohort.z, model.assign(cohort.x).hard_label)
        true_curves = np.array([true_gate(ground_truth, k, grid) for k in range(ground_truth.k)])
        pairs, cost = match_subgroups(est_curves, true_curves, grid, t_max)
        report.group_matching = [list(p) for p in pairs]
        report.ise_per_group = [float(cost[e, t]) for e, t in pairs]
        report.ise_pop = ise_population(model, ground_truth, cohort, t_max, grid)
        report.curves["true"] = true_curves
    return report
