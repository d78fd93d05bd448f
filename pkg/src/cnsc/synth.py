"""Synthetic cohorts with known subgroups and potential outcomes.

Three subgroups shift the first two covariates; event times under each
regime follow shifted Gompertz laws whose shape and shift depend on
subgroup coefficients and on the covariates. Treatment is either randomised
or depends on the squared norm of the two group-informative covariates.
Censoring is an independent Gompertz draw.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cnsc.data import Cohort
from cnsc.errors import DomainError
from cnsc.nn import seeded_rng

SCENARIOS = ("randomised", "observational")
N_COVARIATES = 10
CENTRES = np.array([[0.0, 2.25], [-2.25, -1.0], [2.25, -1.0]])

# stream ids under the generation seed
_COHORT_STREAM = 0
_ORACLE_STREAM = 1


@dataclass
class GeneratorConfig:
    n: int = 30000
    k: int = 3
    scenario: str = "randomised"
    seed: int = 0
    mc_oracle_size: int = 100000

    def __post_init__(self):
        self.scenario = self.scenario.lower()
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not self.n >= self.k >= 1:
            raise ValueError("need n >= k >= 1")
        if self.mc_oracle_size < 1000:
            raise ValueError("mc_oracle_size must be at least 1000")


@dataclass
class GroundTruth:
    centres: np.ndarray  # (k, 2)
    beta0: np.ndarray  # (k, 10) control shape coefficients
    gamma0: np.ndarray  # (k, 10) control shift coefficients
    beta1: np.ndarray  # (k, 10) treated shape coefficients
    gamma1: np.ndarray  # (k, 10) treated shift coefficients
    beta_c: np.ndarray  # (5,) censoring coefficients
    z: np.ndarray
    p: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    c: np.ndarray
    scenario: str = "randomised"
    seed: int = 0
    mc_oracle_size: int = 100000
    _oracle_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def k(self) -> int:
        return self.beta0.shape[0]

    def to_dict(self) -> dict:
        d = {}
        for name in ("centres", "beta0", "gamma0", "beta1", "gamma1", "beta_c", "z", "p", "t0", "t1", "c"):
            d[name] = getattr(self, name).tolist()
        d.update(scenario=self.scenario, seed=self.seed, mc_oracle_size=self.mc_oracle_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruth:
        arrays = {k: np.asarray(d[k], dtype=int if k == "z" else float) for k in
                  ("centres", "beta0", "gamma0", "beta1", "gamma1", "beta_c", "z", "p", "t0", "t1", "c")}
        return cls(**arrays, scenario=d["scenario"], seed=int(d["seed"]), mc_oracle_size=int(d["mc_oracle_size"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> GroundTruth:
        return cls.from_dict(json.loads(Path(path).read_text()))


def group_centres(k: int) -> np.ndarray:
    """The three published centres; other values of ``k`` use a circle of radius 2.25."""
    if k == 3:
        return CENTRES.copy()
    if k < 3:
        return CENTRES[:k].copy()
    angles = np.pi / 2 + 2 * np.pi * np.arange(k) / k
    return 2.25 * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniform draws on the open interval (0, 1)."""
    return (rng.integers(0, 2**53, size=size) + 0.5) / 2.0**53


def gompertz_sample(shape, shift, u) -> np.ndarray:
    """Inverse-CDF draw ``shift + log(1 - log(u)/shape)``.

    The unshifted law has survival ``exp(-shape * (exp(t) - 1))``.
    """
    shape = np.asarray(shape, dtype=float)
    shift = np.asarray(shift, dtype=float)
    u = np.asarray(u, dtype=float)
    if np.any(shape <= 0):
        raise DomainError("Gompertz shape must be positive")
    if np.any(shift < 0):
        raise DomainError("Gompertz shift must be non-negative")
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("uniform draw must lie in (0, 1)")
    return shift + np.log1p(-np.log(u) / shape)


def gompertz_survival(t, shape, shift=0.0) -> np.ndarray:
    """Closed-form ``P(T >= t)`` for the shifted Gompertz law."""
    t = np.asarray(t, dtype=float)
    excess = np.maximum(t - shift, 0.0)
    return np.exp(-shape * np.expm1(excess))


def empirical_cdf(values):
    """Return ``F`` with ``F(v) = #{values <= v} / n`` (ties share the max rank)."""
    ref = np.sort(np.asarray(values, dtype=float))
    if ref.size == 0:
        raise ValueError("empirical_cdf needs at least one value")

    def F(v):
        return np.searchsorted(ref, v, side="right") / ref.size

    return F


def informative_score(x: np.ndarray) -> np.ndarray:
    """Squared norm of the two group-informative covariates."""
    return x[:, 0] ** 2 + x[:, 1] ** 2


def _shape_control(beta, x):
    return np.abs(beta[:, 0]) + np.einsum("ij,ij->i", x[:, 5:10], beta[:, 5:10]) ** 2


def _shape_treated(beta, x):
    return np.abs(beta[:, 0]) + np.einsum("ij,ij->i", x[:, 1:5], beta[:, 1:5]) ** 2


def _shift_control(gamma, x):
    return np.abs(gamma[:, 0]) + np.abs(np.einsum("ij,ij->i", x[:, 1:5], gamma[:, 1:5]))


def _shift_treated(gamma, x):
    return np.abs(gamma[:, 0]) + np.abs(np.einsum("ij,ij->i", x[:, 5:10], gamma[:, 5:10]))


def regime_parameters(gt: GroundTruth, x: np.ndarray, z: np.ndarray):
    """Per-patient Gompertz ``(shape0, shift0, shape1, shift1)``."""
    return (
        _shape_control(gt.beta0[z], x),
        _shift_control(gt.gamma0[z], x),
        _shape_treated(gt.beta1[z], x),
        _shift_treated(gt.gamma1[z], x),
    )


def _draw_covariates(rng, centres, z):
    x = rng.standard_normal((z.shape[0], N_COVARIATES))
    x[:, :2] += centres[z]
    return x


def generate(config: GeneratorConfig) -> tuple[Cohort, GroundTruth]:
    """Draw a cohort and its ground truth.

    Both treatment scenarios consume the same random stream, so the
    randomised and observational cohorts of one seed share covariates,
    potential outcomes and censoring times and differ only in treatment.
    """
    rng = seeded_rng(config.seed, _COHORT_STREAM)
    k, n = config.k, config.n
    beta0 = np.empty((k, N_COVARIATES))
    gamma0 = np.empty((k, N_COVARIATES))
    beta1 = np.empty((k, N_COVARIATES))
    gamma1 = np.empty((k, N_COVARIATES))
    for g in range(k):
        beta0[g] = rng.standard_normal(N_COVARIATES)
        gamma0[g] = rng.standard_normal(N_COVARIATES)
        beta1[g] = rng.standard_normal(N_COVARIATES)
        gamma1[g] = rng.standard_normal(N_COVARIATES)
    beta_c = rng.standard_normal(5)
    centres = group_centres(k)

    z = rng.integers(0, k, size=n)
    x = _draw_covariates(rng, centres, z)
    gt = GroundTruth(centres, beta0, gamma0, beta1, gamma1, beta_c, z, np.empty(0), np.empty(0), np.empty(0),
                     config.scenario, config.seed, config.mc_oracle_size)
    w0, s0, w1, s1 = regime_parameters(gt, x, z)
    t0 = gompertz_sample(w0, s0, open_uniform(rng, n))
    t1 = gompertz_sample(w1, s1, open_uniform(rng, n))

    p = rng.uniform(0.25, 0.75, size=n)
    u_treat = open_uniform(rng, n)
    a_rand = (u_treat < p).astype(int)
    phi = informative_score(x)
    a_obs = (u_treat < empirical_cdf(phi)(phi) * p).astype(int)
    a = a_rand if config.scenario == "randomised" else a_obs

    w_c = (x[:, 5:10] @ beta_c) ** 2
    c = gompertz_sample(w_c, 0.0, open_uniform(rng, n))

    t_event = np.where(a == 1, t1, t0)
    t = np.minimum(c, t_event)
    d = (c > t_event).astype(int)

    gt.p, gt.t0, gt.t1, gt.c = p, t0, t1, c
    return Cohort(x, t, d, a, z, config.scenario, config.seed), gt


def _oracle_sample(gt: GroundTruth, k: int, size: int, rep: int):
    """Fresh uncensored potential outcomes for subgroup ``k``."""
    rng = seeded_rng(gt.seed, _ORACLE_STREAM, k, rep)
    z = np.full(size, k)
    x = _draw_covariates(rng, gt.centres, z)
    w0, s0, w1, s1 = regime_parameters(gt, x, z)
    t0 = gompertz_sample(w0, s0, open_uniform(rng, size))
    t1 = gompertz_sample(w1, s1, open_uniform(rng, size))
    return np.sort(t0), np.sort(t1)


def _survival_on_grid(sorted_times: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return 1.0 - np.searchsorted(sorted_times, grid, side="left") / sorted_times.size


def true_gate(gt: GroundTruth, k: int, grid, size: int | None = None, rep: int = 0) -> np.ndarray:
    """Monte-Carlo ``P(T1 >= t | Z=k) - P(T0 >= t | Z=k)`` on ``grid``.

    ``rep`` selects an independent oracle redraw.
    """
    if not 0 <= k < gt.k:
        raise IndexError(f"subgroup {k} out of range")
    size = gt.mc_oracle_size if size is None else size
    key = (k, size, rep)
    if key not in gt._oracle_cache:
        gt._oracle_cache[key] = _oracle_sample(gt, k, size, rep)
    t0, t1 = gt._oracle_cache[key]
    grid = np.asarray(grid, dtype=float)
    return _survival_on_grid(t1, grid) - _survival_on_grid(t0, grid)


def true_population_effect(gt: GroundTruth, grid, size: int | None = None, rep: int = 0) -> np.ndarray:
    """Oracle effect pooled over subgroups (equal group probabilities)."""
    return np.mean([true_gate(gt, k, grid, size, rep) for k in range(gt.k)], axis=0)


def individual_effect(gt: GroundTruth, x: np.ndarray, z: np.ndarray, grid) -> np.ndarray:
    """Closed-form ``tau(t, x)`` for known labels, shape ``(N, G)``."""
    w0, s0, w1, s1 = regime_parameters(gt, np.atleast_2d(x), np.atleast_1d(z))
    g = np.asarray(grid, dtype=float)[None, :]
    return gompertz_survival(g, w1[:, None], s1[:, None]) - gompertz_survival(g, w0[:, None], s0[:, None])


def config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)
