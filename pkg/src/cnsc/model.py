"""The assembled mixture model: assignment, propensity and subgroup hazards."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from cnsc.errors import DomainError, ShapeError
from cnsc.hazard import MonotoneNet
from cnsc.nn import MLP, DenseLayer, log_softmax, seeded_rng, softmax

CHECKPOINT_FORMAT = "cnsc-checkpoint"
CHECKPOINT_VERSION = 1
PROPENSITY_CLIP = 1e-12


@dataclass
class Normalizer:
    """Covariate z-scoring and time rescaling fitted on a training fold."""

    mean: np.ndarray
    std: np.ndarray
    time_scale: float = 1.0

    @classmethod
    def identity(cls, n_covariates: int) -> Normalizer:
        return cls(np.zeros(n_covariates), np.ones(n_covariates), 1.0)

    @classmethod
    def fit(cls, x: np.ndarray, t: np.ndarray) -> Normalizer:
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        scale = float(np.max(t))
        return cls(x.mean(axis=0), std, scale if scale > 0 else 1.0)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class SubgroupPosterior:
    probabilities: np.ndarray  # (K,) or (N, K)
    hard_label: np.ndarray | int


def config_hash(config: dict | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=d["dtype"]).reshape(d["shape"]).astype(float)


class CnscModel:
    """Subgroup assignment ``G``, propensity ``W``, monotone hazards ``M`` and latents.

    Covariates passed to the public methods are on the raw scale; the stored
    normalizer is applied internally. Times are on the raw scale as well.
    """

    def __init__(
        self,
        assign_net: MLP,
        propensity_net: MLP,
        hazard_net: MonotoneNet,
        latents: np.ndarray,
        normalizer: Normalizer,
        config: dict | None = None,
    ):
        latents = np.asarray(latents, dtype=float)
        if latents.ndim != 2 or latents.shape[0] != assign_net.n_out:
            raise ShapeError("one latent vector per subgroup is required")
        if latents.shape[1] != hazard_net.latent_dim:
            raise ShapeError("latent dimension does not match the hazard network")
        if propensity_net.n_out != 1 or propensity_net.n_in != assign_net.n_in:
            raise ShapeError("propensity network must map covariates to one logit")
        self.G = assign_net
        self.W = propensity_net
        self.M = hazard_net
        self.latents = latents
        self.normalizer = normalizer
        self.config = dict(config or {})

    @classmethod
    def build(
        cls,
        n_covariates: int,
        k: int,
        latent_dim: int = 25,
        depth: int = 1,
        width: int = 50,
        seed: int = 0,
        normalizer: Normalizer | None = None,
        config: dict | None = None,
    ) -> CnscModel:
        if k < 1:
            raise ValueError("k must be at least 1")
        rng = seeded_rng(seed, 101)
        hidden = [width] * depth
        G = MLP.build([n_covariates, *hidden, k], rng)
        W = MLP.build([n_covariates, *hidden, 1], rng)
        M = MonotoneNet.build(latent_dim, hidden, rng)
        latents = rng.standard_normal((k, latent_dim))
        return cls(G, W, M, latents, normalizer or Normalizer.identity(n_covariates), config)

    @property
    def k(self) -> int:
        return self.latents.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latents.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.G.n_in

    def _prep(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_covariates:
            raise ShapeError(f"covariates of shape {x.shape}; model expects {self.n_covariates} columns")
        return self.normalizer.transform(x), single

    # assignment and propensity

    def assign_logits(self, x) -> np.ndarray:
        xn, single = self._prep(x)
        out = self.G(xn)
        return out[0] if single else out

    def assign_log_proba(self, x) -> np.ndarray:
        return log_softmax(self.assign_logits(x))

    def assign(self, x) -> SubgroupPosterior:
        p = softmax(self.assign_logits(x))
        return SubgroupPosterior(p, np.argmax(p, axis=-1))

    def propensity(self, x) -> np.ndarray:
        xn, single = self._prep(x)
        p = np.clip(expit(self.W(xn)[:, 0]), PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)
        return p[0] if single else p

    # subgroup hazards

    def subgroup_hazards(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative and instantaneous hazards for every subgroup and regime.

        ``t`` is ``(N,)``; returns two arrays of shape ``(N, K, 2)`` on the raw
        time scale.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < 0):
            raise DomainError("time must be non-negative")
        n, k = t.shape[0], self.k
        tn = np.repeat(t / self.normalizer.time_scale, k)
        lat = np.tile(self.latents, (n, 1))
        Lambda, lam = self.M.evaluate(lat, tn)
        return Lambda.reshape(n, k, 2), lam.reshape(n, k, 2) / self.normalizer.time_scale

    def _regime_hazards(self, t, a, n: int):
        """Hazards at ``t`` under regime ``a`` for ``n`` patients, shape ``(n, K)``."""
        a = np.asarray(a)
        if not np.all((a == 0) | (a == 1)):
            raise DomainError("treatment must be 0 or 1")
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            Lambda, lam = self.subgroup_hazards(t[None])
            Lambda, lam = np.broadcast_to(Lambda, (n, *Lambda.shape[1:])), np.broadcast_to(lam, (n, *lam.shape[1:]))
        else:
            if t.shape != (n,):
                raise ShapeError("one time per patient is required")
            Lambda, lam = self.subgroup_hazards(t)
        a = np.broadcast_to(a.astype(int), (n,))
        rows = np.arange(n)
        return Lambda[rows, :, a], lam[rows, :, a]

    def survival(self, x, t, a) -> np.ndarray:
        """Mixture survival ``sum_k P(k|x) exp(-Lambda_k(t|a))``."""
        p = self.assign(x).probabilities
        single = p.ndim == 1
        p = np.atleast_2d(p)
        Lambda, _ = self._regime_hazards(t, a, p.shape[0])
        # dividing by the rounded probability mass makes S(0) exactly 1
        s = np.sum(p * np.exp(-Lambda), axis=1) / np.sum(p, axis=1)
        return s[0] if single else s

    def event_density(self, x, t, a) -> np.ndarray:
        """Negative time derivative of :meth:`survival`."""
        p = self.assign(x).probabilities
        single = p.ndim == 1
        p = np.atleast_2d(p)
        Lambda, lam = self._regime_hazards(t, a, p.shape[0])
        f = np.sum(p * lam * np.exp(-Lambda), axis=1)
        return f[0] if single else f

    def subgroup_survival(self, t) -> np.ndarray:
        """Survival per subgroup and regime on a time grid, shape ``(G, K, 2)``."""
        return np.exp(-self.subgroup_hazards(t)[0])

    def gate(self, k: int, t) -> np.ndarray:
        """Group average treatment effect: treated minus control survival."""
        if not 0 <= k < self.k:
            raise IndexError(f"subgroup {k} out of range for K={self.k}")
        t = np.asarray(t, dtype=float)
        s = self.subgroup_survival(t.ravel())[:, k, :]
        return (s[:, 1] - s[:, 0]).reshape(t.shape)

    def gate_curves(self, grid) -> np.ndarray:
        """Effect curves of every subgroup on ``grid``, shape ``(K, G)``."""
        s = self.subgroup_survival(grid)
        return (s[:, :, 1] - s[:, :, 0]).T

    def ite(self, x, t) -> np.ndarray:
        """Individual effect ``S(t|x,1) - S(t|x,0)`` as a mixture of subgroup effects."""
        p = self.assign(x).probabilities
        single = p.ndim == 1
        p = np.atleast_2d(p)
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            s = self.subgroup_survival(t[None])
            tau = np.broadcast_to(s[:, :, 1] - s[:, :, 0], p.shape)
        else:
            if t.shape != (p.shape[0],):
                raise ShapeError("one time per patient is required")
            s = self.subgroup_survival(t)
            tau = s[:, :, 1] - s[:, :, 0]
        out = np.sum(p * tau, axis=1)
        return out[0] if single else out

    def ite_curves(self, x, grid) -> np.ndarray:
        """Individual effects on a grid, shape ``(N, G)``."""
        p = np.atleast_2d(self.assign(x).probabilities)
        return p @ self.gate_curves(grid)

    # parameters

    def stage2_parameters(self) -> dict[str, np.ndarray]:
        """Parameters trained by the survival likelihood (everything except ``W``)."""
        params = self.G.parameters("G.")
        params.update(self.M.parameters("M."))
        params["latents"] = self.latents
        return params

    def all_parameters(self) -> dict[str, np.ndarray]:
        params = self.stage2_parameters()
        params.update(self.W.parameters("W."))
        return params

    def copy(self) -> CnscModel:
        norm = Normalizer(self.normalizer.mean.copy(), self.normalizer.std.copy(), self.normalizer.time_scale)
        return CnscModel(self.G.copy(), self.W.copy(), self.M.copy(), self.latents.copy(), norm, self.config)

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        """Copy values into the stored arrays (shapes must match)."""
        own = self.all_parameters()
        for name, value in params.items():
            own[name][...] = value

    # checkpoints

    def to_dict(self) -> dict:
        def net(mlp: MLP) -> dict:
            return {
                "square_weights": mlp.square_weights,
                "layers": [
                    {"activation": l.activation, "weight": _encode(l.weight), "bias": _encode(l.bias)}
                    for l in mlp.layers
                ],
            }

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "k": self.k,
            "latent_dim": self.latent_dim,
            "n_covariates": self.n_covariates,
            "G": net(self.G),
            "W": net(self.W),
            "M": net(self.M.mlp),
            "latents": _encode(self.latents),
            "normalizer": {
                "mean": _encode(self.normalizer.mean),
                "std": _encode(self.normalizer.std),
                "time_scale": _encode(np.array([self.normalizer.time_scale])),
            },
            "config": self.config,
            "config_hash": config_hash(self.config),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CnscModel:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a CNSC checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")

        def net(n: dict) -> MLP:
            layers = [DenseLayer(_decode(l["weight"]), _decode(l["bias"]), l["activation"]) for l in n["layers"]]
            return MLP(layers, square_weights=n["square_weights"])

        norm = Normalizer(
            _decode(d["normalizer"]["mean"]),
            _decode(d["normalizer"]["std"]),
            float(_decode(d["normalizer"]["time_scale"])[0]),
        )
        return cls(net(d["G"]), net(d["W"]), MonotoneNet(net(d["M"])), _decode(d["latents"]), norm, d.get("config"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> CnscModel:
        return cls.from_dict(json.loads(Path(path).read_text()))
