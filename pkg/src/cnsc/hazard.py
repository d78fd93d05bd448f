"""Monotone cumulative-hazard network.

The network takes a subgroup latent vector concatenated with time and
returns two non-negative outputs, one per treatment regime (column 0 is
control, column 1 treated). All effective weights are squares of the stored
weights and the hidden activation is increasing, so the outputs are
non-decreasing in time. The cumulative hazard is ``t * M(latent, t)`` and the
instantaneous hazard is its exact time derivative, carried forward-mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from cnsc.errors import DomainError, ShapeError
from cnsc.nn import MLP, GradientTape


@dataclass
class HazardPair:
    lambda0: np.ndarray
    lambda1: np.ndarray
    Lambda0: np.ndarray
    Lambda1: np.ndarray


@dataclass
class HazardTape:
    mlp_tape: GradientTape
    t: np.ndarray
    out: np.ndarray
    out_dot: np.ndarray


def _check_time(t: np.ndarray) -> None:
    if np.any(t < 0):
        raise DomainError("time must be non-negative")
    if not np.all(np.isfinite(t)):
        raise DomainError("time must be finite")


class MonotoneNet:
    def __init__(self, mlp: MLP):
        if not mlp.square_weights:
            raise ValueError("MonotoneNet requires square_weights=True")
        if mlp.n_out != 2:
            raise ShapeError("MonotoneNet needs two output heads")
        self.mlp = mlp

    @classmethod
    def build(cls, latent_dim: int, hidden: list[int], rng: np.random.Generator) -> MonotoneNet:
        sizes = [latent_dim + 1, *hidden, 2]
        return cls(MLP.build(sizes, rng, hidden_activation="tanh", square_weights=True))

    @property
    def latent_dim(self) -> int:
        return self.mlp.n_in - 1

    def parameters(self, prefix: str = "M.") -> dict[str, np.ndarray]:
        return self.mlp.parameters(prefix)

    def copy(self) -> MonotoneNet:
        return MonotoneNet(self.mlp.copy())

    def evaluate(self, latent, t, record: bool = False):
        """Cumulative and instantaneous hazards for rows of ``(latent, t)``.

        ``latent`` is ``(N, L)`` (or ``(L,)``, broadcast over ``t``) and ``t`` is
        ``(N,)``. Returns ``Lambda`` and ``lam`` of shape ``(N, 2)``, plus a tape
        for :meth:`backward` when ``record`` is set.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        _check_time(t)
        latent = np.asarray(latent, dtype=float)
        if latent.ndim == 1:
            latent = np.broadcast_to(latent, (t.shape[0], latent.shape[0]))
        if latent.shape != (t.shape[0], self.latent_dim):
            raise ShapeError(f"latent rows {latent.shape} do not match times {t.shape} / L={self.latent_dim}")
        x = np.concatenate([latent, t[:, None]], axis=1)
        x_dot = np.zeros(self.mlp.n_in)
        x_dot[-1] = 1.0
        out, out_dot, tape = self.mlp.forward_dual(x, x_dot)
        m = np.logaddexp(0.0, out)
        tt = t[:, None]
        Lambda = tt * m
        lam = m + tt * expit(out) * out_dot
        if record:
            return Lambda, lam, HazardTape(tape, t, out, out_dot)
        return Lambda, lam

    def backward(self, tape: HazardTape, g_Lambda: np.ndarray, g_lam: np.ndarray):
        """Gradients of a scalar loss given its sensitivities to ``Lambda`` and ``lam``.

        Returns the per-layer raw-parameter gradients and the gradient with
        respect to the latent input rows.
        """
        s = expit(tape.out)
        tt = tape.t[:, None]
        # Lambda = t*softplus(o); lam = softplus(o) + t*sigmoid(o)*o_dot
        g_out = g_Lambda * tt * s + g_lam * (s + tt * s * (1.0 - s) * tape.out_dot)
        g_out_dot = g_lam * tt * s
        grads, g_x = self.mlp.backward_dual(tape.mlp_tape, g_out, g_out_dot)
        return grads, g_x[:, :-1]

    def cumulative_hazard(self, latent, t) -> np.ndarray:
        return self.evaluate(latent, t)[0]

    def instantaneous_hazard(self, latent, t) -> np.ndarray:
        return self.evaluate(latent, t)[1]

    def hazard_pair(self, latent, t) -> HazardPair:
        Lambda, lam = self.evaluate(latent, t)
        return HazardPair(lam[:, 0], lam[:, 1], Lambda[:, 0], Lambda[:, 1])


def survival_from_hazard(Lambda) -> np.ndarray:
    Lambda = np.asarray(Lambda, dtype=float)
    if np.any(Lambda < 0):
        raise DomainError("cumulative hazard must be non-negative")
    return np.exp(-Lambda)
