"""Dense-network machinery in numpy.

Multi-layer perceptrons with cached reverse-mode gradients, a forward-mode
pass along an input direction (used to differentiate outputs with respect to
time), Adam updates and seeded random streams. Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from cnsc.errors import NumericError, ShapeError, StateError

HIDDEN_ACTIVATIONS = ("tanh", "relu", "identity")


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator keyed by a master seed and an optional stream path.

    Streams for folds or search candidates are derived as
    ``seeded_rng(seed, fold, candidate)`` so they never overlap.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _reject_nan(x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError("NaN input to activation")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _reject_nan(x)
    return expit(x)


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    """Apply a hidden activation or one of the output heads by name."""
    x = np.asarray(x, dtype=float)
    if kind == "softmax":
        return softmax(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "sigmoid":
        return sigmoid(x)
    _reject_nan(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def _activate_with_slope(kind: str, z: np.ndarray):
    """Activation value and its derivative (``None`` for identity)."""
    if kind == "tanh":
        h = np.tanh(z)
        return h, 1.0 - h * h
    if kind == "relu":
        slope = (z > 0).astype(float)
        return z * slope, slope
    return z, None


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @classmethod
    def glorot(cls, n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> DenseLayer:
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class GradientTape:
    """Cached intermediates of one forward pass plus gradient buffers.

    ``inputs[i]`` is the input of layer ``i``; ``preact[i]``/``outputs[i]`` its
    affine and activated values. ``tangents`` holds the matching forward-mode
    quantities when the pass was dual (input tangent first, then per layer
    ``(z_dot, h_dot)``).
    """

    inputs: list = field(default_factory=list)
    preact: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    tangents: list | None = None
    slopes: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    squeeze: bool = False


class MLP:
    """Stack of dense layers.

    With ``square_weights`` the effective weight matrix of every layer is the
    element-wise square of the stored raw weights, so all effective weights
    are non-negative.
    """

    def __init__(self, layers: list[DenseLayer], square_weights: bool = False):
        if not layers:
            raise ShapeError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError(f"layer widths {prev.n_out} -> {nxt.n_in} do not chain")
        self.layers = layers
        self.square_weights = square_weights

    @classmethod
    def build(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
        square_weights: bool = False,
    ) -> MLP:
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(DenseLayer.glorot(n_in, n_out, act, rng))
        return cls(layers, square_weights=square_weights)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def effective_weight(self, layer: DenseLayer) -> np.ndarray:
        return layer.weight * layer.weight if self.square_weights else layer.weight

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Named views of the raw parameter arrays (mutating them updates the net)."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}w{i}"] = layer.weight
            out[f"{prefix}b{i}"] = layer.bias
        return out

    def copy(self) -> MLP:
        layers = [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return MLP(layers, square_weights=self.square_weights)

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"input of shape {x.shape} does not match network input dimension {self.n_in}")
        return x, squeeze

    def forward(self, x) -> tuple[np.ndarray, GradientTape]:
        """Return the output pre-head activations and the tape for ``backward``."""
        h, squeeze = self._as_batch(x)
        tape = GradientTape(squeeze=squeeze)
        for layer in self.layers:
            tape.inputs.append(h)
            z = h @ self.effective_weight(layer).T + layer.bias
            h, slope = _activate_with_slope(layer.activation, z)
            tape.preact.append(z)
            tape.outputs.append(h)
            tape.slopes.append(slope)
        return (h[0] if squeeze else h), tape

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def forward_dual(self, x, x_dot) -> tuple[np.ndarray, np.ndarray, GradientTape]:
        """Forward pass carrying the directional derivative along ``x_dot``."""
        h, squeeze = self._as_batch(x)
        # a 1-d tangent is shared by every row and kept unbroadcast
        h_dot = np.asarray(x_dot, dtype=float)
        if h_dot.shape not in ((self.n_in,), h.shape):
            raise ShapeError(f"tangent of shape {h_dot.shape} does not match input {h.shape}")
        tape = GradientTape(squeeze=squeeze, tangents=[h_dot])
        for layer in self.layers:
            w = self.effective_weight(layer)
            tape.inputs.append(h)
            z = h @ w.T + layer.bias
            z_dot = h_dot @ w.T
            h, slope = _activate_with_slope(layer.activation, z)
            h_dot = z_dot if slope is None else slope * z_dot
            tape.preact.append(z)
            tape.outputs.append(h)
            tape.slopes.append(slope)
            tape.tangents.append((z_dot, h_dot))
        if squeeze:
            return h[0], h_dot[0], tape
        return h, h_dot, tape

    def _accumulate(self, tape: GradientTape, i: int, g_z: np.ndarray, g_w_eff: np.ndarray) -> None:
        layer = self.layers[i]
        g_w = 2.0 * layer.weight * g_w_eff if self.square_weights else g_w_eff
        tape.grads[i] = (g_w, g_z.sum(axis=0))

    def backward(self, tape: GradientTape, upstream) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Reverse pass; returns per-layer ``(d_weight, d_bias)`` and the input gradient."""
        if tape is None or len(tape.inputs) != len(self.layers):
            raise StateError("backward called without a matching forward pass")
        g = np.asarray(upstream, dtype=float)
        if tape.squeeze:
            g = g[None, :]
        tape.grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            slope = tape.slopes[i]
            g_z = g if slope is None else g * slope
            self._accumulate(tape, i, g_z, g_z.T @ tape.inputs[i])
            g = g_z @ self.effective_weight(self.layers[i])
        return tape.grads, (g[0] if tape.squeeze else g)

    def backward_dual(
        self, tape: GradientTape, upstream, upstream_dot
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Reverse pass through a dual forward pass.

        ``upstream`` and ``upstream_dot`` are gradients of the loss with respect
        to the output and to its tangent. The returned input gradient is with
        respect to the primal input only (the input tangent is a constant).
        """
        if tape is None or tape.tangents is None or len(tape.inputs) != len(self.layers):
            raise StateError("backward_dual called without a matching forward_dual pass")
        g = np.asarray(upstream, dtype=float)
        g_dot = np.asarray(upstream_dot, dtype=float)
        if tape.squeeze:
            g, g_dot = g[None, :], g_dot[None, :]
        tape.grads = [None] * len(self.layers)
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            z_dot, _ = tape.tangents[i + 1]
            x_dot = tape.tangents[i] if i == 0 else tape.tangents[i][1]
            slope = tape.slopes[i]
            if slope is None:
                g_z, g_z_dot = g, g_dot
            elif layer.activation == "tanh":
                # d(slope)/dz = -2 h slope
                g_z = slope * (g - 2.0 * tape.outputs[i] * z_dot * g_dot)
                g_z_dot = slope * g_dot
            else:
                g_z, g_z_dot = slope * g, slope * g_dot
            w = self.effective_weight(layer)
            if x_dot.ndim == 1:
                g_w_dot = np.outer(g_z_dot.sum(axis=0), x_dot)
            else:
                g_w_dot = g_z_dot.T @ x_dot
            self._accumulate(tape, i, g_z, g_z.T @ tape.inputs[i] + g_w_dot)
            g = g_z @ w
            g_dot = g_z_dot @ w
        return tape.grads, (g[0] if tape.squeeze else g)


@dataclass
class Adam:
    """Adam optimiser state; ``step`` updates parameter arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
        return params


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: Adam) -> dict[str, np.ndarray]:
    return state.step(params, grads)
