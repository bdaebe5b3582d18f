"""Small MLPs with analytic per-layer reverse-mode differentiation.

Weights live in one flat vector laid out layer by layer (weight matrix
row-major, then bias).  The final layer is zero-initialized so a freshly
built network outputs exactly zero, which keeps an augmented system at its
base dynamics until training moves the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptySamples

SCALE_FLOOR = 1e-8

ACTIVATIONS = ("tanh", "softplus")


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise DimensionMismatch("all layer dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise DimensionMismatch(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def layer_dims(self) -> list[tuple[int, int]]:
        chain = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(chain[:-1], chain[1:]))

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims())

    def label(self) -> str:
        arch = "x".join(str(h) for h in self.hidden) if self.hidden else "linear"
        return f"{arch}-{self.activation}-s{self.seed}"


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)  # softplus


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    # d/dz softplus = sigmoid, written stably for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def unflatten(spec: MLPSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (spec.n_params(),):
        raise DimensionMismatch(
            f"theta length {theta.size} != layout total {spec.n_params()}")
    layers = []
    pos = 0
    for n_in, n_out in spec.layer_dims():
        w = theta[pos:pos + n_in * n_out].reshape(n_out, n_in)
        pos += n_in * n_out
        b = theta[pos:pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def flatten(layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in layers])


def init_weights(spec: MLPSpec) -> np.ndarray:
    """Glorot-uniform hidden layers, zero final layer, zero biases."""
    rng = np.random.default_rng(spec.seed)
    layers = []
    dims = spec.layer_dims()
    for li, (n_in, n_out) in enumerate(dims):
        if li == len(dims) - 1:
            w = np.zeros((n_out, n_in))
        else:
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
        layers.append((w, np.zeros(n_out)))
    return flatten(layers)


def _check_input(spec: MLPSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.input_dim:
        raise DimensionMismatch(
            f"input dim {x.shape[-1]} != spec input_dim {spec.input_dim}")
    return x


def forward(spec: MLPSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; ``x`` may be a vector or a (n, input_dim) batch."""
    a = _check_input(spec, x)
    layers = unflatten(spec, theta)
    for w, b in layers[:-1]:
        a = _act(spec.activation, a @ w.T + b)
    w, b = layers[-1]
    return a @ w.T + b


def vjp_layers(spec: MLPSpec, layers: list[tuple[np.ndarray, np.ndarray]],
               x: np.ndarray, cot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """vjp against pre-unflattened layers (hot path for the adjoint sweep)."""
    acts = [x]
    pre = []
    a = x
    for w, b in layers[:-1]:
        z = w @ a + b
        pre.append(z)
        a = _act(spec.activation, z)
        acts.append(a)

    grads = [None] * len(layers)
    delta = cot
    grads[-1] = (np.outer(delta, acts[-1]), delta.copy())
    delta = layers[-1][0].T @ delta
    for li in range(len(layers) - 2, -1, -1):
        delta = delta * _act_grad(spec.activation, pre[li])
        grads[li] = (np.outer(delta, acts[li]), delta.copy())
        delta = layers[li][0].T @ delta
    return flatten(grads), delta


def vjp(spec: MLPSpec, theta: np.ndarray, x: np.ndarray,
        cotangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cotangentᵀ·(∂out/∂θ) and cotangentᵀ·(∂out/∂x) for a single input."""
    x = _check_input(spec, x)
    cot = np.asarray(cotangent, dtype=float)
    if cot.shape != (spec.output_dim,):
        raise DimensionMismatch(
            f"cotangent shape {cot.shape} != ({spec.output_dim},)")
    return vjp_layers(spec, unflatten(spec, theta), x, cot)


def jacobian(spec: MLPSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """∂out/∂x as an (output_dim, input_dim) matrix; rows are unit-cotangent vjps."""
    rows = []
    eye = np.eye(spec.output_dim)
    for i in range(spec.output_dim):
        _, gin = vjp(spec, theta, x, eye[i])
        rows.append(gin)
    return np.stack(rows)


def supervised_fit(spec: MLPSpec, theta: np.ndarray, inputs: np.ndarray,
                   targets: np.ndarray, iters: int = 1500, lr: float = 1e-2) -> np.ndarray:
    """Full-batch Adam regression of the network onto (inputs, targets).

    Batched backprop through the whole sample matrix; used to pre-fit
    correction networks against derivative estimates before trajectory
    training.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    Y = np.atleast_2d(np.asarray(targets, dtype=float))
    if X.shape[1] != spec.input_dim or Y.shape[1] != spec.output_dim:
        raise DimensionMismatch("supervised_fit: sample shapes do not match the spec")
    theta = np.asarray(theta, dtype=float).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    n = X.shape[0]
    for it in range(1, iters + 1):
        layers = unflatten(spec, theta)
        acts = [X]
        pre = []
        a = X
        for w, b in layers[:-1]:
            z = a @ w.T + b
            pre.append(z)
            a = _act(spec.activation, z)
            acts.append(a)
        w, b = layers[-1]
        out = a @ w.T + b
        delta = (2.0 / out.size) * (out - Y)
        grads = [None] * len(layers)
        grads[-1] = (delta.T @ acts[-1], delta.sum(axis=0))
        delta = delta @ layers[-1][0]
        for li in range(len(layers) - 2, -1, -1):
            delta = delta * _act_grad(spec.activation, pre[li])
            grads[li] = (delta.T @ acts[li], delta.sum(axis=0))
            delta = delta @ layers[li][0]
        g = flatten(grads)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= lr * (m / (1.0 - 0.9 ** it)) / (np.sqrt(v / (1.0 - 0.999 ** it)) + 1e-8)
    return theta


@dataclass(frozen=True)
class Normalizer:
    """Affine input whitening plus per-output magnitude scales."""

    input_shift: np.ndarray
    input_scale: np.ndarray
    output_scale: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_shift) / self.input_scale

    @staticmethod
    def identity(n_in: int, n_out: int) -> "Normalizer":
        return Normalizer(np.zeros(n_in), np.ones(n_in), np.ones(n_out))


def fit_normalizer(samples: np.ndarray, output_reference: np.ndarray) -> Normalizer:
    """Column mean/std of ``samples``; output scales are max |reference| per column.

    Degenerate columns get scales floored at 1e-8 rather than zero.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 2:
        raise EmptySamples("need at least 2 samples to fit a normalizer")
    reference = np.atleast_2d(np.asarray(output_reference, dtype=float))
    shift = samples.mean(axis=0)
    scale = np.maximum(samples.std(axis=0), SCALE_FLOOR)
    out_scale = np.maximum(np.max(np.abs(reference), axis=0), SCALE_FLOOR)
    return Normalizer(input_shift=shift, input_scale=scale, output_scale=out_scale)
