"""Fully-connected embedding network with hand-written backpropagation.

The network maps observation vectors through rectified hidden layers to an
embedding that is L2-normalized row-wise inside the model, so every consumer
sees unit vectors.  Gradients are computed analytically, including the
Jacobian of the final normalization.  Two copies train together: the query
network receives gradient steps, the key network trails it through a
momentum (exponential moving average) update.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, TrainingDivergenceError

_NORM_FLOOR = 1e-30


@dataclass
class EncoderParams:
    """Per-layer weights/biases; weights[i] has shape (dims[i], dims[i+1])."""

    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            dims=self.dims,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class EncoderGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class EncoderPair:
    query: EncoderParams
    key: EncoderParams
    momentum: float = 0.999


@dataclass
class OptimState:
    """SGD with classical momentum and L2 weight decay folded into the velocity."""

    velocity_w: list[np.ndarray]
    velocity_b: list[np.ndarray]
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @staticmethod
    def for_params(params: EncoderParams, base_lr: float = 0.03, momentum: float = 0.9,
                   weight_decay: float = 1e-4) -> "OptimState":
        return OptimState(
            velocity_w=[np.zeros_like(w) for w in params.weights],
            velocity_b=[np.zeros_like(b) for b in params.biases],
            base_lr=base_lr,
            momentum=momentum,
            weight_decay=weight_decay,
        )


def init_encoder(dims, seed: int, dtype=np.float32, momentum: float = 0.999) -> EncoderPair:
    """Build a query/key pair with fan-in scaled uniform init; key starts equal."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise InvalidInputError(f"invalid layer dims {dims}")
    if not 0.0 <= momentum <= 1.0:
        raise InvalidInputError("momentum must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 777])))
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    query = EncoderParams(dims=dims, weights=weights, biases=biases)
    return EncoderPair(query=query, key=query.copy(), momentum=momentum)


def _forward_cached(params: EncoderParams, batch: np.ndarray):
    """Forward pass keeping pre-activations for the backward pass."""
    x = np.asarray(batch)
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise InvalidInputError(
            f"batch shape {x.shape} does not match input dim {params.dims[0]}"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("batch contains non-finite entries")
    x = x.astype(params.dtype, copy=False)
    acts = [x]
    n_layers = len(params.weights)
    h = x
    for i in range(n_layers - 1):
        z = h @ params.weights[i] + params.biases[i]
        h = np.maximum(z, 0)
        acts.append(h)
    z_out = h @ params.weights[-1] + params.biases[-1]
    norms = np.sqrt(np.sum(z_out * z_out, axis=1, keepdims=True))
    norms = np.maximum(norms, _NORM_FLOOR)
    out = z_out / norms
    return out, acts, z_out, norms


def forward(params: EncoderParams, batch: np.ndarray) -> np.ndarray:
    """Embed a batch (rows are observations) into unit-norm rows."""
    out, _, _, _ = _forward_cached(params, batch)
    return out


def backward(params: EncoderParams, batch: np.ndarray, grad_embeddings: np.ndarray) -> EncoderGrads:
    """Analytic parameter gradients for the given upstream embedding gradient.

    Recomputes the forward pass internally.  The normalization layer's
    Jacobian is applied first: for y = z/|z|, dz = (g - y (y.g)) / |z|.
    """
    out, acts, z_out, norms = _forward_cached(params, batch)
    g = np.asarray(grad_embeddings, dtype=params.dtype)
    if g.shape != out.shape:
        raise InvalidInputError("grad_embeddings shape does not match embeddings")
    inner = np.sum(out * g, axis=1, keepdims=True)
    dz = (g - out * inner) / norms

    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        h_in = acts[i]
        gw[i] = h_in.T @ dz
        gb[i] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ params.weights[i].T
            dh[acts[i] <= 0] = 0
            dz = dh
    return EncoderGrads(weights=gw, biases=gb)


def sgd_step(params: EncoderParams, grads: EncoderGrads, optim: OptimState, lr: float) -> EncoderParams:
    """In-place momentum SGD update: v <- m v + g + wd p; p <- p - lr v."""
    if lr < 0:
        raise InvalidInputError("learning rate must be >= 0")
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient in sgd_step")
    for p, g, v in zip(params.weights, grads.weights, optim.velocity_w):
        v *= optim.momentum
        v += g + optim.weight_decay * p
        p -= params.dtype.type(lr) * v
    for p, g, v in zip(params.biases, grads.biases, optim.velocity_b):
        v *= optim.momentum
        v += g + optim.weight_decay * p
        p -= params.dtype.type(lr) * v
    return params


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at epoch 0 to 0 at epoch == total_epochs."""
    if total_epochs < 1:
        raise InvalidInputError("total_epochs must be >= 1")
    if not 0 <= epoch <= total_epochs:
        raise InvalidInputError("epoch must lie in [0, total_epochs]")
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs))


def momentum_update(pair: EncoderPair) -> None:
    """Move the key network toward the query network: k <- m k + (1 - m) q."""
    m = pair.key.dtype.type(pair.momentum)
    one_minus = pair.key.dtype.type(1.0 - pair.momentum)
    for kw, qw in zip(pair.key.weights, pair.query.weights):
        kw *= m
        kw += one_minus * qw
    for kb, qb in zip(pair.key.biases, pair.query.biases):
        kb *= m
        kb += one_minus * qb
