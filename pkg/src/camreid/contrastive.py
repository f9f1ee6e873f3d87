"""Contrastive training: instance discrimination and segment discrimination.

Both stages minimize the same temperature-scaled classification loss.  For a
query q, its positive key k+ and a bank of negative keys {k-}:

    loss = -log( exp(s(q, k+)/t) / (exp(s(q, k+)/t) + sum_j exp(s(q, k-_j)/t)) )

with s the cosine similarity; all embeddings arrive unit-normalized, so the
similarities are plain dot products.  Gradients flow to q and k+ only; bank
entries are constants.  cid_epoch draws positives as two augmentations of
one observation, tsd_epoch draws them as two distinct detections of one
tracklet segment.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import synth
from .errors import InvalidInputError, TrainingDivergenceError

_UNIT_TOL = 1e-3


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    batch_size: int = 256
    bank_size: int = 4096
    key_momentum: float = 0.999
    epochs_cid: int = 10
    epochs_tsd: int = 50
    base_lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    aug_strength: float = 0.6

    def validate(self) -> None:
        if self.temperature <= 0:
            raise InvalidInputError("temperature must be > 0")
        if self.batch_size < 1 or self.bank_size < 1:
            raise InvalidInputError("batch_size and bank_size must be >= 1")
        if self.bank_size % self.batch_size != 0:
            raise InvalidInputError("bank_size must be divisible by batch_size")
        if not 0.0 <= self.key_momentum <= 1.0:
            raise InvalidInputError("key_momentum must lie in [0, 1]")
        if self.epochs_cid < 0 or self.epochs_tsd < 0:
            raise InvalidInputError("epoch counts must be >= 0")


@dataclass
class TrainStats:
    epoch: int
    mean_loss: float
    lr: float
    bank_occupancy: int
    wall_time: float


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm key embeddings."""

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise InvalidInputError("capacity and dim must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((capacity, dim), dtype=dtype)
        self._cursor = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def negatives(self) -> np.ndarray:
        """Stored keys in buffer order (order is irrelevant to the loss)."""
        return self._buf[: self._size]

    def contents(self) -> np.ndarray:
        """Stored keys in insertion order, oldest first."""
        if self._size < self.capacity:
            return self._buf[: self._size].copy()
        return np.concatenate([self._buf[self._cursor :], self._buf[: self._cursor]])

    def enqueue(self, keys: np.ndarray) -> None:
        """Append key rows, evicting the oldest once capacity is reached."""
        k = np.atleast_2d(np.asarray(keys, dtype=self._buf.dtype))
        if k.shape[0] == 0:
            return
        if k.shape[1] != self.dim:
            raise InvalidInputError(f"key dim {k.shape[1]} != bank dim {self.dim}")
        norms = np.linalg.norm(k.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise InvalidInputError("bank keys must be unit-norm")
        if k.shape[0] > self.capacity:
            k = k[-self.capacity :]
        idx = (self._cursor + np.arange(k.shape[0])) % self.capacity
        self._buf[idx] = k
        self._cursor = int((self._cursor + k.shape[0]) % self.capacity)
        self._size = min(self._size + k.shape[0], self.capacity)


def _batch_info_nce(q: np.ndarray, k_pos: np.ndarray, negatives: np.ndarray, temperature: float):
    """Mean loss over the batch plus gradients of that mean w.r.t. q and k+."""
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0")
    if negatives.shape[0] == 0:
        raise InvalidInputError("negative bank is empty")
    b = q.shape[0]
    l_pos = np.sum(q * k_pos, axis=1, keepdims=True) / temperature
    l_neg = (q @ negatives.T) / temperature
    logits = np.concatenate([l_pos, l_neg], axis=1)
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=1, keepdims=True)
    losses = -(l_pos - m) + np.log(z)
    p = ex / z
    # d(mean loss)/dq_i = ((p_pos - 1) k+_i + sum_j p_ij k-_j) / (t B)
    grad_q = ((p[:, :1] - 1.0) * k_pos + p[:, 1:] @ negatives) / (temperature * b)
    grad_k_pos = (p[:, :1] - 1.0) * q / (temperature * b)
    return float(losses.mean()), grad_q, grad_k_pos


def info_nce(q: np.ndarray, k_pos: np.ndarray, bank: MemoryBank, temperature: float):
    """Loss and analytic gradients for a single query against the bank."""
    qv = np.asarray(q, dtype=np.float64)
    kv = np.asarray(k_pos, dtype=np.float64)
    if qv.ndim != 1 or kv.ndim != 1 or qv.shape != kv.shape:
        raise InvalidInputError("q and k_pos must be vectors of equal length")
    if len(bank) == 0:
        raise InvalidInputError("bank must be non-empty")
    for name, v in (("q", qv), ("k_pos", kv)):
        if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
            raise InvalidInputError(f"{name} must be unit-norm")
    loss, gq, gk = _batch_info_nce(
        qv[None, :], kv[None, :], bank.negatives().astype(np.float64), float(temperature)
    )
    return loss, gq[0], gk[0]


def _run_batch(pair, bank, optim, obs_a, obs_b, temperature, lr):
    """One training step: embed two views, take the loss, update all parties."""
    q = enc.forward(pair.query, obs_a)
    k = enc.forward(pair.key, obs_b)
    if len(bank) == 0:
        # Nothing to contrast against yet; prime the bank and move on.
        bank.enqueue(k)
        return None
    loss, grad_q, _ = _batch_info_nce(q, k, bank.negatives(), temperature)
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite contrastive loss {loss}")
    grads = enc.backward(pair.query, obs_a, grad_q)
    enc.sgd_step(pair.query, grads, optim, lr)
    enc.momentum_update(pair)
    bank.enqueue(k)
    return loss


def cid_epoch(
    pair: enc.EncoderPair,
    bank: MemoryBank,
    observations: np.ndarray,
    config: ContrastiveConfig,
    optim: enc.OptimState,
    rng: np.random.Generator,
    epoch: int = 0,
    lr: float | None = None,
) -> TrainStats:
    """One instance-discrimination epoch over shuffled observations.

    Each sampled observation is augmented twice; the first view feeds the
    query network, the second the key network.  Trailing detections that do
    not fill a batch are skipped.
    """
    config.validate()
    x = np.asarray(observations)
    if x.ndim != 2:
        raise InvalidInputError("observations must be a 2-D matrix")
    if x.shape[0] < config.batch_size:
        raise InvalidInputError(
            f"need at least batch_size={config.batch_size} detections, got {x.shape[0]}"
        )
    t0 = time.perf_counter()
    step_lr = config.base_lr if lr is None else lr
    perm = rng.permutation(x.shape[0])
    losses = []
    for start in range(0, x.shape[0] - config.batch_size + 1, config.batch_size):
        idx = perm[start : start + config.batch_size]
        obs = x[idx]
        view_a = synth.augment_batch(obs, rng, config.aug_strength)
        view_b = synth.augment_batch(obs, rng, config.aug_strength)
        loss = _run_batch(pair, bank, optim, view_a, view_b, config.temperature, step_lr)
        if loss is not None:
            losses.append(loss)
    return TrainStats(
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        lr=step_lr,
        bank_occupancy=len(bank),
        wall_time=time.perf_counter() - t0,
    )


def sample_tsd_pair(segment_rows: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct detection rows drawn uniformly from one segment."""
    n = len(segment_rows)
    if n < 2:
        raise InvalidInputError("segment must hold at least 2 detections")
    i = int(rng.integers(n))
    j = int(rng.integers(n - 1))
    if j >= i:
        j += 1
    return int(segment_rows[i]), int(segment_rows[j])


def tsd_epoch(
    pair: enc.EncoderPair,
    bank: MemoryBank,
    segment_rows: list[np.ndarray],
    observations: np.ndarray,
    config: ContrastiveConfig,
    optim: enc.OptimState,
    rng: np.random.Generator,
    epoch: int,
) -> TrainStats:
    """One segment-discrimination epoch with a cosine-decayed learning rate.

    Batches sample segments with probability proportional to segment length,
    then one anchor/positive detection pair per sampled segment; both sides
    are augmented independently.  An epoch covers as many batches as the
    total segment detection count supports.
    """
    config.validate()
    usable = [np.asarray(s, dtype=np.int64) for s in segment_rows if len(s) >= 2]
    if not usable:
        raise InvalidInputError("no segment with >= 2 detections to sample pairs from")
    x = np.asarray(observations)
    t0 = time.perf_counter()
    lengths = np.array([len(s) for s in usable], dtype=np.float64)
    probs = lengths / lengths.sum()
    n_batches = max(int(lengths.sum()) // config.batch_size, 1)
    step_lr = enc.cosine_lr(epoch, config.epochs_tsd, config.base_lr)
    losses = []
    for _ in range(n_batches):
        seg_idx = rng.choice(len(usable), size=config.batch_size, p=probs)
        anchors = np.empty(config.batch_size, dtype=np.int64)
        positives = np.empty(config.batch_size, dtype=np.int64)
        for out_pos, s in enumerate(seg_idx):
            a, b = sample_tsd_pair(usable[int(s)], rng)
            anchors[out_pos] = a
            positives[out_pos] = b
        view_a = synth.augment_batch(x[anchors], rng, config.aug_strength)
        view_b = synth.augment_batch(x[positives], rng, config.aug_strength)
        loss = _run_batch(pair, bank, optim, view_a, view_b, config.temperature, step_lr)
        if loss is not None:
            losses.append(loss)
    return TrainStats(
        epoch=epoch,
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        lr=step_lr,
        bank_occupancy=len(bank),
        wall_time=time.perf_counter() - t0,
    )
