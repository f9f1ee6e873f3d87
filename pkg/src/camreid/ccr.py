"""Camera components reduction: delete camera-predictive embedding directions.

A bias-free linear softmax classifier W (cameras x embedding dim) is fit on
frozen embeddings.  Its rows are centered by their mean, the centered matrix
is factored with the thin SVD, and the top-k right singular vectors V span
the camera-discriminative subspace.  The reducer

    f_reduced = (I - V V^T) f

removes that subspace.  With k equal to the number of cameras, every
centered classifier logit of a projected embedding collapses to zero and the
softmax over cameras becomes uniform: the reduced embedding carries no
linearly decodable camera information.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .linalg import svd_thin

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraClassifier:
    weight: np.ndarray  # m x n, one row per camera, no bias
    holdout_accuracy: float


@dataclass(frozen=True)
class CcrProjector:
    v: np.ndarray  # n x k, orthonormal columns
    centering: np.ndarray  # mean classifier row, length n
    k: int
    m: int
    n: int


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    return ex / ex.sum(axis=1, keepdims=True)


def fit_camera_classifier(
    embeddings: np.ndarray,
    camera_labels: np.ndarray,
    epochs: int = 30,
    lr: float = 0.5,
    batch_size: int = 512,
    holdout_frac: float = 0.1,
    seed: int = 0,
) -> CameraClassifier:
    """Fit the linear camera head with mini-batch SGD on cross-entropy.

    Labels must be 0..m-1 with every camera present.  A seeded slice is held
    out to report accuracy; the returned weight is trained on the rest.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(camera_labels, dtype=np.int64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise InvalidInputError("embeddings and camera labels do not align")
    if x.shape[0] < 2:
        raise InvalidInputError("need at least 2 samples")
    m = int(y.max()) + 1 if y.size else 0
    if m < 2:
        raise InvalidInputError("need at least 2 cameras")
    counts = np.bincount(y, minlength=m)
    if np.any(counts == 0) or np.any(y < 0):
        raise InvalidInputError("camera labels must cover 0..m-1 with every camera present")
    n = x.shape[1]
    if m > n:
        raise InvalidInputError("more cameras than embedding dimensions")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 515])))
    perm = rng.permutation(x.shape[0])
    n_hold = int(round(holdout_frac * x.shape[0]))
    n_hold = min(max(n_hold, 1), x.shape[0] - 1)
    hold, train = perm[:n_hold], perm[n_hold:]
    xt, yt = x[train], y[train]

    w = 0.01 * rng.standard_normal((m, n))
    onehot = np.eye(m)
    for _ in range(epochs):
        order = rng.permutation(len(xt))
        for start in range(0, len(xt), batch_size):
            idx = order[start : start + batch_size]
            xb, yb = xt[idx], yt[idx]
            probs = _softmax_rows(xb @ w.T)
            grad = (probs - onehot[yb]).T @ xb / len(idx)
            w -= lr * grad

    pred = (x[hold] @ w.T).argmax(axis=1)
    acc = float((pred == y[hold]).mean())
    log.info("camera classifier held-out accuracy: %.3f", acc)
    return CameraClassifier(weight=w, holdout_accuracy=acc)


def build_projector(classifier: CameraClassifier | np.ndarray, k: int | None = None) -> CcrProjector:
    """Span of the centered classifier's top-k right singular vectors.

    Defaults to k = m, which nulls every centered logit exactly (the
    centered matrix has rank at most m-1, so the last direction is taken
    from its null-space complement).
    """
    w = classifier.weight if isinstance(classifier, CameraClassifier) else np.asarray(classifier)
    if w.ndim != 2:
        raise InvalidInputError("classifier weight must be a matrix")
    m, n = w.shape
    if m < 2 or m > n:
        raise InvalidInputError("classifier must have 2 <= cameras <= embedding dim")
    if k is None:
        k = m
    if not 1 <= k <= m:
        raise InvalidInputError(f"k must lie in [1, {m}]")
    centering = w.mean(axis=0)
    centered = w - centering
    fact = svd_thin(centered.astype(np.float64))
    v = fact.vt[:k].T
    return CcrProjector(v=v, centering=centering.astype(np.float64), k=k, m=m, n=n)


def apply_ccr(projector: CcrProjector, embeddings: np.ndarray) -> np.ndarray:
    """Remove the camera subspace: f - V (V^T f), row-wise for matrices."""
    x = np.asarray(embeddings)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != projector.n:
        raise InvalidInputError(f"embedding dim {a.shape[1]} != projector dim {projector.n}")
    v = projector.v.astype(a.dtype, copy=False)
    out = a - (a @ v) @ v.T
    return out[0] if single else out


def nullification_check(
    classifier: CameraClassifier | np.ndarray,
    projector: CcrProjector,
    embeddings: np.ndarray,
) -> tuple[float, float]:
    """Residual camera signal after reduction.

    Returns the largest |centered logit| over all samples and cameras, and
    the largest deviation of the camera softmax from uniform 1/m.  Both are
    ~0 when the projector was built with k = m; with k < m the residuals are
    reported as-is.
    """
    w = classifier.weight if isinstance(classifier, CameraClassifier) else np.asarray(classifier)
    centered = w - projector.centering
    reduced = np.atleast_2d(apply_ccr(projector, embeddings))
    logits = reduced @ centered.T
    probs = _softmax_rows(logits)
    max_logit = float(np.abs(logits).max()) if logits.size else 0.0
    max_dev = float(np.abs(probs - 1.0 / projector.m).max()) if probs.size else 0.0
    return max_logit, max_dev
