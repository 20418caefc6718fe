"""Reference-set aggregation and the soft nearest-neighbour identity loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


class DegenerateBatchError(ValueError):
    """No anchor in the batch has a same-identity partner."""


@dataclass(frozen=True)
class IdentityLossConfig:
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def sample_convex_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the (n-1)-simplex via normalised exponential spacings."""
    if n < 1:
        raise ValueError(f"need at least one weight, got n={n}")
    if n == 1:
        return np.ones(1)
    e = rng.exponential(size=n)
    return e / e.sum()


def aggregate(embeddings, weights: Optional[Sequence[float]] = None) -> Tensor:
    """Weighted sum of N embeddings (N, D) -> (D,); uniform weights by default."""
    z = nx.as_tensor(embeddings)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ShapeError("aggregate", z.shape, detail="expected (N, D) with N >= 1")
    n = z.shape[0]
    if weights is None:
        return z.mean(axis=0)
    w = np.asarray(weights, dtype=z.dtype)
    if w.shape != (n,):
        raise ShapeError("aggregate", z.shape, w.shape, detail="one weight per embedding")
    return nx.matmul(w.reshape(1, n), z).reshape(z.shape[1])


def _label_masks(labels) -> tuple:
    labels = np.asarray(labels)
    k = len(labels)
    off_diag = ~np.eye(k, dtype=bool)
    same = (labels[:, None] == labels[None, :]) & off_diag
    return same, off_diag


def identity_loss_from_distances(sq_dists, labels, config: IdentityLossConfig = IdentityLossConfig()) -> Tensor:
    """Soft nearest-neighbour loss on a (K, K) matrix of squared distances.

    For each anchor k with at least one positive,
    -log Σ_{j≠k, same label} exp(-d_kj/T) / Σ_{j≠k} exp(-d_kj/T),
    averaged over those anchors. Anchors with no positive are skipped.
    """
    d = nx.as_tensor(sq_dists)
    k = d.shape[0]
    if d.ndim != 2 or d.shape[1] != k or k < 2:
        raise ShapeError("identity_loss", d.shape, detail="expected square (K, K) with K >= 2")
    if len(labels) != k:
        raise ShapeError("identity_loss", d.shape, (len(labels),), detail="one label per row")
    raw = d.data
    if not np.allclose(raw, raw.T, rtol=1e-6, atol=1e-8):
        raise ValueError("distance matrix must be symmetric")
    if (raw < 0).any():
        raise ValueError("distance matrix must be nonnegative")
    same, off_diag = _label_masks(labels)
    anchors = same.any(axis=1)
    if not anchors.any():
        raise DegenerateBatchError("degenerate identity batch: no anchor has a same-identity partner")
    logits = d * (-1.0 / config.temperature)
    pos = nx.logsumexp(logits, axis=1, mask=same)
    alln = nx.logsumexp(logits, axis=1, mask=off_diag)
    idx = np.flatnonzero(anchors)
    return (alln[idx] - pos[idx]).mean()


def pairwise_sq_dists(z) -> Tensor:
    z = nx.as_tensor(z)
    diff = z.reshape(z.shape[0], 1, -1) - z.reshape(1, z.shape[0], -1)
    return nx.square(diff).sum(axis=2)


def identity_loss(embeddings, labels, config: IdentityLossConfig = IdentityLossConfig()) -> Tensor:
    """Soft nearest-neighbour identity loss over a (K, D) batch of embeddings."""
    z = nx.as_tensor(embeddings)
    if z.ndim != 2:
        raise ShapeError("identity_loss", z.shape, detail="expected (K, D)")
    return identity_loss_from_distances(pairwise_sq_dists(z), labels, config)


def draw_reference_count(available: int, rng: np.random.Generator, max_refs: int = 8, min_refs: int = 2) -> int:
    """Uniform in [min_refs, min(max_refs, available)]."""
    hi = min(max_refs, available)
    if hi < min_refs:
        raise ValueError(f"need at least {min_refs} images, have {available}")
    return int(rng.integers(min_refs, hi + 1))
