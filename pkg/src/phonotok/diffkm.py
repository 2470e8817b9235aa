"""Differentiable k-means bottleneck.

Soft assignment is ``softmax(-||z - m_k||^2 / tau)`` over the K centroids.
Training uses either the soft mixture of centroids or a straight-through
variant (hard centroid forward, soft-mixture gradient); inference picks the
nearest centroid and records nothing on the tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, DataError, InitializationError

ASSIGNMENT_MODES = ("soft-mixture", "straight-through")


@dataclass
class Codebook:
    centroids: gc.Tensor

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]

    @classmethod
    def from_array(cls, centroids, requires_grad=True):
        return cls(gc.Tensor(np.array(centroids, dtype=np.float64), requires_grad, name="codebook"))


@dataclass
class DiffKmConfig:
    tau: float = 1.0
    tau_final: float = 0.1
    decay: str = "exponential"
    assignment_mode: str = "soft-mixture"

    def validate(self):
        if not (self.tau > 0 and self.tau_final > 0):
            raise ConfigError("tau must be positive")
        if self.tau_final > self.tau:
            raise ConfigError("tau_final must not exceed the initial tau")
        if self.decay not in ("exponential", "constant"):
            raise ConfigError(f"unknown tau decay mode {self.decay!r}")
        if self.assignment_mode not in ASSIGNMENT_MODES:
            raise ConfigError(f"assignment_mode must be one of {ASSIGNMENT_MODES}")
        return self

    def tau_at(self, step, total_steps):
        """Temperature after ``step`` of ``total_steps`` annealing steps."""
        if self.decay == "constant" or total_steps <= 1:
            return self.tau
        frac = min(max(step / (total_steps - 1), 0.0), 1.0)
        return self.tau * (self.tau_final / self.tau) ** frac


@dataclass
class SoftAssignment:
    weights: np.ndarray
    hard_ids: np.ndarray
    weights_tensor: gc.Tensor | None = None


def _nearest(points, centroids):
    d = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1), d


def init_codebook_lloyd(features, k, seed=0, max_iters=100):
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iters``. A cluster that
    loses all its points is re-seeded at the point farthest from its current
    centroid. Returns ``(codebook, objective_history)``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InitializationError(f"features must be an N×D matrix, got shape {x.shape}")
    if k < 1:
        raise InitializationError("k must be at least 1")
    if len(np.unique(x, axis=0)) < k:
        raise InitializationError(f"need at least {k} distinct feature vectors for k={k}")
    rng = np.random.default_rng(seed)
    n = len(x)

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise InitializationError("k-means++ seeding ran out of distinct points")
        idx = int(rng.choice(n, p=closest / total))
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))

    labels = None
    history = []
    for _ in range(max_iters):
        new_labels, d = _nearest(x, centers)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels.copy()
        own = d[np.arange(n), labels]
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(own))
            counts[labels[far]] -= 1
            labels[far] = j
            own[far] = 0.0
        for j in range(k):
            centers[j] = x[labels == j].mean(axis=0)
    return Codebook.from_array(centers), history


def soft_assign(z, codebook, tau):
    """Row-wise softmax of negative scaled squared distances."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    z = gc.as_tensor(z)
    d = gc.sqdist(z, codebook.centroids)
    w = gc.softmax_rows(gc.scale(d, -1.0 / tau))
    return SoftAssignment(w.data, np.argmax(w.data, axis=1), w)


def hard_ids(z, codebook):
    """Nearest-centroid ids; lowest index wins exact ties."""
    z = np.asarray(gc.as_tensor(z).data)
    ids, _ = _nearest(z, codebook.centroids.data)
    return ids


def quantize(z, codebook, config, mode="train", tau=None):
    """Return ``(quantized, assignment)``.

    ``tau`` overrides ``config.tau`` (used by annealing schedules).
    """
    tau = config.tau if tau is None else tau
    if mode == "infer":
        with gc.no_grad():
            a = soft_assign(gc.detach(z), codebook, tau)
        ids = hard_ids(z, codebook)
        a.hard_ids = ids
        return gc.Tensor(codebook.centroids.data[ids]), a
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    a = soft_assign(z, codebook, tau)
    if config.assignment_mode == "soft-mixture":
        out = gc.matmul(a.weights_tensor, codebook.centroids)
    elif config.assignment_mode == "straight-through":
        out = gc.mixture_st(a.weights_tensor, codebook.centroids)
    else:
        raise ConfigError(f"unknown assignment_mode {config.assignment_mode!r}")
    return out, a


@dataclass
class CodebookStats:
    utilization: float
    perplexity: float
    counts: np.ndarray


def codebook_stats(ids, k):
    """Utilization and usage perplexity over one or more id sequences."""
    if isinstance(ids, np.ndarray) or (len(ids) and np.isscalar(ids[0])):
        seqs = [ids]
    else:
        seqs = list(ids)
    flat = np.concatenate([np.asarray(s, dtype=np.int64).reshape(-1) for s in seqs] or [np.zeros(0, np.int64)])
    if flat.size == 0:
        raise DataError("no ids given")
    if flat.min() < 0 or flat.max() >= k:
        raise DataError(f"ids must lie in [0, {k})")
    counts = np.bincount(flat, minlength=k)
    p = counts[counts > 0] / flat.size
    entropy = float(-(p * np.log(p)).sum())
    return CodebookStats(float((counts > 0).sum() / k), math.exp(entropy), counts)


def bitrate(vocab_size, tokens_per_second):
    """Bits per second of a single-codebook token stream."""
    if vocab_size < 2:
        raise DataError("vocab_size must be at least 2")
    if not tokens_per_second > 0:
        raise DataError("tokens_per_second must be positive")
    return tokens_per_second * math.log2(vocab_size)
