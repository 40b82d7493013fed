"""Cosine-similarity vector quantizer with EMA learning.

Codes live on the unit sphere; assignment maximizes cosine similarity
(ties break toward the lowest index, zero-norm inputs are mapped to a fixed
basis vector and flagged). The codebook is learned without gradients:
k-means initialization on the first batch, an exponential moving average of
the assigned vectors per code, and expiration of codes that go unused for
several consecutive batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import DomainError, ShapeError

__all__ = [
    "Codebook",
    "QuantizeResult",
    "ExpireInfo",
    "kmeans_init",
    "quantize",
    "straight_through",
    "ema_update",
    "expire_stale",
]

DEFAULT_BETA = 0.25
DEFAULT_DECAY = 0.99
DEFAULT_EXPIRE_AGE = 2


def _normalize_rows(x: np.ndarray, eps: float = 1e-12):
    """Return (unit rows, zero-row indices); zero rows become basis vector e0."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1))
    zero = np.flatnonzero(norms < eps)
    out = x / np.maximum(norms, eps)[:, None]
    if zero.size:
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out, zero


@dataclass
class QuantizeResult:
    """Assignment of a batch of vectors to codebook entries."""

    indices: np.ndarray        # [M] int64 code index per input row
    quantized: np.ndarray      # [M, dim] selected code vectors (exact copies)
    commitment_loss: float     # beta * mean squared normalized-input-to-code distance
    zero_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


@dataclass
class ExpireInfo:
    replaced: np.ndarray       # indices of codes that were replaced
    sampled_with_replacement: bool = False


class Codebook:
    """Fixed-size set of unit-norm code vectors with usage bookkeeping.

    ``initialized`` records whether k-means initialization has run; codes are
    valid unit vectors from construction on, so quantization is total either
    way. ``usage_age[i]`` counts consecutive batches without an assignment to
    code ``i`` (zero iff assigned in the most recent update).
    """

    def __init__(self, n_codes: int, dim: int, seed: int = 0):
        if n_codes < 2:
            raise DomainError(f"codebook needs at least 2 codes, got {n_codes}")
        if dim < 1:
            raise DomainError(f"code dimension must be positive, got {dim}")
        rng = np.random.default_rng(seed)
        codes, _ = _normalize_rows(rng.standard_normal((n_codes, dim)))
        self.codes = codes
        self.usage_age = np.zeros(n_codes, dtype=np.int64)
        self.ema_cluster_size = np.ones(n_codes, dtype=np.float64)
        self.ema_embed_sum = codes.copy()
        self.initialized = False

    @property
    def n_codes(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def copy(self) -> "Codebook":
        dup = Codebook.__new__(Codebook)
        dup.codes = self.codes.copy()
        dup.usage_age = self.usage_age.copy()
        dup.ema_cluster_size = self.ema_cluster_size.copy()
        dup.ema_embed_sum = self.ema_embed_sum.copy()
        dup.initialized = self.initialized
        return dup


def kmeans_init(codebook: Codebook, first_batch: np.ndarray, iters: int = 10, seed: int = 0) -> Codebook:
    """Initialize codes as L2-normalized k-means centroids of the first batch.

    Lloyd iterations on the row-normalized batch, centroids seeded from
    distinct batch rows; empty clusters are re-seeded from random batch
    vectors. Deterministic given the seed. Mutates and returns ``codebook``.
    """
    if codebook.initialized:
        raise DomainError("codebook is already initialized")
    if iters < 1:
        raise DomainError(f"kmeans iters must be >= 1, got {iters}")
    batch = np.asarray(first_batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != codebook.dim:
        raise ShapeError(f"kmeans batch shape {batch.shape} incompatible with code dim {codebook.dim}")
    k = codebook.n_codes
    if batch.shape[0] < k:
        raise DomainError(f"kmeans needs at least {k} vectors, got {batch.shape[0]}")

    pts, _ = _normalize_rows(batch)
    rng = np.random.default_rng(seed)
    centroids = pts[rng.choice(pts.shape[0], size=k, replace=False)].copy()
    for _ in range(iters):
        # on the unit sphere, nearest-in-Euclidean == argmax cosine
        assign = np.argmax(pts @ centroids.T, axis=1)
        for i in range(k):
            members = pts[assign == i]
            if members.shape[0] == 0:
                centroids[i] = pts[rng.integers(pts.shape[0])]
            else:
                centroids[i] = members.mean(axis=0)
        centroids, _ = _normalize_rows(centroids)

    codebook.codes = centroids
    codebook.ema_embed_sum = centroids.copy()
    codebook.ema_cluster_size = np.ones(k, dtype=np.float64)
    codebook.usage_age = np.zeros(k, dtype=np.int64)
    codebook.initialized = True
    return codebook


def quantize(codebook: Codebook, inputs: np.ndarray, beta: float = DEFAULT_BETA) -> QuantizeResult:
    """Assign each input row to the code with maximal cosine similarity.

    Inputs are row-normalized first; ties break toward the lowest code index
    (argmax convention); zero-norm rows are replaced by the fixed basis
    vector e0 and reported in ``zero_rows``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"quantize expects [M, dim] inputs, got shape {x.shape}")
    if x.shape[1] != codebook.dim:
        raise ShapeError(f"input dim {x.shape[1]} != code dim {codebook.dim}")
    normed, zero_rows = _normalize_rows(x)
    sims = normed @ codebook.codes.T
    indices = np.argmax(sims, axis=1)
    quantized = codebook.codes[indices]
    diff = normed - quantized
    # mean over rows of the squared euclidean distance to the selected code
    commitment = float(beta * (diff * diff).sum(axis=1).mean()) if x.size else 0.0
    return QuantizeResult(indices=indices, quantized=quantized,
                          commitment_loss=commitment, zero_rows=zero_rows)


def straight_through(inputs: ag.Tensor, result: QuantizeResult) -> ag.Tensor:
    """Graph node forwarding the code vectors, gradient copied through unchanged."""
    return ag.straight_through(inputs, result.quantized)


def ema_update(codebook: Codebook, inputs: np.ndarray, result: QuantizeResult,
               decay: float = DEFAULT_DECAY) -> Codebook:
    """Fold one batch into the per-code EMA and refresh assigned codes.

    Codes with assignments are replaced by their re-normalized EMA sum and
    their age resets; unassigned codes keep their values and age by one.
    Mutates and returns ``codebook``.
    """
    if not 0.0 < decay < 1.0:
        raise DomainError(f"decay must be in (0, 1), got {decay}")
    normed, _ = _normalize_rows(np.asarray(inputs, dtype=np.float64))
    if normed.shape[0] != result.indices.shape[0]:
        raise ShapeError("inputs and quantize result disagree on batch size")
    k = codebook.n_codes
    counts = np.bincount(result.indices, minlength=k).astype(np.float64)
    sums = np.zeros_like(codebook.ema_embed_sum)
    np.add.at(sums, result.indices, normed)

    codebook.ema_cluster_size = decay * codebook.ema_cluster_size + (1.0 - decay) * counts
    codebook.ema_embed_sum = decay * codebook.ema_embed_sum + (1.0 - decay) * sums

    assigned = counts > 0
    prev = codebook.codes[assigned]
    new_codes, degenerate = _normalize_rows(codebook.ema_embed_sum[assigned])
    if degenerate.size:  # EMA sum collapsed to zero; keep the previous code
        new_codes[degenerate] = prev[degenerate]
    codebook.codes[assigned] = new_codes
    codebook.usage_age[assigned] = 0
    codebook.usage_age[~assigned] += 1
    return codebook


def expire_stale(codebook: Codebook, current_batch: np.ndarray, age_threshold: int = DEFAULT_EXPIRE_AGE,
                 seed: int = 0) -> ExpireInfo:
    """Replace codes unused for ``age_threshold`` batches with batch vectors.

    Replacements are distinct normalized rows of the current batch sampled
    uniformly (seeded); if there are more stale codes than batch rows the
    sampling falls back to with-replacement and the result is flagged.
    Replaced codes get age 0 and fresh EMA accumulators.
    """
    if age_threshold < 1:
        raise DomainError(f"age_threshold must be >= 1, got {age_threshold}")
    batch = np.asarray(current_batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise DomainError("expire_stale needs a non-empty [M, dim] batch")
    stale = np.flatnonzero(codebook.usage_age >= age_threshold)
    if stale.size == 0:
        return ExpireInfo(replaced=stale)

    normed, _ = _normalize_rows(batch)
    rng = np.random.default_rng(seed)
    with_replacement = stale.size > normed.shape[0]
    picks = rng.choice(normed.shape[0], size=stale.size, replace=with_replacement)
    codebook.codes[stale] = normed[picks]
    codebook.ema_embed_sum[stale] = normed[picks]
    codebook.ema_cluster_size[stale] = 1.0
    codebook.usage_age[stale] = 0
    return ExpireInfo(replaced=stale, sampled_with_replacement=with_replacement)
