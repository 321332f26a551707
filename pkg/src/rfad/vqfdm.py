"""Vector-quantized codebooks and test-time feature distribution matching.

Codebooks are trained with the stop-gradient VQ loss on training residual
features; at test time each position is quantized to its nearest embedding
and the rank-wise interpolation (exact distribution matching) pulls the
test values toward the quantized ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .nnsearch import nearest_rows


@dataclass
class FdmConfig:
    alpha: float = 0.4
    beta: float = 0.25

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ContractError("alpha must lie in [0, 1]")
        if self.beta <= 0.0:
            raise ContractError("beta must be positive")


class Codebook:
    """K learned embeddings representing one layer's residual distribution."""

    def __init__(self, embeddings: np.ndarray):
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ContractError("codebook must be a non-empty (K, C) matrix")
        self.embeddings = ad.parameter(emb)

    @classmethod
    def from_samples(cls, samples: np.ndarray, k: int,
                     rng: np.random.Generator) -> "Codebook":
        """Seed K embeddings from observed feature rows (with replacement
        only when fewer than K rows are available)."""
        samples = np.asarray(samples, dtype=np.float32)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ContractError("need a non-empty (N, C) sample matrix")
        replace = samples.shape[0] < k
        idx = rng.choice(samples.shape[0], size=k, replace=replace)
        return cls(samples[idx])

    @property
    def k(self) -> int:
        return self.embeddings.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.embeddings]

    def assign(self, rows: np.ndarray) -> np.ndarray:
        """Nearest-embedding index per row (ties: lowest index)."""
        return nearest_rows(rows, self.embeddings.data)


def quantize(x: np.ndarray, codebook: Codebook) -> tuple[np.ndarray, int]:
    """Nearest codebook embedding for one vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("quantize expects a single vector")
    if x.shape[0] != codebook.embeddings.shape[1]:
        raise DimensionError(f"vector dim {x.shape[0]} != codebook dim "
                             f"{codebook.embeddings.shape[1]}")
    idx = int(codebook.assign(x[None, :])[0])
    return codebook.embeddings.data[idx].copy(), idx


def vq_loss(rows: np.ndarray, codebook: Codebook, beta: float) -> Tensor:
    """Stop-gradient VQ loss: mean ||sg[x_q]-x||^2 + beta*||x_q-sg[x]||^2.

    Features come from a frozen extractor, so only the second term carries
    gradient (into the matched embeddings); the first is reported as a
    constant.
    """
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError("vq_loss needs a non-empty (N, C) batch")
    idx = codebook.assign(rows)
    matched = ad.gather_permute(codebook.embeddings, idx, axis=0)
    diff = matched - Tensor(rows)
    commit = ad.tmean(ad.tsum(ad.mul(diff, diff), axis=1))
    frozen = float(commit.data)
    return commit * beta + frozen


def efdm_match(q: np.ndarray, p: np.ndarray, alpha: float) -> np.ndarray:
    """Rank-wise interpolation: the rank-i element of q becomes
    alpha*q_(i) + (1-alpha)*p_(i), in place at its original position."""
    q = np.asarray(q, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if q.shape != p.shape:
        raise DimensionError(f"size mismatch: {q.shape} vs {p.shape}")
    order = np.argsort(q, kind="stable")
    p_sorted = np.sort(p, kind="stable")
    out = np.empty_like(q)
    out[order] = alpha * q[order] + (1.0 - alpha) * p_sorted
    return out


def fdm_apply(layer_map: np.ndarray, codebook: Codebook,
              alpha: float) -> np.ndarray:
    """Quantize every position, then match the pooled value distribution."""
    if codebook.k == 0:
        raise ContractError("codebook is empty")
    h, w, c = layer_map.shape
    flat = layer_map.reshape(-1, c)
    idx = codebook.assign(flat)
    quantized = codebook.embeddings.data[idx]
    matched = efdm_match(flat.ravel(), quantized.ravel(), alpha)
    return matched.reshape(h, w, c).astype(layer_map.dtype)
