"""Per-layer Real-NVP density estimator with dual Gaussian bases.

Each block is an affine coupling layer (two-layer MLP subnet producing
clamped scale-logits and shifts for the passive half), followed by a fixed
random channel permutation and a fixed per-channel scaling constant. The
log-determinant is exact: clamped scale-logits plus log|scaling|.

An odd channel count is zero-padded with a pad channel kept at index 0,
excluded from permutations and from the transformed half, so it passes
through as identity and contributes nothing to the log-determinant or the
density.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DomainError, NumericError

LOG_2PI = float(np.log(2.0 * np.pi))


def soft_clamp(s, c: float):
    """(2c/pi) * atan(s/c): odd, strictly increasing, |result| < c."""
    if c <= 0.0:
        raise DomainError("clamp coefficient must be positive")
    if isinstance(s, Tensor):
        return ad.atan(s / c) * (2.0 * c / np.pi)
    return (2.0 * c / np.pi) * np.arctan(np.asarray(s) / c)


class CouplingBlock:
    """Subnet weights plus the fixed permutation and scaling of one block."""

    def __init__(self, d_in: int, d_out: int, hidden: int, dim: int,
                 rng: np.random.Generator, pad_fixed: bool, dtype):
        self.w1 = ad.uniform_fan_in(rng, d_in, (d_in, hidden), dtype)
        self.b1 = ad.parameter(np.zeros(hidden), dtype)
        # zero-initialized outputs start the flow at the identity map
        self.w2 = ad.parameter(np.zeros((hidden, 2 * d_out)), dtype)
        self.b2 = ad.parameter(np.zeros(2 * d_out), dtype)
        if pad_fixed:
            perm = np.concatenate(([0], 1 + rng.permutation(dim - 1)))
        else:
            perm = rng.permutation(dim)
        self.perm = perm.astype(np.intp)
        self.inv_perm = np.argsort(self.perm).astype(np.intp)
        self.scale_const = np.ones(dim, dtype=dtype)  # frozen

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class LayerFlow:
    """Stack of coupling blocks for one feature layer."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 blocks: int = 10, clamp: float = 1.9, dtype=np.float32):
        if channels < 1:
            raise ContractError("need at least one channel")
        self.channels = channels
        self.padded = channels % 2 == 1
        self.dim = channels + 1 if self.padded else channels
        self.d1 = self.dim // 2
        self.d2 = self.dim - self.d1
        self.clamp = clamp
        self.dtype = dtype
        hidden = 2 * self.dim
        self.blocks = [CouplingBlock(self.d1, self.d2, hidden, self.dim, rng,
                                     self.padded, dtype)
                       for _ in range(blocks)]
        self._idx1 = np.arange(self.d1, dtype=np.intp)
        self._idx2 = np.arange(self.d1, self.dim, dtype=np.intp)
        self._sidx = np.arange(self.d2, dtype=np.intp)
        self._tidx = np.arange(self.d2, 2 * self.d2, dtype=np.intp)
        p1 = np.zeros((self.d1, self.dim), dtype=dtype)
        p1[np.arange(self.d1), np.arange(self.d1)] = 1.0
        p2 = np.zeros((self.d2, self.dim), dtype=dtype)
        p2[np.arange(self.d2), self.d1 + np.arange(self.d2)] = 1.0
        self._place1 = Tensor(p1)
        self._place2 = Tensor(p2)
        if self.padded:
            pad = np.zeros((channels, self.dim), dtype=dtype)
            pad[np.arange(channels), 1 + np.arange(channels)] = 1.0
            self._place_pad = Tensor(pad)
            self._real_idx = np.arange(1, self.dim, dtype=np.intp)

    def parameters(self) -> list[Tensor]:
        params = []
        for block in self.blocks:
            params.extend(block.parameters())
        return params

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Map (N, C) features to latents; returns (z, per-row log_det)."""
        if not np.all(np.isfinite(x.data)):
            raise NumericError("flow input is not finite")
        h = ad.matmul(x, self._place_pad) if self.padded else x
        log_det = Tensor(np.zeros(x.shape[0], dtype=x.dtype))
        for block in self.blocks:
            x1 = ad.gather_permute(h, self._idx1)
            x2 = ad.gather_permute(h, self._idx2)
            hid = ad.relu(ad.matmul(x1, block.w1) + block.b1)
            st = ad.matmul(hid, block.w2) + block.b2
            s = soft_clamp(ad.gather_permute(st, self._sidx), self.clamp)
            tshift = ad.gather_permute(st, self._tidx)
            y2 = ad.mul(x2, ad.texp(s)) + tshift
            h = ad.matmul(x1, self._place1) + ad.matmul(y2, self._place2)
            log_det = log_det + ad.tsum(s, axis=1)
            h = ad.gather_permute(h, block.perm)
            h = ad.mul(h, Tensor(block.scale_const))
            log_det = log_det + float(np.sum(np.log(np.abs(block.scale_const))))
        z = ad.gather_permute(h, self._real_idx) if self.padded else h
        return z, log_det

    def inverse(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Numpy-only inverse of ``forward`` (pad coordinate fixed at 0)."""
        z = np.asarray(z, dtype=self.dtype)
        n = z.shape[0]
        if self.padded:
            h = np.zeros((n, self.dim), dtype=self.dtype)
            h[:, 1:] = z
        else:
            h = z.copy()
        log_det = np.zeros(n, dtype=self.dtype)
        for block in reversed(self.blocks):
            h = h / block.scale_const
            log_det -= np.sum(np.log(np.abs(block.scale_const)))
            h = h[:, block.inv_perm]
            x1, y2 = h[:, :self.d1], h[:, self.d1:]
            hid = np.maximum(x1 @ block.w1.data + block.b1.data, 0.0)
            st = hid @ block.w2.data + block.b2.data
            s = soft_clamp(st[:, :self.d2], self.clamp)
            tshift = st[:, self.d2:]
            x2 = (y2 - tshift) * np.exp(-s)
            h = np.concatenate([x1, x2], axis=1)
            log_det -= s.sum(axis=1)
        x = h[:, 1:] if self.padded else h
        return x, log_det


# densities and losses -------------------------------------------------


def log_prob(z, log_det, base: str = "normal", a: float = 1.0):
    """Gaussian base log-density plus the change-of-variables term.

    The abnormal base is mean-shifted by ``a`` along every channel.
    """
    if base not in ("normal", "abnormal"):
        raise ContractError(f"unknown base '{base}'")
    offset = 0.0 if base == "normal" else a
    if isinstance(z, Tensor):
        c = z.shape[-1]
        zc = z - offset if offset else z
        quad = ad.tsum(ad.mul(zc, zc), axis=-1) * 0.5
        return (-0.5 * c * LOG_2PI) - quad + log_det
    z = np.asarray(z, dtype=np.float64)
    c = z.shape[-1]
    quad = 0.5 * np.sum((z - offset) ** 2, axis=-1)
    return -0.5 * c * LOG_2PI - quad + np.asarray(log_det, dtype=np.float64)


def ml_loss(z: Tensor, log_det: Tensor, labels: np.ndarray,
            a: float = 1.0) -> Tensor:
    """Mean negative log-likelihood with label-selected base distributions."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("ml_loss needs a non-empty batch")
    logp_n = log_prob(z, log_det, "normal", a)
    logp_a = log_prob(z, log_det, "abnormal", a)
    y = Tensor(labels.astype(z.dtype))
    picked = ad.mul(1.0 - y, logp_n) + ad.mul(y, logp_a)
    return -ad.tmean(picked)


def classification_score(log_p_n, log_p_a):
    """P(abnormal) = sigmoid(log_p_a - log_p_n), computed in log domain."""
    if isinstance(log_p_n, Tensor) or isinstance(log_p_a, Tensor):
        return ad.sigmoid(ad.sub(log_p_a, log_p_n))
    delta = np.asarray(log_p_a, dtype=np.float64) - np.asarray(log_p_n,
                                                               dtype=np.float64)
    out = ad._sigmoid(np.atleast_1d(delta).astype(np.float64))
    return float(out[0]) if delta.ndim == 0 else out


def _base_logit(z: Tensor, a: float) -> Tensor:
    """log_p_a - log_p_n from z alone (the log-determinants cancel)."""
    quad_n = ad.tsum(ad.mul(z, z), axis=-1)
    za = z - a
    quad_a = ad.tsum(ad.mul(za, za), axis=-1)
    return ad.mul(quad_n - quad_a, 0.5)


def focal_from_logits(delta: Tensor, labels: np.ndarray,
                      gamma: float) -> Tensor:
    """Focal loss on sigmoid(delta), stable for saturated logits.

    Uses (1-p_t)^gamma = exp(gamma * log_sigmoid(-signed_delta)).
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("focal loss needs a non-empty batch")
    sign = Tensor((2.0 * labels - 1.0).astype(delta.dtype))
    signed = ad.mul(delta, sign)
    modulator = ad.texp(ad.mul(ad.log_sigmoid(-signed), gamma))
    return -ad.tmean(ad.mul(modulator, ad.log_sigmoid(signed)))


def focal_loss(scores, labels: np.ndarray, gamma: float) -> Tensor:
    """Focal loss on probabilities: mean -(1-p_t)^gamma * log(p_t)."""
    score_t = scores if isinstance(scores, Tensor) else Tensor(scores)
    vals = score_t.data
    if np.any(vals <= 0.0) or np.any(vals >= 1.0):
        raise DomainError("scores must lie strictly inside (0, 1)")
    labels = np.asarray(labels)
    y = Tensor(labels.astype(score_t.dtype))
    p_t = ad.mul(score_t, y) + ad.mul(1.0 - score_t, 1.0 - y)
    modulator = ad.texp(ad.mul(ad.tlog(1.0 - p_t), gamma))
    return -ad.tmean(ad.mul(modulator, ad.tlog(p_t)))


def nf_total_loss(z: Tensor, log_det: Tensor, labels: np.ndarray,
                  a: float = 1.0, gamma: float = 2.0) -> Tensor:
    """Likelihood loss plus the focal classification loss on one batch."""
    return ml_loss(z, log_det, labels, a) + focal_from_logits(
        _base_logit(z, a), labels, gamma)
