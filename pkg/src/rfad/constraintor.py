"""Feature constraining network and the barrier-based OCC objectives.

The per-layer network is a position-wise 1x1 conv -> batch norm -> relu ->
1x1 conv, so a layer map is processed as a flat (positions, channels)
matrix. The training objective compresses normal residual features into
the interval between two co-centered hyperspheres measured in pseudo-Huber
distance, while keeping abnormal residuals in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ContractError, DimensionError

RADIUS_CAP = 0.4
RADIUS_RATIO = 0.99


@dataclass
class HypersphereConfig:
    """Radii and barrier settings; the center is fixed at the origin."""

    r_max: float = RADIUS_CAP
    r_min: float = RADIUS_RATIO * RADIUS_CAP
    t: float = 1.0
    lam: float = 0.001

    def __post_init__(self):
        if not (0.0 < self.r_min < self.r_max):
            raise ContractError("need 0 < r_min < r_max")
        if self.t <= 0.0:
            raise ContractError("barrier precision t must be positive")
        if self.lam < 0.0:
            raise ContractError("regularization weight must be non-negative")


class LayerConstraintor:
    """Position-wise conv-A -> BN -> ReLU -> conv-B for one feature layer."""

    def __init__(self, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.channels = channels
        self.w_a = ad.uniform_fan_in(rng, channels, (channels, channels), dtype)
        self.b_a = ad.parameter(np.zeros(channels), dtype)
        self.bn_gamma = ad.parameter(np.ones(channels), dtype)
        self.bn_beta = ad.parameter(np.zeros(channels), dtype)
        self.bn_state = BatchNormState(channels, dtype=dtype)
        self.w_b = ad.uniform_fan_in(rng, channels, (channels, channels), dtype)
        self.b_b = ad.parameter(np.zeros(channels), dtype)

    def parameters(self) -> list[Tensor]:
        return [self.w_a, self.b_a, self.bn_gamma, self.bn_beta,
                self.w_b, self.b_b]

    def weight_matrices(self) -> list[Tensor]:
        return [self.w_a, self.w_b]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[-1] != self.channels:
            raise DimensionError(f"expected {self.channels} channels, "
                                 f"got {x.shape[-1]}")
        h = ad.matmul(x, self.w_a) + self.b_a
        h = ad.batch_norm(h, self.bn_gamma, self.bn_beta, self.bn_state, training)
        h = ad.relu(h)
        return ad.matmul(h, self.w_b) + self.b_b


def constrain(net: LayerConstraintor, layer_map: np.ndarray,
              training: bool = False) -> np.ndarray:
    """Apply the network to an (H, W, C) map, preserving its shape."""
    h, w, c = layer_map.shape
    out = net.forward(Tensor(layer_map.reshape(-1, c)), training)
    return out.data.reshape(h, w, c)


def pseudo_huber(v: np.ndarray) -> float:
    """sqrt(||v||^2 + 1) - 1 for a single vector."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.sqrt(np.dot(v, v) + 1.0) - 1.0)


def pseudo_huber_rows(x: Tensor) -> Tensor:
    """Row-wise pseudo-Huber distance to the origin, differentiable."""
    sq = ad.tsum(ad.mul(x, x), axis=1)
    return ad.tsqrt(sq + 1.0) - 1.0


def log_barrier_term(s, t: float) -> Tensor:
    """-log_sigmoid(-s) * exp(s) / t, the smooth one-sided barrier."""
    if t <= 0.0:
        raise ContractError("barrier precision t must be positive")
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=np.float64))
    return ad.mul(-ad.log_sigmoid(-s), ad.texp(s)) / t


def bi_occ_loss(distances: Tensor, cfg: HypersphereConfig) -> Tensor:
    """Mean bidirectional barrier pressing distances into [r_min, r_max]."""
    if distances.size == 0:
        raise ContractError("bi_occ_loss needs at least one distance")
    outer = log_barrier_term(distances - cfg.r_max, cfg.t)
    inner = log_barrier_term(cfg.r_min - distances, cfg.t)
    return ad.tmean(outer + inner)


def ai_occ_loss(normal_distances: Tensor, abnormal_in: Tensor,
                abnormal_out: Tensor, cfg: HypersphereConfig) -> Tensor:
    """Bidirectional OCC loss plus the anomaly-invariance penalty.

    The penalty is the mean Euclidean displacement of abnormal residuals
    under the network; it vanishes when the abnormal set is empty.
    """
    loss = bi_occ_loss(normal_distances, cfg)
    if abnormal_out.shape[0] == 0:
        return loss
    diff = abnormal_out - abnormal_in
    displacement = ad.tsqrt(ad.tsum(ad.mul(diff, diff), axis=1))
    return loss + ad.tmean(displacement)


def dynamic_radii(abnormal_residuals: np.ndarray,
                  cap: float = RADIUS_CAP) -> tuple[float, float]:
    """Per-batch radii: r_max = min(max distance of abnormals, cap).

    Falls back to the cap when the batch carries no abnormal features.
    """
    if abnormal_residuals is None or len(abnormal_residuals) == 0:
        r_max = cap
    else:
        dists = [pseudo_huber(row) for row in np.atleast_2d(abnormal_residuals)]
        r_max = min(max(dists), cap)
    return r_max, RADIUS_RATIO * r_max


def weight_regularizer(weights: list[Tensor], lam: float) -> Tensor:
    """lam/2 times the summed squared Frobenius norms of weight matrices."""
    if lam < 0.0:
        raise ContractError("regularization weight must be non-negative")
    total = Tensor(np.float32(0.0))
    for w in weights:
        total = total + ad.tsum(ad.mul(w, w))
    return total * (lam / 2.0)


@dataclass
class SoapBubbleResult:
    threshold: float
    bound: float
    empirical_fraction: float
    passed: bool


def soap_bubble_check(d: int, t: float, n_samples: int,
                      seed: int = 0) -> SoapBubbleResult:
    """Empirical check that standard Gaussians concentrate outside a ball.

    Samples ``n_samples`` standard-normal d-vectors and compares the
    fraction with norm >= sqrt(d - 2*sqrt(d*t)) against the 1 - e^-t
    bound, allowing three binomial standard errors of slack.
    """
    radius_sq = d - 2.0 * np.sqrt(d * t)
    if radius_sq <= 0.0:
        raise ContractError("requires d - 2*sqrt(d*t) > 0")
    if n_samples < 1000:
        raise ContractError("need at least 1000 samples")
    rng = np.random.default_rng(seed)
    samples = rng.standard_normal((n_samples, d))
    norms = np.linalg.norm(samples, axis=1)
    threshold = float(np.sqrt(radius_sq))
    bound = float(1.0 - np.exp(-t))
    fraction = float(np.mean(norms >= threshold))
    slack = 3.0 * np.sqrt(bound * (1.0 - bound) / n_samples)
    return SoapBubbleResult(threshold, bound, fraction,
                            fraction >= bound - slack)
