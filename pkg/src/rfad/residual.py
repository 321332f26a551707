"""Residual features: nearest-reference matching and decorrelation statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ContractError, DimensionError, DomainError
from .featurestore import FeatureDataset, ReferencePool, downsample_mask
from .nnsearch import nearest_rows


@dataclass
class ResidualMap:
    """Per-layer residual tensors plus the matched pool row per position."""

    layers: list[np.ndarray]        # (H_l, W_l, C_l) float32
    match_indices: list[np.ndarray]  # (H_l, W_l) int64


@dataclass
class DecorrelationStats:
    kurtosis: float
    abs_normal: float
    abs_abnormal: float
    scale_std: float


def nearest_reference(query: np.ndarray, pool_layer: np.ndarray):
    """Closest pool row to a single query vector (ties: lowest index)."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise DimensionError("query must be a vector")
    if pool_layer.ndim != 2 or pool_layer.shape[0] == 0:
        raise ContractError("pool layer must be a non-empty matrix")
    if pool_layer.shape[1] != query.shape[0]:
        raise DimensionError(f"query dim {query.shape[0]} != pool dim "
                             f"{pool_layer.shape[1]}")
    idx = int(nearest_rows(query[None, :], pool_layer)[0])
    return idx, pool_layer[idx]


def to_residual(features: list[np.ndarray], pool: ReferencePool) -> ResidualMap:
    """Subtract each position's nearest reference feature (per layer)."""
    if len(features) != len(pool.layers):
        raise DimensionError("feature map count differs from pool layer count")
    layers, indices = [], []
    for fm, pool_layer in zip(features, pool.layers):
        h, w, c = fm.shape
        if pool_layer.shape[1] != c:
            raise DimensionError(f"channel count {c} != pool dim "
                                 f"{pool_layer.shape[1]}")
        flat = fm.reshape(-1, c)
        idx = nearest_rows(flat, pool_layer)
        residual = flat.astype(np.float32) - pool_layer[idx].astype(np.float32)
        layers.append(residual.reshape(h, w, c))
        indices.append(idx.reshape(h, w))
    return ResidualMap(layers, indices)


def excess_kurtosis(samples) -> float:
    """m4 / m2^2 - 3 with population moments."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 4:
        raise ContractError("need at least 4 samples")
    centered = x - x.mean()
    m2 = np.mean(centered ** 2)
    if m2 == 0.0:
        raise DomainError("degenerate distribution: zero variance")
    m4 = np.mean(centered ** 4)
    return float(m4 / (m2 * m2) - 3.0)


def decorrelation_report(
    dataset: FeatureDataset,
    pools: Optional[dict[int, ReferencePool]],
    use_residual: bool,
    transform: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
) -> DecorrelationStats:
    """Distribution statistics of initial or residual features.

    Kurtosis is computed per channel over all pooled vectors of a layer,
    averaged over channels and then layers. abs_normal / abs_abnormal are
    mean absolute components at positions labeled via downsampled masks.
    scale_std is the std over per-class mean L2 norms, per layer, averaged
    over layers. ``transform(layer_index, flat_vectors)`` optionally maps
    vectors (e.g. through a trained constraining network) before the
    statistics.
    """
    classes = sorted({img.class_id for img in dataset.images})
    if use_residual and (pools is None or any(k not in pools for k in classes)):
        raise ContractError("residual statistics need a pool per class")

    n_layers = dataset.n_layers
    per_layer_vecs: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    per_layer_class: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    per_layer_abn: list[list[np.ndarray]] = [[] for _ in range(n_layers)]

    for img in dataset.images:
        if use_residual:
            maps = to_residual(img.features, pools[img.class_id]).layers
        else:
            maps = img.features
        for l, fm in enumerate(maps):
            h, w, c = fm.shape
            flat = fm.reshape(-1, c).astype(np.float64)
            if transform is not None:
                flat = np.asarray(transform(l, flat), dtype=np.float64)
            per_layer_vecs[l].append(flat)
            per_layer_class[l].append(np.full(flat.shape[0], img.class_id))
            pos_mask = downsample_mask(img.mask, (h, w)).reshape(-1)
            per_layer_abn[l].append(pos_mask.astype(bool))

    kurtoses, scale_stds = [], []
    abs_norm_sum = abs_norm_cnt = abs_abn_sum = abs_abn_cnt = 0.0
    for l in range(n_layers):
        vecs = np.concatenate(per_layer_vecs[l], axis=0)
        cls = np.concatenate(per_layer_class[l])
        abn = np.concatenate(per_layer_abn[l])
        kurtoses.append(np.mean([excess_kurtosis(vecs[:, ch])
                                 for ch in range(vecs.shape[1])]))
        norms = np.linalg.norm(vecs, axis=1)
        class_means = []
        for k in classes:
            sel = cls == k
            if not sel.any():
                raise ContractError(f"class {k} has no samples in layer {l}")
            class_means.append(norms[sel].mean())
        scale_stds.append(np.std(class_means))
        normal_abs = np.abs(vecs[~abn])
        abs_norm_sum += normal_abs.sum()
        abs_norm_cnt += normal_abs.size
        if abn.any():
            abn_abs = np.abs(vecs[abn])
            abs_abn_sum += abn_abs.sum()
            abs_abn_cnt += abn_abs.size

    return DecorrelationStats(
        kurtosis=float(np.mean(kurtoses)),
        abs_normal=float(abs_norm_sum / abs_norm_cnt) if abs_norm_cnt else 0.0,
        abs_abnormal=float(abs_abn_sum / abs_abn_cnt) if abs_abn_cnt else 0.0,
        scale_std=float(np.mean(scale_stds)),
    )
