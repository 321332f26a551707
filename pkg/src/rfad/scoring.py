"""Score maps, map aggregation, and AUROC / PRO evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ContractError, MetricError
from .flow import LOG_2PI


@dataclass
class ScoreMap:
    grid: np.ndarray          # (H0, W0) float
    image_score: float


@dataclass
class MetricReport:
    image_auroc: float
    pixel_auroc: float
    pro_03: float


def likelihood_score(z: np.ndarray, log_det: np.ndarray, c: int) -> np.ndarray:
    """1 - exp(log p under the normal base); rank-equivalent to -log p.

    Values can be negative where the density exceeds one; AUROC and PRO
    only use ranks.
    """
    z = np.asarray(z, dtype=np.float64)
    logp = -0.5 * c * LOG_2PI - 0.5 * np.sum(z * z, axis=-1) + np.asarray(
        log_det, dtype=np.float64)
    return 1.0 - np.exp(logp)


def upsample_bilinear(grid: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation to a larger grid."""
    h, w = grid.shape
    ht, wt = target
    if ht < h or wt < w:
        raise ContractError(f"target {target} smaller than source {grid.shape}")
    grid = np.asarray(grid, dtype=np.float64)
    rows = np.linspace(0.0, h - 1.0, ht) if ht > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, wt) if wt > 1 else np.zeros(1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - fc) + grid[np.ix_(r0, c1)] * fc
    bottom = grid[np.ix_(r1, c0)] * (1 - fc) + grid[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bottom * fr


def merge_maps(likelihood_maps: list[np.ndarray],
               classification_maps: list[np.ndarray],
               use_mac: bool) -> ScoreMap:
    """Average maps over layers; with the merged criterion, also average
    the likelihood and classification maps. Image score is the grid max."""
    if not likelihood_maps:
        raise ContractError("need at least one layer map")
    like = np.mean(likelihood_maps, axis=0)
    if use_mac:
        if len(classification_maps) != len(likelihood_maps):
            raise ContractError("layer count mismatch between map kinds")
        cls = np.mean(classification_maps, axis=0)
        grid = 0.5 * (like + cls)
    else:
        grid = like
    return ScoreMap(grid=grid, image_score=float(grid.max()))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the group average."""
    uniq, inverse, counts = np.unique(values, return_inverse=True,
                                      return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outranks random negative),
    ties counted half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined: both classes must be present")
    ranks = _average_ranks(scores)
    rank_sum = ranks[labels == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pro_at_fpr(score_maps, masks, fpr_cap: float = 0.3,
               n_thresholds: int = 200) -> float:
    """Per-region-overlap curve integrated up to ``fpr_cap`` and normalized.

    At each threshold the mean per-connected-component recall (8-connected
    components pooled over all masks) is paired with the pooled per-pixel
    false positive rate over normal pixels.
    """
    scores = np.asarray(score_maps, dtype=np.float64)
    gts = np.asarray(masks).astype(bool)
    if scores.shape != gts.shape:
        raise ContractError("score maps and masks must align")

    structure = np.ones((3, 3), dtype=int)
    components = []  # (image index, component mask, component size)
    for i, gt in enumerate(gts):
        labeled, count = ndimage.label(gt, structure=structure)
        for region in range(1, count + 1):
            comp = labeled == region
            components.append((i, comp, int(comp.sum())))
    if not components:
        raise ContractError("no anomalous connected components present")
    neg = ~gts
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise ContractError("no normal pixels to measure FPR")

    qs = np.linspace(0.0, 1.0, n_thresholds)
    thresholds = np.unique(np.quantile(scores.ravel(), qs, method="lower"))
    thresholds = np.concatenate(([np.inf], thresholds))

    fprs, pros = [], []
    for thr in thresholds:
        detected = scores >= thr
        fprs.append(detected[neg].sum() / n_neg)
        pros.append(float(np.mean([detected[i][comp].sum() / size
                                   for i, comp, size in components])))
    order = np.lexsort((pros, fprs))
    fprs = np.asarray(fprs)[order]
    pros = np.asarray(pros)[order]

    keep = fprs <= fpr_cap
    xs = np.concatenate((fprs[keep], [fpr_cap]))
    ys = np.concatenate((pros[keep], [np.interp(fpr_cap, fprs, pros)]))
    return float(np.trapezoid(ys, xs) / fpr_cap)
