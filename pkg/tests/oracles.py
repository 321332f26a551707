"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, exhaustive scans, central
finite differences) and shares no code with the package paths it checks.
"""

from __future__ import annotations

import numpy as np

from rfad.autodiff import GradTape


def finite_difference_grads(loss_fn, params, h: float = 1e-4):
    """Central finite differences of loss_fn() w.r.t. each param tensor.

    loss_fn must re-evaluate the loss from the params' current .data.
    Run with float64 parameters for a 64-bit oracle.
    """
    grads = []
    for p in params:
        grad = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(grad)
    return grads


def check_gradients(build_loss, params, rtol: float = 1e-3,
                    h: float = 1e-4, atol: float = 1e-7) -> float:
    """Compare reverse-mode grads against the finite-difference oracle.

    Returns the worst norm-wise relative error over the parameter list.
    Parameters whose gradient vanishes on both sides (below ``atol``,
    where the FD side is pure rounding noise) are counted as matching.
    """
    with GradTape() as tape:
        loss = build_loss()
        tape.backward(loss)
    ad_grads = [None if p.grad is None else p.grad.astype(np.float64)
                for p in params]
    fd_grads = finite_difference_grads(lambda: float(build_loss().data),
                                       params, h=h)
    worst = 0.0
    for g_ad, g_fd in zip(ad_grads, fd_grads):
        if g_ad is None:
            g_ad = np.zeros_like(g_fd)
        norm_ad = np.linalg.norm(g_ad)
        norm_fd = np.linalg.norm(g_fd)
        if norm_ad < atol and norm_fd < atol:
            continue
        err = np.linalg.norm(g_ad - g_fd) / max(norm_fd, 1e-12)
        worst = max(worst, err)
    assert worst <= rtol, f"gradient mismatch: rel err {worst:.3e} > {rtol}"
    return worst


def nearest_row_scan(query: np.ndarray, pool: np.ndarray) -> int:
    """Row-by-row exhaustive scan, lowest index wins ties."""
    best_idx, best_d2 = 0, np.inf
    for r in range(pool.shape[0]):
        d2 = 0.0
        for c in range(pool.shape[1]):
            diff = float(query[c]) - float(pool[r, c])
            d2 += diff * diff
        if d2 < best_d2:
            best_d2, best_idx = d2, r
    return best_idx


def pair_count_auroc(scores, labels) -> float:
    """O(n^2) pair counting with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def _label_components_8(mask: np.ndarray):
    """8-connected components by BFS (no scipy)."""
    mask = mask.astype(bool)
    seen = np.zeros_like(mask)
    comps = []
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            queue = [(r, c)]
            seen[r, c] = True
            cells = []
            while queue:
                rr, cc = queue.pop()
                cells.append((rr, cc))
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = rr + dr, cc + dc
                        if (0 <= nr < h and 0 <= nc < w and mask[nr, nc]
                                and not seen[nr, nc]):
                            seen[nr, nc] = True
                            queue.append((nr, nc))
            comp = np.zeros_like(mask)
            for rr, cc in cells:
                comp[rr, cc] = True
            comps.append(comp)
    return comps


def pro_sweep_oracle(score_maps, masks, fpr_cap: float = 0.3) -> float:
    """Brute-force PRO: every distinct score as a threshold, trapezoid."""
    scores = np.asarray(score_maps, dtype=np.float64)
    gts = np.asarray(masks).astype(bool)
    comps = []
    for i, gt in enumerate(gts):
        for comp in _label_components_8(gt):
            comps.append((i, comp))
    neg = ~gts
    n_neg = neg.sum()
    thresholds = np.concatenate(([np.inf], np.unique(scores)[::-1]))
    points = []
    for thr in thresholds:
        det = scores >= thr
        fpr = det[neg].sum() / n_neg
        pro = np.mean([det[i][comp].sum() / comp.sum() for i, comp in comps])
        points.append((fpr, pro))
    points.sort()
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    keep = xs <= fpr_cap
    xs_c = np.concatenate((xs[keep], [fpr_cap]))
    ys_c = np.concatenate((ys[keep], [np.interp(fpr_cap, xs, ys)]))
    area = 0.0
    for i in range(len(xs_c) - 1):
        area += (xs_c[i + 1] - xs_c[i]) * (ys_c[i + 1] + ys_c[i]) / 2.0
    return float(area / fpr_cap)


def efdm_sort_scatter(q, p, alpha: float) -> np.ndarray:
    """Literal sort-and-scatter reading of rank-wise interpolation."""
    q = np.asarray(q, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    order = sorted(range(len(q)), key=lambda i: (q[i], i))
    p_sorted = sorted(p)
    out = np.empty_like(q)
    for rank, pos in enumerate(order):
        out[pos] = alpha * q[pos] + (1.0 - alpha) * p_sorted[rank]
    return out


def block_max_downsample(mask: np.ndarray, ht: int, wt: int) -> np.ndarray:
    """Loop-based block-partition max pooling."""
    h0, w0 = mask.shape
    out = np.zeros((ht, wt), dtype=np.uint8)
    for i in range(ht):
        for j in range(wt):
            r0, r1 = (i * h0) // ht, ((i + 1) * h0) // ht
            c0, c1 = (j * w0) // wt, ((j + 1) * w0) // wt
            out[i, j] = mask[r0:r1, c0:c1].max()
    return out
