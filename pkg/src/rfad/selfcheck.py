"""Built-in invariant checks behind the ``verify`` subcommand."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .constraintor import log_barrier_term, soap_bubble_check
from .flow import LayerFlow
from .nnsearch import HAVE_COMPILED_KERNEL, nearest_rows
from .optim import Adam
from .scoring import auroc
from .vqfdm import efdm_match


def _check_soap_bubble(d: int, t: float):
    res = soap_bubble_check(d, t, 10_000, seed=7)
    detail = (f"threshold={res.threshold:.3f} bound={res.bound:.4f} "
              f"empirical={res.empirical_fraction:.4f}")
    return res.passed, detail


def _check_flow_invertibility():
    rng = np.random.default_rng(11)
    flow = LayerFlow(8, rng, blocks=4)
    for block in flow.blocks:
        block.w2.data = rng.normal(0, 0.3, block.w2.shape).astype(np.float32)
    x = rng.normal(0, 1, (64, 8)).astype(np.float32)
    z, ld = flow.forward(Tensor(x))
    back, ld_inv = flow.inverse(z.data)
    err = float(np.max(np.abs(back - x)))
    ld_sum = float(np.max(np.abs(ld.data + ld_inv)))
    return err < 1e-4 and ld_sum < 1e-3, f"max|x-x'|={err:.2e}"


def _check_nearest_oracle():
    rng = np.random.default_rng(3)
    pool = rng.normal(0, 1, (500, 12))
    queries = rng.normal(0, 1, (64, 12))
    got = nearest_rows(queries, pool)
    diff = queries[:, None, :] - pool[None, :, :]
    want = np.argmin(np.einsum("qrc,qrc->qr", diff, diff), axis=1)
    ok = np.array_equal(got, want)
    return ok, f"compiled_kernel={HAVE_COMPILED_KERNEL}"


def _check_efdm_oracle():
    got = efdm_match([3.0, 1.0, 2.0], [10.0, 20.0, 30.0], 0.0)
    return np.allclose(got, [30.0, 10.0, 20.0]), f"{got.tolist()}"


def _check_auroc_oracle():
    rng = np.random.default_rng(5)
    scores = rng.normal(0, 1, 50)
    labels = rng.integers(0, 2, 50)
    if labels.sum() in (0, 50):
        labels[0] = 1 - labels[0]
    pairs = hits = 0
    for s, y in zip(scores, labels):
        if y != 1:
            continue
        for s2, y2 in zip(scores, labels):
            if y2 != 0:
                continue
            pairs += 1
            hits += 1.0 if s > s2 else (0.5 if s == s2 else 0.0)
    want = hits / pairs
    got = auroc(scores, labels)
    return abs(got - want) < 1e-12, f"auroc={got:.4f}"


def _check_adam_identity():
    p = Tensor(np.arange(6, dtype=np.float32), requires_grad=True)
    before = p.data.copy()
    opt = Adam([p], lr=0.1, weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros_like(p.data)
        opt.step()
    return np.array_equal(p.data, before), "zero grad, zero decay"


def _check_barrier_convexity():
    grid = np.linspace(-6.0, 6.0, 241)
    vals = np.array([float(log_barrier_term(float(s), 1.0).data)
                     for s in grid])
    second = np.diff(vals, 2)
    return bool((second >= -1e-9).all()), f"min second diff={second.min():.2e}"


def run_all():
    checks = [
        ("soap_bubble d=256 t=4", lambda: _check_soap_bubble(256, 4.0)),
        ("soap_bubble d=1024 t=4", lambda: _check_soap_bubble(1024, 4.0)),
        ("flow inverse identity", _check_flow_invertibility),
        ("nearest-row oracle", _check_nearest_oracle),
        ("efdm sort-scatter oracle", _check_efdm_oracle),
        ("auroc pair-count oracle", _check_auroc_oracle),
        ("adam zero-grad identity", _check_adam_identity),
        ("log-barrier convexity", _check_barrier_convexity),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crash
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
