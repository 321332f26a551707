import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfad.autodiff import GradTape
from rfad.errors import ContractError, DimensionError
from rfad.vqfdm import Codebook, efdm_match, fdm_apply, quantize, vq_loss

from oracles import check_gradients, efdm_sort_scatter, nearest_row_scan


def test_quantize_examples():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    emb, idx = quantize(np.array([0.9, 0.8]), cb)
    assert idx == 1 and np.array_equal(emb, [1.0, 1.0])

    emb, idx = quantize(np.array([0.0, 0.0]), cb)
    assert idx == 0 and np.array_equal(emb, [0.0, 0.0])

    dup = Codebook(np.array([[2.0, 2.0], [2.0, 2.0]]))
    _, idx = quantize(np.array([5.0, 5.0]), dup)
    assert idx == 0


def test_quantize_dim_mismatch():
    cb = Codebook(np.ones((3, 4)))
    with pytest.raises(DimensionError):
        quantize(np.ones(3), cb)


def test_quantize_matches_scan_oracle():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.normal(size=(300, 6)))
    for _ in range(25):
        x = rng.normal(size=6)
        _, idx = quantize(x, cb)
        assert idx == nearest_row_scan(x, cb.embeddings.data.astype(np.float64))


def test_vq_loss_hand_value():
    cb = Codebook(np.array([[1.0, 1.0]]))
    loss = vq_loss(np.array([[0.0, 0.0]]), cb, beta=0.25)
    assert np.isclose(float(loss.data), 2.5)


def test_vq_loss_zero_at_fixed_point():
    cb = Codebook(np.array([[1.0, 2.0], [3.0, 4.0]]))
    loss = vq_loss(np.array([[3.0, 4.0]]), cb, beta=0.25)
    assert np.isclose(float(loss.data), 0.0)


def test_vq_loss_gradient_only_on_matched_embeddings():
    cb = Codebook(np.array([[0.0, 0.0], [10.0, 10.0]]))
    with GradTape() as tape:
        loss = vq_loss(np.array([[0.5, 0.5]]), cb, beta=0.25)
        tape.backward(loss)
    grad = cb.embeddings.grad
    assert grad[1, 0] == 0.0 and grad[1, 1] == 0.0
    assert grad[0, 0] != 0.0


def test_vq_loss_gradcheck():
    # The finite-difference target honors the stop-gradient: the first
    # term is frozen, only the commitment term moves with the embeddings
    # (assignments held fixed away from ties).
    rng = np.random.default_rng(3)
    cb = Codebook(rng.normal(size=(5, 3)))
    cb.embeddings.data = cb.embeddings.data.astype(np.float64)
    rows = rng.normal(size=(8, 3))
    beta = 0.25
    idx0 = cb.assign(rows)

    with GradTape() as tape:
        loss = vq_loss(rows, cb, beta=beta)
        tape.backward(loss)

    def sg_aware_loss():
        e = cb.embeddings.data
        return float(beta * np.mean(np.sum((e[idx0] - rows) ** 2, axis=1)))

    from oracles import finite_difference_grads
    fd = finite_difference_grads(sg_aware_loss, [cb.embeddings])[0]
    err = np.linalg.norm(cb.embeddings.grad - fd) / np.linalg.norm(fd)
    assert err < 1e-6


def test_efdm_examples():
    q = np.array([3.0, 1.0, 2.0])
    p = np.array([10.0, 20.0, 30.0])
    assert np.array_equal(efdm_match(q, p, 1.0), q)
    assert np.array_equal(efdm_match(q, p, 0.0), [30.0, 10.0, 20.0])
    assert np.allclose(efdm_match(q, p, 0.5), [16.5, 5.5, 11.0])


def test_efdm_size_mismatch():
    with pytest.raises(DimensionError):
        efdm_match(np.ones(3), np.ones(4), 0.5)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_efdm_matches_sort_scatter_oracle(seed, alpha):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=17)
    p = rng.normal(size=17)
    assert np.allclose(efdm_match(q, p, alpha),
                       efdm_sort_scatter(q, p, alpha))


def test_efdm_alpha_zero_output_sorted_values_equal_p():
    rng = np.random.default_rng(7)
    q = rng.normal(size=30)
    p = rng.normal(size=30)
    out = efdm_match(q, p, 0.0)
    assert np.allclose(np.sort(out), np.sort(p))


def test_efdm_preserves_rank_order():
    rng = np.random.default_rng(8)
    q = rng.normal(size=40)
    p = np.sort(rng.normal(size=40))  # strictly increasing w.h.p.
    out = efdm_match(q, p, 0.3)
    assert np.array_equal(np.argsort(q, kind="stable"),
                          np.argsort(out, kind="stable"))


def test_fdm_apply_identity_alpha_one():
    rng = np.random.default_rng(1)
    cb = Codebook(rng.normal(size=(8, 4)))
    fm = rng.normal(size=(3, 3, 4)).astype(np.float32)
    out = fdm_apply(fm, cb, 1.0)
    assert np.allclose(out, fm, atol=1e-6)


def test_fdm_apply_fixed_point_when_map_is_codebook():
    rng = np.random.default_rng(2)
    emb = rng.normal(size=(4, 3)).astype(np.float32)
    cb = Codebook(emb)
    fm = emb[np.array([[0, 1], [2, 3]])]  # (2, 2, 3), every vector in book
    out = fdm_apply(fm, cb, 0.0)
    assert np.allclose(out, fm, atol=1e-6)


def test_fdm_apply_sorted_multiset_identity():
    rng = np.random.default_rng(3)
    cb = Codebook(rng.normal(size=(6, 5)))
    fm = rng.normal(size=(4, 4, 5)).astype(np.float32)
    alpha = 0.4
    out = fdm_apply(fm, cb, alpha)
    q = np.sort(fm.ravel().astype(np.float64))
    idx = cb.assign(fm.reshape(-1, 5))
    p = np.sort(cb.embeddings.data[idx].ravel().astype(np.float64))
    assert np.allclose(np.sort(out.ravel().astype(np.float64)),
                       alpha * q + (1 - alpha) * p, atol=1e-5)


def test_codebook_from_samples_coverage():
    rng = np.random.default_rng(4)
    samples = rng.normal(size=(400, 4)).astype(np.float32)
    cb = Codebook.from_samples(samples, 64, rng)
    held_out = rng.normal(size=(200, 4))
    idx = cb.assign(held_out)
    qerr = np.linalg.norm(held_out - cb.embeddings.data[idx], axis=1)
    pair_sample = rng.choice(400, size=(500, 2))
    pair_d = np.linalg.norm(samples[pair_sample[:, 0]]
                            - samples[pair_sample[:, 1]], axis=1)
    assert qerr.mean() < np.quantile(pair_d, 0.9)


def test_empty_codebook_rejected():
    with pytest.raises(ContractError):
        Codebook(np.empty((0, 3)))
