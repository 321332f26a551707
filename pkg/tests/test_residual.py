import numpy as np
import pytest

from rfad.errors import ContractError, DimensionError, DomainError
from rfad.featurestore import (FeatureDataset, ImageRecord, LayerSpec,
                               ReferencePool, SynthSpec, build_reference_pool,
                               synth_dataset)
from rfad.residual import (decorrelation_report, excess_kurtosis,
                           nearest_reference, to_residual)

from oracles import nearest_row_scan


def test_nearest_reference_exact_member():
    pool = np.array([[1.0, 0.0], [0.0, 2.0]], dtype=np.float32)
    idx, ref = nearest_reference(np.array([1.0, 0.0]), pool)
    assert idx == 0
    assert np.array_equal(ref, [1.0, 0.0])


def test_nearest_reference_distance_comparison():
    pool = np.array([[1.0, 0.0], [0.0, 2.0]], dtype=np.float32)
    idx, _ = nearest_reference(np.array([0.4, 0.1]), pool)
    assert idx == 0  # distances ~0.608 vs ~1.942


def test_nearest_reference_tie_lowest_index():
    pool = np.array([[1.0, 1.0], [1.0, 1.0]], dtype=np.float32)
    idx, _ = nearest_reference(np.array([8.0, -1.0]), pool)
    assert idx == 0


def test_nearest_reference_errors():
    with pytest.raises(ContractError):
        nearest_reference(np.ones(2), np.empty((0, 2)))
    with pytest.raises(DimensionError):
        nearest_reference(np.ones(3), np.ones((4, 2)))


def _single_layer_pool(rows: np.ndarray) -> ReferencePool:
    return ReferencePool([rows.astype(np.float32)], 1, (0,))


def test_to_residual_self_match_is_zero():
    rng = np.random.default_rng(0)
    fm = rng.normal(size=(3, 3, 4)).astype(np.float32)
    pool = _single_layer_pool(fm.reshape(-1, 4))
    rm = to_residual([fm], pool)
    assert np.allclose(rm.layers[0], 0.0)


def test_to_residual_single_row_pool():
    rng = np.random.default_rng(1)
    fm = rng.normal(size=(2, 2, 3)).astype(np.float32)
    r = np.array([[0.5, -0.5, 1.0]], dtype=np.float32)
    rm = to_residual([fm], _single_layer_pool(r))
    assert np.allclose(rm.layers[0], fm - r[0])
    assert (rm.match_indices[0] == 0).all()


def test_to_residual_matches_exhaustive_oracle():
    rng = np.random.default_rng(2)
    fm = rng.normal(size=(2, 2, 4)).astype(np.float32)
    pool = rng.normal(size=(3, 4)).astype(np.float32)
    rm = to_residual([fm], _single_layer_pool(pool))
    for h in range(2):
        for w in range(2):
            idx = nearest_row_scan(fm[h, w].astype(np.float64),
                                   pool.astype(np.float64))
            assert rm.match_indices[0][h, w] == idx
            assert np.allclose(rm.layers[0][h, w], fm[h, w] - pool[idx])


def test_residual_minimality():
    rng = np.random.default_rng(3)
    fm = rng.normal(size=(4, 4, 5)).astype(np.float32)
    pool = rng.normal(size=(20, 5)).astype(np.float32)
    rm = to_residual([fm], _single_layer_pool(pool))
    for h in range(4):
        for w in range(4):
            res_norm = np.linalg.norm(rm.layers[0][h, w])
            dists = np.linalg.norm(fm[h, w] - pool, axis=1)
            assert res_norm <= dists.min() + 1e-5


def test_matching_is_permutation_covariant():
    rng = np.random.default_rng(4)
    fm = rng.normal(size=(2, 3, 4)).astype(np.float32)
    pool = rng.normal(size=(10, 4)).astype(np.float32)
    rm = to_residual([fm], _single_layer_pool(pool))
    flipped = fm[::-1].copy()
    rm2 = to_residual([flipped], _single_layer_pool(pool))
    assert np.array_equal(rm2.layers[0], rm.layers[0][::-1])


def test_excess_kurtosis_hand_value():
    assert np.isclose(excess_kurtosis([0, 0, 0, 0, 1]), 0.25)


def test_excess_kurtosis_degenerate():
    with pytest.raises(DomainError):
        excess_kurtosis([3.0, 3.0, 3.0, 3.0])
    with pytest.raises(ContractError):
        excess_kurtosis([1.0, 2.0])


def test_excess_kurtosis_gaussian_asymptotic():
    rng = np.random.default_rng(6)
    assert abs(excess_kurtosis(rng.standard_normal(100_000))) < 0.1


def _synth_with_pools(seed=42, separation=5.0, magnitude=3.0):
    spec = SynthSpec(2, 24, 0.25, [LayerSpec(4, 4, 8)], separation,
                     magnitude, seed)
    ds = synth_dataset(spec)
    pools = {}
    for k in (0, 1):
        idxs = [i for i, img in enumerate(ds.images)
                if img.class_id == k and img.label == 0][:4]
        pools[k] = build_reference_pool(ds, idxs)
    return ds, pools


def test_residual_kurtosis_exceeds_initial():
    ds, pools = _synth_with_pools()
    initial = decorrelation_report(ds, pools, use_residual=False)
    residual = decorrelation_report(ds, pools, use_residual=True)
    assert residual.kurtosis > initial.kurtosis


def test_abnormal_abs_exceeds_normal():
    ds, pools = _synth_with_pools()
    residual = decorrelation_report(ds, pools, use_residual=True)
    assert residual.abs_abnormal > residual.abs_normal


def test_single_class_scale_std_zero():
    spec = SynthSpec(1, 10, 0.0, [LayerSpec(4, 4, 6)], 4.0, 2.0, 11)
    ds = synth_dataset(spec)
    idxs = [0, 1]
    pools = {0: build_reference_pool(ds, idxs)}
    for flag in (False, True):
        stats = decorrelation_report(ds, pools, use_residual=flag)
        assert stats.scale_std == 0.0


def test_report_requires_pools_for_residual():
    spec = SynthSpec(2, 6, 0.0, [LayerSpec(2, 2, 4)], 1.0, 1.0, 3)
    ds = synth_dataset(spec)
    with pytest.raises(ContractError):
        decorrelation_report(ds, None, use_residual=True)
