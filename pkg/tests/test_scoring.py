import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfad.errors import ContractError, MetricError
from rfad.scoring import (ScoreMap, auroc, likelihood_score, merge_maps,
                          pro_at_fpr, upsample_bilinear)

from oracles import pair_count_auroc, pro_sweep_oracle


def test_likelihood_score_examples():
    z = np.zeros((1, 2))
    got = likelihood_score(z, np.zeros(1), c=2)
    assert np.isclose(got[0], 1.0 - 1.0 / (2 * np.pi))

    # log p -> -inf gives score -> 1
    z = np.full((1, 2), 50.0)
    assert np.isclose(likelihood_score(z, np.zeros(1), 2)[0], 1.0)

    z = np.array([[1.0, -1.0], [-1.0, 1.0]])  # equal ||z||
    s = likelihood_score(z, np.zeros(2), 2)
    assert s[0] == s[1]


def test_upsample_examples():
    const = np.full((3, 3), 2.5)
    assert np.allclose(upsample_bilinear(const, (7, 5)), 2.5)

    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = upsample_bilinear(grid, (3, 3))
    want = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    assert np.allclose(got, want)

    same = upsample_bilinear(grid, (2, 2))
    assert np.allclose(same, grid)

    with pytest.raises(ContractError):
        upsample_bilinear(grid, (1, 4))


def test_upsample_preserves_bounds():
    rng = np.random.default_rng(0)
    grid = rng.normal(size=(5, 7))
    out = upsample_bilinear(grid, (23, 31))
    assert out.min() >= grid.min() - 1e-12
    assert out.max() <= grid.max() + 1e-12


def test_merge_maps_semantics():
    like = [np.full((4, 4), 0.2), np.full((4, 4), 0.6)]
    cls = [np.full((4, 4), 1.0), np.full((4, 4), 1.0)]
    off = merge_maps(like, cls, use_mac=False)
    assert np.allclose(off.grid, 0.4)
    assert off.image_score == pytest.approx(0.4)

    same = merge_maps(like, like, use_mac=True)
    assert np.allclose(same.grid, 0.4)

    on = merge_maps(like, cls, use_mac=True)
    assert np.allclose(on.grid, 0.7)

    with pytest.raises(ContractError):
        merge_maps([], [], use_mac=False)


def test_merge_maps_image_score_is_max():
    rng = np.random.default_rng(1)
    like = [rng.normal(size=(6, 6))]
    cls = [rng.normal(size=(6, 6))]
    sm = merge_maps(like, cls, use_mac=True)
    assert sm.image_score == pytest.approx(sm.grid.max())


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    with pytest.raises(MetricError):
        auroc([0.4, 0.6], [1, 1])


@pytest.mark.parametrize("seed", range(8))
def test_auroc_matches_pair_count_oracle(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.normal(size=50), 1)  # rounding forces some ties
    labels = rng.integers(0, 2, 50)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert auroc(scores, labels) == pytest.approx(
        pair_count_auroc(scores, labels), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_auroc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=30)
    labels = rng.integers(0, 2, 30)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    base = auroc(scores, labels)
    assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
    assert auroc(3.0 * scores + 7.0, labels) == pytest.approx(base, abs=1e-12)


def test_pro_oracle_detector_scores_one():
    mask = np.zeros((8, 8), np.uint8)
    mask[2:4, 2:5] = 1
    assert pro_at_fpr(mask[None].astype(float), mask[None]) == pytest.approx(1.0)


def test_pro_requires_components():
    with pytest.raises(ContractError):
        pro_at_fpr(np.zeros((1, 4, 4)), np.zeros((1, 4, 4), np.uint8))


def test_pro_constant_scores_hand_curve():
    # constant scores: one operating point at (fpr=1, pro=1) plus (0, 0);
    # interpolation to the cap gives pro = fpr, so the normalized area
    # up to 0.3 is 0.15.
    mask = np.zeros((1, 6, 6), np.uint8)
    mask[0, 1:3, 1:3] = 1
    scores = np.full((1, 6, 6), 0.7)
    assert pro_at_fpr(scores, mask) == pytest.approx(0.15)


@pytest.mark.parametrize("seed", range(6))
def test_pro_matches_sweep_oracle_on_8x8(seed):
    rng = np.random.default_rng(seed)
    mask = np.zeros((2, 8, 8), np.uint8)
    mask[0, 1:4, 2:5] = 1
    mask[1, 5:7, 0:3] = 1
    if seed % 2:
        mask[1, 0, 6:8] = 1  # second component
    scores = rng.random((2, 8, 8))
    scores += 0.5 * mask  # ramp toward detection
    got = pro_at_fpr(scores, mask)
    want = pro_sweep_oracle(scores, mask)
    assert got == pytest.approx(want, abs=1e-6)


def test_pro_invariant_under_monotone_transform():
    rng = np.random.default_rng(9)
    mask = np.zeros((1, 8, 8), np.uint8)
    mask[0, 3:6, 3:6] = 1
    scores = rng.random((1, 8, 8)) + mask
    base = pro_at_fpr(scores, mask)
    assert pro_at_fpr(np.exp(scores), mask) == pytest.approx(base, abs=1e-9)


def test_scoremap_dataclass():
    sm = ScoreMap(grid=np.zeros((2, 2)), image_score=0.0)
    assert sm.image_score == 0.0
