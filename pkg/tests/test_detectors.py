import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import ace_whitened

from mihe.core import den_floor
from mihe.data import BagDataset, Dictionary
from mihe.detectors import (
    BackgroundModel,
    SingularCovarianceError,
    ace_score,
    ace_scores,
    fit_background,
    hd_score,
    hd_scores,
    score_dataset,
)
from mihe.simulate import TARGET, generate, synthetic_endmembers, table1_config


def identity_model(d):
    return BackgroundModel(np.zeros(d), np.eye(d), np.eye(d))


def true_dictionary():
    spectra = {s.name: s.values / np.linalg.norm(s.values) for s in synthetic_endmembers()}
    targets = spectra.pop(TARGET)[:, None]
    return Dictionary(targets, np.stack(list(spectra.values()), axis=1))


def test_fit_background_hand_case():
    bg = fit_background(np.array([[0.0, 0.0], [2.0, 0.0]]), ridge=1e-3)
    assert np.array_equal(bg.mean, [1.0, 0.0])
    assert np.allclose(bg.covariance, [[2.001, 0.0], [0.0, 0.001]], atol=1e-15)


def test_fit_background_singular():
    with pytest.raises(SingularCovarianceError):
        fit_background(np.ones((5, 3)), ridge=0.0)
    with pytest.raises(ValueError):
        fit_background(np.ones((1, 3)))


def test_fit_background_inverse():
    X = np.random.default_rng(0).normal(size=(50, 10))
    bg = fit_background(X, ridge=1e-6)
    assert np.max(np.abs(bg.inverse @ bg.covariance - np.eye(10))) <= 1e-6


def test_ace_aligned_and_orthogonal():
    bg = identity_model(3)
    s = np.array([1.0, 2.0, 0.0])
    assert ace_score(2.5 * s, s, bg) == pytest.approx(1.0, abs=1e-15)
    assert ace_score(np.array([2.0, -1.0, 0.0]), s, bg) == 0.0
    assert ace_score(np.zeros(3), s, bg) == 0.0


def test_ace_matches_whitening_oracle():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(5, 5))
    cov = A @ A.T + 0.5 * np.eye(5)
    mean = rng.normal(size=5)
    bg = BackgroundModel(mean, cov, np.linalg.inv(cov))
    for _ in range(20):
        x, s = rng.normal(size=5), rng.normal(size=5)
        assert abs(ace_score(x, s, bg) - ace_whitened(x, s, mean, cov)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), c1=st.floats(1e-3, 1e3), c2=st.floats(1e-3, 1e3))
def test_ace_scale_invariance_and_range(seed, c1, c2):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 6))
    bg = fit_background(X, ridge=1e-6)
    x, s = rng.normal(size=6), rng.normal(size=6)
    base = ace_score(x, s, bg)
    scaled = ace_score(bg.mean + c2 * (x - bg.mean), c1 * s, bg)
    assert abs(base - scaled) <= 1e-10
    scores = ace_scores(X, s, bg)
    assert np.all((scores >= 0) & (scores <= 1))


def test_ace_fuses_several_targets():
    bg = identity_model(3)
    S = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    x = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    assert np.allclose(ace_scores(x, S, bg), [1.0, 0.5])
    assert np.allclose(ace_scores(x, S, bg, fuse="mean"), [0.5, 0.25])


def test_ace_input_errors():
    bg = identity_model(3)
    with pytest.raises(ValueError):
        ace_scores(np.ones((2, 4)), np.ones(3), bg)
    with pytest.raises(ValueError):
        ace_scores(np.ones((2, 3)), np.zeros(3), bg)
    with pytest.raises(ValueError):
        ace_scores(np.ones((2, 3)), np.ones(3), bg, fuse="sum")


def test_hd_strong_target():
    D = Dictionary(np.array([[1.0], [0.0], [0.0]]), np.array([[0.0], [1.0], [0.0]]))
    x = np.array([5.0, 0.1, 0.0])
    assert hd_score(x, D, lam=1e-3) > 1e3


def test_hd_background_spanned_degenerate_case():
    D = Dictionary(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
    score = hd_score(np.array([0.0, 3.0]), D, lam=0.0, iters=500, tol=0.0)
    assert 0.0 <= score <= 1.0 + 1e-9


def test_hd_target_instance_scores_higher():
    D = true_dictionary()
    E = np.stack([s.values for s in synthetic_endmembers()])
    names = [s.name for s in synthetic_endmembers()]
    with_target = np.zeros(4)
    with_target[names.index(TARGET)] = 0.5
    with_target[names.index("pyroxenite")] = 0.5
    without = np.zeros(4)
    without[names.index("phyllite")] = 0.4
    without[names.index("pyroxenite")] = 0.6
    s = hd_scores(np.stack([with_target @ E, without @ E]), D, lam=1e-3)
    assert s[0] > s[1]


def test_hd_nondecreasing_in_target_abundance():
    D = true_dictionary()
    E = {s.name: s.values for s in synthetic_endmembers()}
    background = 0.5 * E["phyllite"] + 0.5 * E["pyroxenite"]
    X = np.stack([(1 - a) * background + a * E[TARGET] for a in np.linspace(0, 0.8, 9)])
    s = hd_scores(X, D, lam=1e-3, iters=2000, tol=1e-14)
    assert np.all(np.diff(s) >= 0)


def test_hd_uses_den_floor():
    D = Dictionary(np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))
    x = np.array([[2.0, 0.0]])
    s = hd_scores(x, D, lam=0.0, iters=500, tol=0.0)
    assert s[0] == pytest.approx(4.0 / den_floor(2), rel=1e-6)


@pytest.fixture(scope="module")
def scored():
    res = generate(table1_config(points_per_bag=100, targets_per_positive_bag=20, seed=9))
    neg = np.vstack([b.instances for b in res.dataset.negative_bags])
    return res, true_dictionary(), fit_background(neg, 1e-6)


def test_score_dataset_empty_and_single(scored):
    res, D, bg = scored
    empty = score_dataset(np.empty((0, 211)), "ace", D, bg)
    assert len(empty) == 0
    x = res.dataset.bags[0].instances[:1]
    assert score_dataset(x, "ace", D, bg).scores[0] == ace_score(x[0], D.targets[:, 0], bg)
    assert score_dataset(x, "hd", D, lam=1e-3).scores[0] == hd_score(x[0], D, 1e-3)


@pytest.mark.parametrize("method", ["ace", "hd"])
def test_score_dataset_chunking_is_exact(scored, method):
    res, D, bg = scored
    X = res.dataset.instances()[::17]
    whole = score_dataset(X, method, D, bg)
    for chunk in (1, 7, 50):
        parts = score_dataset(X, method, D, bg, chunk_size=chunk)
        assert np.array_equal(whole.scores, parts.scores)
    perm = np.random.default_rng(0).permutation(X.shape[0])
    assert np.array_equal(score_dataset(X[perm], method, D, bg).scores, whole.scores[perm])


def test_score_dataset_carries_labels(scored):
    res, D, bg = scored
    out = score_dataset(res.dataset, "ace", D, bg)
    assert np.array_equal(out.truth, res.labels)
    assert out.bag_ids[0] == res.dataset.bags[0].id
    assert len(out) == res.dataset.N


def test_score_dataset_errors(scored):
    res, D, bg = scored
    with pytest.raises(ValueError, match="ace, hd"):
        score_dataset(res.dataset, "glrt", D, bg)
    with pytest.raises(ValueError):
        score_dataset(res.dataset, "ace", D, None)
    small = BagDataset.from_arrays([np.ones((2, 5))], [1])
    with pytest.raises(ValueError):
        score_dataset(small, "hd", D)


def test_true_signature_ranks_target_instances():
    res = generate(table1_config(points_per_bag=100, targets_per_positive_bag=20, seed=4, p_t_mean=0.5))
    neg = np.vstack([b.instances for b in res.dataset.negative_bags])
    bg = fit_background(neg, 1e-6)
    s = score_dataset(res.dataset, "ace", true_dictionary(), bg)
    assert s.scores[s.truth == 1].mean() > s.scores[s.truth == 0].mean()
    assert math.isfinite(s.scores.sum())
