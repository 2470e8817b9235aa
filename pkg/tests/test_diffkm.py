import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phonotok import gradcore as gc
from phonotok.diffkm import (Codebook, DiffKmConfig, bitrate, codebook_stats, hard_ids,
                             init_codebook_lloyd, quantize, soft_assign)
from phonotok.errors import ConfigError, DataError, InitializationError

# mpmath, 30 digits: e^-1 / (2 e^-1 + e^-9) and e^-9 / (2 e^-1 + e^-9)
W_NEAR = 0.499916148407562148546313537027
W_FAR = 0.000167703184875702907372925946185
# exp(H(2/3, 1/3))
PPL_021 = 1.88988157484230974715081591092


def test_lloyd_k1_is_global_mean(rng):
    x = rng.normal(size=(50, 3))
    cb, _ = init_codebook_lloyd(x, 1)
    assert np.allclose(cb.centroids.data[0], x.mean(axis=0), rtol=0, atol=1e-14)


def test_lloyd_two_clouds_recovers_cloud_means(rng):
    a = rng.normal(size=(40, 2)) * 0.1 + [-10, 0]
    b = rng.normal(size=(60, 2)) * 0.1 + [10, 5]
    cb, hist = init_codebook_lloyd(np.vstack([a, b]), 2, seed=3)
    got = cb.centroids.data[np.argsort(cb.centroids.data[:, 0])]
    assert np.allclose(got, [a.mean(axis=0), b.mean(axis=0)], rtol=0, atol=1e-9)
    assert all(h1 >= h2 - 1e-9 for h1, h2 in zip(hist, hist[1:]))


def test_lloyd_rejects_too_few_distinct_points():
    with pytest.raises(InitializationError):
        init_codebook_lloyd(np.ones((10, 3)), 2)


def test_lloyd_deterministic_and_distinct(rng):
    x = rng.normal(size=(200, 4))
    c1, _ = init_codebook_lloyd(x, 8, seed=5)
    c2, _ = init_codebook_lloyd(x, 8, seed=5)
    assert np.array_equal(c1.centroids.data, c2.centroids.data)
    assert len(np.unique(c1.centroids.data, axis=0)) == 8


def test_lloyd_reseeds_empty_clusters():
    # 3 tight groups plus duplicates; k=4 forces a split of some group
    x = np.array([[0.0], [0.0], [0.1], [5.0], [5.1], [10.0], [10.2], [10.1]])
    cb, _ = init_codebook_lloyd(x, 4, seed=0)
    ids = hard_ids(x, cb)
    assert len(np.unique(ids)) == 4


def test_soft_assign_examples():
    cb = Codebook.from_array([[-1.0], [1.0], [3.0]])
    w = soft_assign(gc.Tensor([[0.0]]), cb, 1.0).weights[0]
    assert np.allclose(w, [W_NEAR, W_NEAR, W_FAR], rtol=1e-14, atol=0)
    sym = Codebook.from_array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    assert np.allclose(soft_assign(gc.Tensor([[0.0, 0.0]]), sym, 0.7).weights, 0.25, rtol=1e-15, atol=0)
    cold = soft_assign(gc.Tensor([[0.9, 0.0]]), sym, 1e-8).weights[0]
    assert np.allclose(cold, [1, 0, 0, 0], atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_soft_assign_rejects_nonpositive_tau(tau):
    with pytest.raises(ConfigError):
        soft_assign(gc.Tensor([[0.0]]), Codebook.from_array([[1.0]]), tau)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-20, 20)), st.floats(1e-3, 10))
def test_soft_rows_sum_to_one_and_argmax_is_nearest(z, tau):
    cb = Codebook.from_array(np.array([[0, 0, 0], [1, 2, 3], [-4, 1, 0], [2, -2, 5.0]]))
    a = soft_assign(gc.Tensor(z), cb, tau)
    assert np.allclose(a.weights.sum(axis=1), 1.0, atol=1e-9, rtol=0)
    assert np.all((0 <= a.hard_ids) & (a.hard_ids < 4))
    assert np.array_equal(a.hard_ids, np.argmax(a.weights, axis=1))


def test_hard_ids_ties_pick_lowest_index():
    cb = Codebook.from_array([[1.0], [-1.0]])
    assert hard_ids(np.array([[0.0]]), cb).tolist() == [0]


@pytest.mark.parametrize("mode", ["soft-mixture", "straight-through"])
def test_k1_repeats_single_centroid(mode, rng):
    cb = Codebook.from_array([[0.5, -1.0]])
    z = gc.Tensor(rng.normal(size=(5, 2)))
    for m in ("train", "infer"):
        out, _ = quantize(z, cb, DiffKmConfig(assignment_mode=mode), mode=m)
        assert np.allclose(out.data, np.tile([0.5, -1.0], (5, 1)), rtol=0, atol=1e-15)


def test_infer_mode_outputs_centroid_rows_without_recording(rng):
    cb = Codebook.from_array(rng.normal(size=(6, 3)))
    z = gc.Tensor(rng.normal(size=(20, 3)), True)
    with gc.Graph() as g:
        out, a = quantize(z, cb, DiffKmConfig(), mode="infer")
    assert len(g) == 0
    for row, i in zip(out.data, a.hard_ids):
        assert np.array_equal(row, cb.centroids.data[i])


def test_straight_through_forward_is_hard(rng):
    cb = Codebook.from_array(rng.normal(size=(5, 2)))
    z = gc.Tensor(rng.normal(size=(8, 2)), True)
    out, a = quantize(z, cb, DiffKmConfig(assignment_mode="straight-through"))
    assert np.array_equal(out.data, cb.centroids.data[a.hard_ids])


def test_soft_mixture_gradient_matches_finite_differences(rng):
    cb = Codebook.from_array(rng.uniform(-2, 2, (4, 3)))
    z = gc.Tensor(rng.uniform(-2, 2, (5, 3)), True, name="z")
    cfg = DiffKmConfig(tau=0.8)
    r = gc.grad_check(lambda: gc.sum_all(quantize(z, cb, cfg)[0]), [z, cb.centroids], tol=1e-5,
                      names=["z", "centroids"])
    assert r.passed, r.failures


def test_tau_schedule():
    cfg = DiffKmConfig(tau=1.0, tau_final=0.1)
    assert cfg.tau_at(0, 10) == 1.0
    assert cfg.tau_at(9, 10) == pytest.approx(0.1, rel=1e-14)
    assert all(cfg.tau_at(s, 10) > 0 for s in range(10))
    assert DiffKmConfig(decay="constant").tau_at(5, 10) == 1.0
    with pytest.raises(ConfigError):
        DiffKmConfig(tau=0.1, tau_final=1.0).validate()


def test_codebook_stats_examples():
    s = codebook_stats(np.array([0, 1, 2, 3]), 4)
    assert s.utilization == 1.0 and s.perplexity == pytest.approx(4.0, rel=1e-14)
    s = codebook_stats([2, 2, 2], 4)
    assert s.utilization == 0.25 and s.perplexity == 1.0
    assert codebook_stats(np.array([0, 0, 1]), 2).perplexity == pytest.approx(PPL_021, rel=1e-14)
    assert codebook_stats([np.array([0, 1]), np.array([1])], 2).counts.tolist() == [1, 2]
    with pytest.raises(DataError):
        codebook_stats(np.array([0, 4]), 4)


def test_bitrate():
    assert bitrate(2000, 50) == pytest.approx(548.3, abs=0.05)
    assert bitrate(1024, 50) == pytest.approx(500.0, abs=0.05)
    assert bitrate(4096, 75) == pytest.approx(900.0, abs=0.05)
    assert bitrate(2, 1) == 1.0
    with pytest.raises(DataError):
        bitrate(1, 50)
    with pytest.raises(DataError):
        bitrate(16, 0)
