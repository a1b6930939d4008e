import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_orthonormal
from srddl.dictionary import HyperParams
from srddl.exceptions import DataWarning
from srddl.predictor import PredictorParams, predict_scores
from srddl.synthetic import (SynthConfig, calibrate, gen_basis, gen_coeffs, gen_correlations,
                             gen_laplacian, gen_scores, generate, noise_sweep, similarity,
                             sweep_csv)


def test_basis_noiseless_is_orthonormal():
    b = gen_basis(30, 4, 0.0, np.random.default_rng(0))
    np.testing.assert_allclose(b.T @ b, np.eye(4), atol=1e-12)


def test_basis_coherence_grows_with_noise():
    def coherence(sigma):
        vals = []
        for seed in range(100):
            b = gen_basis(30, 4, sigma, np.random.default_rng(seed))
            bn = b / np.linalg.norm(b, axis=0)
            g = np.abs(bn.T @ bn)
            vals.append(g[np.triu_indices(4, 1)].mean())
        return np.mean(vals)
    levels = [coherence(s) for s in (0.0, 0.2, 0.5)]
    assert levels[0] < 1e-12 < levels[1] < levels[2]


def test_basis_reproducible():
    a = gen_basis(10, 3, 0.2, np.random.default_rng(5))
    np.testing.assert_array_equal(a, gen_basis(10, 3, 0.2, np.random.default_rng(5)))


def test_coeffs_zero_scale():
    np.testing.assert_array_equal(gen_coeffs(20, 3, 0.0, np.random.default_rng(0)), 0)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 10.0))
def test_coeffs_nonnegative(seed, sigma):
    assert np.all(gen_coeffs(15, 3, sigma, np.random.default_rng(seed)) >= 0)


def test_coeffs_marginal_std():
    _, raw = gen_coeffs(30, 400, 4.0, np.random.default_rng(0), return_raw=True)
    assert raw.size >= 10_000
    assert abs(raw.std() / 4.0 - 1) <= 0.1


def test_coeffs_are_smooth():
    _, raw = gen_coeffs(60, 200, 1.0, np.random.default_rng(1), length_scale=6.0,
                        return_raw=True)
    lag1 = np.mean(raw[1:] * raw[:-1]) / np.mean(raw * raw)
    assert lag1 == pytest.approx(np.exp(-0.5 / 36), abs=0.05)
    with pytest.raises(ValueError):
        gen_coeffs(5, 1, 1.0, np.random.default_rng(0), length_scale=0.0)


def test_laplacian_edge_priors():
    complete = gen_laplacian(6, 1.0, np.random.default_rng(0))
    np.testing.assert_array_equal(complete.adjacency, np.ones((6, 6)) - np.eye(6))
    with pytest.warns(DataWarning):
        empty = gen_laplacian(6, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(empty.laplacian, np.eye(6))
    p = 60
    half = gen_laplacian(p, 0.5, np.random.default_rng(0))
    pairs = p * (p - 1) / 2
    edges = np.triu(half.adjacency, 1).sum()
    assert abs(edges - pairs / 2) <= 3 * np.sqrt(pairs / 4)


def test_laplacian_prior_matrix():
    prior = np.zeros((4, 4))
    prior[0, 1] = prior[1, 0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        g = gen_laplacian(4, prior, np.random.default_rng(0))
    assert g.adjacency.sum() == 2 and g.adjacency[0, 1] == 1


def test_correlations_noiseless_exact(rng):
    b = random_orthonormal(rng, 6, 2)
    c = rng.random((3, 2))
    g = gen_correlations(b, c, np.eye(6), 0.0)
    np.testing.assert_allclose(g, np.einsum("pk,tk,qk->tpq", b, c, b), atol=1e-15)


def test_correlations_noise_shifts_spectrum(rng):
    b = random_orthonormal(rng, 6, 2)
    c = rng.random((1, 2)) + 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        lap = gen_laplacian(6, 0.5, rng).laplacian
    clean = np.linalg.eigvalsh(gen_correlations(b, c, lap, 0.0)[0])
    noisy = np.linalg.eigvalsh(gen_correlations(b, c, lap, 0.3)[0])
    np.testing.assert_allclose(noisy, clean + 0.3, atol=1e-12)


def test_correlations_symmetric_psd(rng):
    b = gen_basis(8, 3, 0.0, rng)
    g = gen_correlations(b, rng.random((4, 3)), np.eye(8), 0.2)
    np.testing.assert_allclose(g, np.swapaxes(g, 1, 2), atol=1e-12)
    assert min(np.linalg.eigvalsh(x).min() for x in g) >= -1e-8


def test_scores_noiseless_fold(rng):
    params = PredictorParams.initialize(2, 3, rng, hidden=4, head_width=4)
    tracks = [rng.random((4, 2)) for _ in range(5)]
    y, clean = gen_scores(params, tracks, 0.0, rng)
    np.testing.assert_array_equal(y, np.abs(predict_scores(params, tracks)))
    np.testing.assert_array_equal(clean, predict_scores(params, tracks))


def test_scores_noise_level(rng):
    params = PredictorParams.initialize(2, 1, rng, hidden=4, head_width=4)
    tracks = [rng.random((3, 2)) for _ in range(10_000)]
    y, clean = gen_scores(params, tracks, 0.2, rng, offset=3.0)
    assert np.all(y >= 0)
    assert (y - clean).std() == pytest.approx(0.2, rel=0.05)


def test_calibrate():
    raw = np.array([[1.0, 5.0], [3.0, 5.0]])
    np.testing.assert_allclose(calibrate(raw, 3.0, 2.0), [[1.0, 3.0], [5.0, 3.0]])


def test_similarity_identity_and_sign():
    q = random_orthonormal(np.random.default_rng(0), 10, 4)
    assert similarity(q, q) == pytest.approx(1.0)
    assert similarity(q, -q) == pytest.approx(1.0)
    assert similarity(q, 3 * q[:, ::-1]) == pytest.approx(1.0)


def test_similarity_orthogonal_is_zero():
    q = random_orthonormal(np.random.default_rng(0), 8, 4)
    assert similarity(q[:, :2], q[:, 2:]) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_similarity_invariances(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((7, 3))
    b = rng.standard_normal((7, 3))
    s = similarity(a, b)
    perm = rng.permutation(3)
    signs = rng.choice([-1.0, 1.0], 3)
    assert similarity(a[:, perm] * signs, b) == pytest.approx(s, abs=1e-12)
    assert similarity(a, b[:, perm] * signs) == pytest.approx(s, abs=1e-12)
    assert similarity(a, b, matching="greedy") <= s + 1e-12


def test_similarity_errors():
    with pytest.raises(ValueError):
        similarity(np.ones((3, 2)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        similarity(np.ones((3, 1)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        similarity(np.eye(2), np.eye(2), matching="other")


SMALL = SynthConfig(n_subjects=5, k=2, m=2, t=6, p=8, seed=3)


def test_generate_deterministic_and_shared_parameters():
    s1, y1, t1 = generate(SMALL, n_extra=2)
    s2, y2, t2 = generate(SMALL, n_extra=2)
    np.testing.assert_array_equal(y1, y2)
    for a, b in zip(s1, s2):
        np.testing.assert_array_equal(a.gammas, b.gammas)
    assert [s.subject_id for s in s1] == [f"sub{i}" for i in range(7)]
    assert y1.shape == (7, 2) and np.all(y1 >= 0)
    s3, _, t3 = generate(SMALL)
    np.testing.assert_array_equal(t1.b, t3.b)
    np.testing.assert_array_equal(t1.theta.vector, t3.theta.vector)
    np.testing.assert_array_equal(s1[0].gammas, s3[0].gammas)


def test_generate_noiseless_is_exact():
    cfg = SynthConfig(n_subjects=3, k=2, m=1, t=4, p=6, sigma_b=0, sigma_gamma=0, sigma_y=0)
    subjects, y, truth = generate(cfg)
    for s, c in zip(subjects, truth.coeffs):
        np.testing.assert_allclose(s.gammas, np.einsum("pk,tk,qk->tpq", truth.b, c, truth.b),
                                   atol=1e-14)
    np.testing.assert_array_equal(y, np.abs(truth.clean_scores))


def test_config_validation_and_dict():
    with pytest.raises(ValueError):
        SynthConfig(sigma_b=-1)
    with pytest.raises(ValueError):
        SynthConfig(k=40, p=30)
    with pytest.raises(ValueError):
        SynthConfig(p=3, edge_prior=np.ones((2, 2)))
    assert SynthConfig(t=40).scale == 4.0
    assert SynthConfig(p=2, k=1, edge_prior=np.ones((2, 2))).to_dict()["edge_prior"] == \
        [[1.0, 1.0], [1.0, 1.0]]


def test_noise_sweep_small():
    hp = HyperParams(k=2, main_iters=1, epochs=1, coeff_steps=2, soft_init_iters=2,
                     hidden=4, head_width=4)
    seen = []
    rows = noise_sweep("sigma_y", [0.0, 0.5], 2, SMALL, hp, seed=1, n_heldout=2,
                       callback=seen.append)
    assert [r["noise"] for r in rows] == [0.0, 0.5]
    assert len(seen) == 4
    assert all(0 <= r["s_mean"] <= 1 and "mae_2" in r for r in rows)
    again = noise_sweep("sigma_y", [0.0, 0.5], 2, SMALL, hp, seed=1, n_heldout=2)
    assert again == rows
    assert sweep_csv(rows).splitlines()[0].startswith("noise,s_mean,s_stderr")
    with pytest.raises(ValueError):
        noise_sweep("sigma_c", [1.0], 1, SMALL, hp)
