"""Discriminant-information core: oracle-backed tests.

Every closed form is checked against an independent brute-force path:
naive triple loops for the gram matrices, explicit matrix inversion for the
trace value, diagonal masking for exact influence, and central finite
differences for the derivative scores.
"""

import numpy as np
import pytest

from diprune.di_core import (
    DiGrams,
    FeatureMatrix,
    LabelMatrix,
    compute_grams,
    di,
    influence_derivative,
    influence_exact,
    mrlse_oracle,
)
from diprune.errors import DegenerateInput


# -- oracles (independent of the implementation paths) -----------------------


def naive_grams(X, Y):
    """Triple-loop centered gram matrices."""
    D, N = X.shape
    K = Y.shape[0]
    xm = X.mean(axis=1)
    ym = Y.mean(axis=1)
    kbar = np.zeros((D, D))
    for i in range(D):
        for j in range(D):
            kbar[i, j] = sum(
                (X[i, n] - xm[i]) * (X[j, n] - xm[j]) for n in range(N)
            )
    cross = np.zeros((D, K))
    for i in range(D):
        for k in range(K):
            cross[i, k] = sum(
                (X[i, n] - xm[i]) * (Y[k, n] - ym[k]) for n in range(N)
            )
    return kbar, cross @ cross.T


def explicit_di(kbar, kb, rho):
    """Trace via explicit inverse, no factorization shared with di()."""
    D = kbar.shape[0]
    return float(np.trace(np.linalg.inv(kbar + rho * np.eye(D)) @ kb))


def masked_di(kbar, kb, rho, mask):
    """Masked trace with the indicator applied as a diagonal matrix."""
    D = kbar.shape[0]
    M = np.diag(np.asarray(mask, dtype=float))
    A = M @ kbar @ M + rho * np.eye(D)
    return float(np.trace(np.linalg.inv(A) @ (M @ kb @ M)))


def random_instance(rng, D=None, N=None, K=None, snr=1.0):
    D = D or int(rng.integers(2, 12))
    N = N or int(rng.integers(8, 128))
    K = K or int(rng.integers(2, 6))
    labels = rng.integers(0, K, N)
    # class-dependent mean shifts keep the signal matrix non-trivial
    shifts = rng.standard_normal((K, D)) * snr
    X = shifts[labels].T + rng.standard_normal((D, N))
    Y = np.zeros((K, N))
    Y[labels, np.arange(N)] = 1.0
    return X, Y


# -- compute_grams -----------------------------------------------------------


def test_grams_constant_rows_vanish():
    X = np.ones((3, 10)) * np.array([[1.0], [2.0], [-3.0]])
    Y = np.zeros((2, 10))
    Y[0, :5] = 1
    Y[1, 5:] = 1
    g = compute_grams(X, Y, rho=0.1)
    np.testing.assert_allclose(g.kbar, 0.0, atol=1e-12)
    np.testing.assert_allclose(g.kb, 0.0, atol=1e-12)


def test_grams_one_dim_frozen_values():
    # X equals the first row of the one-hot Y, centered: [.5,.5,-.5,-.5].
    # Oracle arithmetic: kbar = 4 * 0.25 = 1; the 1xK cross term is [1, -1]
    # so kb = 1^2 + (-1)^2 = 2.
    X = np.array([[0.5, 0.5, -0.5, -0.5]])
    Y = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
    g = compute_grams(X, Y, rho=0.1)
    np.testing.assert_allclose(g.kbar, [[1.0]], atol=1e-12)
    np.testing.assert_allclose(g.kb, [[2.0]], atol=1e-12)
    ok, ob = naive_grams(X, Y)
    np.testing.assert_allclose(g.kbar, ok, atol=1e-12)
    np.testing.assert_allclose(g.kb, ob, atol=1e-12)


def test_grams_match_naive_loops():
    rng = np.random.default_rng(7)
    for _ in range(5):
        X, Y = random_instance(rng)
        g = compute_grams(X, Y, rho=0.1)
        ok, ob = naive_grams(X, Y)
        np.testing.assert_allclose(g.kbar, ok, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(g.kb, ob, rtol=1e-10, atol=1e-10)


def test_grams_symmetric_psd_traces():
    rng = np.random.default_rng(3)
    X, Y = random_instance(rng, D=8, N=64)
    g = compute_grams(X, Y, rho=0.1)
    np.testing.assert_allclose(g.kbar, g.kbar.T, atol=1e-8)
    np.testing.assert_allclose(g.kb, g.kb.T, atol=1e-8)
    assert np.trace(g.kbar) >= 0
    assert np.trace(g.kb) >= 0


def test_grams_rejects_single_sample():
    with pytest.raises(DegenerateInput):
        compute_grams(np.ones((2, 1)), np.ones((1, 1)), rho=0.1)


def test_grams_rejects_column_mismatch():
    with pytest.raises(DegenerateInput):
        compute_grams(np.ones((2, 4)), np.ones((2, 5)), rho=0.1)


# -- di ----------------------------------------------------------------------


def test_di_zero_signal():
    g = DiGrams(kbar=np.eye(3), kb=np.zeros((3, 3)), rho=0.1)
    assert di(g) == 0.0


def test_di_scalar_formula():
    g = DiGrams(kbar=np.array([[1.0]]), kb=np.array([[1.0]]), rho=0.1)
    np.testing.assert_allclose(di(g), 1.0 / 1.1, rtol=1e-12)


def test_di_matches_explicit_inverse():
    rng = np.random.default_rng(11)
    X, Y = random_instance(rng, D=8, N=64, K=4)
    g = compute_grams(X, Y, rho=0.1)
    np.testing.assert_allclose(
        di(g), explicit_di(g.kbar, g.kb, 0.1), rtol=1e-8
    )


# -- mrlse ---------------------------------------------------------------------


def test_mrlse_zero_features():
    X = np.zeros((3, 12))
    Y = np.zeros((3, 12))
    Y[np.arange(12) % 3, np.arange(12)] = 1.0
    res = mrlse_oracle(X, Y, rho=0.1)
    np.testing.assert_allclose(res.weights, 0.0, atol=1e-12)
    np.testing.assert_allclose(res.mrlse, res.label_energy, rtol=1e-12)


def test_mrlse_di_identity():
    rng = np.random.default_rng(5)
    for _ in range(10):
        X, Y = random_instance(rng)
        g = compute_grams(X, Y, rho=0.05)
        res = mrlse_oracle(X, Y, rho=0.05)
        lhs = di(g) + res.mrlse
        assert abs(lhs - res.label_energy) <= 1e-6 * max(1.0, res.label_energy)


def test_mrlse_large_rho_limit():
    rng = np.random.default_rng(9)
    X, Y = random_instance(rng, D=6, N=48, K=3)
    prev_di = np.inf
    prev_mrlse = -np.inf
    energy = mrlse_oracle(X, Y, rho=1.0).label_energy
    for rho in (1.0, 1e2, 1e4, 1e6):
        g = compute_grams(X, Y, rho=rho)
        res = mrlse_oracle(X, Y, rho=rho)
        assert di(g) <= prev_di + 1e-12
        assert res.mrlse >= prev_mrlse - 1e-12
        prev_di, prev_mrlse = di(g), res.mrlse
    assert prev_di < 1e-3
    np.testing.assert_allclose(prev_mrlse, energy, rtol=1e-3)


# -- exact influence -----------------------------------------------------------


def test_influence_exact_zero_channel():
    rng = np.random.default_rng(2)
    X, Y = random_instance(rng, D=5, N=40, K=3)
    X[2] = 0.0
    phi = influence_exact(X, Y, rho=0.1, j=2)
    assert abs(phi) <= 1e-9


def test_influence_exact_duplicate_channels():
    rng = np.random.default_rng(4)
    X, Y = random_instance(rng, D=5, N=40, K=3)
    X[3] = X[1]
    p1 = influence_exact(X, Y, rho=0.1, j=1)
    p3 = influence_exact(X, Y, rho=0.1, j=3)
    np.testing.assert_allclose(p1, p3, rtol=1e-9, atol=1e-12)


def test_influence_exact_matches_masked_oracle():
    rng = np.random.default_rng(6)
    X, Y = random_instance(rng, D=7, N=64, K=4)
    g = compute_grams(X, Y, rho=0.1)
    full = masked_di(g.kbar, g.kb, 0.1, np.ones(7))
    for j in range(7):
        mask = np.ones(7)
        mask[j] = 0.0
        expect = full - masked_di(g.kbar, g.kb, 0.1, mask)
        got = influence_exact(X, Y, rho=0.1, j=j)
        np.testing.assert_allclose(got, expect, rtol=1e-8, atol=1e-10)


def test_influence_exact_single_channel():
    rng = np.random.default_rng(8)
    X, Y = random_instance(rng, D=1, N=32, K=2)
    g = compute_grams(X, Y, rho=0.1)
    np.testing.assert_allclose(
        influence_exact(X, Y, rho=0.1, j=0), di(g), rtol=1e-12
    )


# -- derivative influence -------------------------------------------------------


def test_derivative_zero_signal():
    g = DiGrams(kbar=np.eye(4), kb=np.zeros((4, 4)), rho=0.1)
    np.testing.assert_allclose(influence_derivative(g).scores, 0.0, atol=1e-15)


def test_derivative_scalar_algebra():
    # D=1, kbar=[s], kb=[s^2]: phi = 2*rho*s^2/(s+rho)^2; s=1, rho=0.1.
    g = DiGrams(kbar=np.array([[1.0]]), kb=np.array([[1.0]]), rho=0.1)
    np.testing.assert_allclose(
        influence_derivative(g).scores, [0.2 / 1.21], rtol=1e-12
    )


def test_derivative_matches_finite_differences():
    rng = np.random.default_rng(10)
    X, Y = random_instance(rng, D=10, N=128, K=4)
    g = compute_grams(X, Y, rho=0.1)
    scores = influence_derivative(g).scores
    h = 1e-5
    for j in range(10):
        up = np.ones(10)
        up[j] += h
        dn = np.ones(10)
        dn[j] -= h
        fd = (masked_di(g.kbar, g.kb, 0.1, up) - masked_di(g.kbar, g.kb, 0.1, dn)) / (2 * h)
        assert abs(scores[j] - fd) <= max(1e-4 * abs(fd), 1e-8)


def test_permutation_equivariance():
    rng = np.random.default_rng(12)
    X, Y = random_instance(rng, D=6, N=48, K=3)
    perm = rng.permutation(6)
    g = compute_grams(X, Y, rho=0.1)
    gp = compute_grams(X[perm], Y, rho=0.1)
    np.testing.assert_allclose(
        influence_derivative(gp).scores,
        influence_derivative(g).scores[perm],
        rtol=1e-9,
    )
    for j in range(6):
        np.testing.assert_allclose(
            influence_exact(X[perm], Y, rho=0.1, j=j),
            influence_exact(X, Y, rho=0.1, j=int(np.where(perm == perm[j])[0])),
            rtol=1e-9,
        )


def test_nondecreasing_under_nesting():
    rng = np.random.default_rng(13)
    for _ in range(25):
        X, Y = random_instance(rng)
        D = X.shape[0]
        order = rng.permutation(D)
        prev = 0.0
        for size in range(1, D + 1):
            rows = np.sort(order[:size])
            g = compute_grams(X[rows], Y, rho=0.1)
            val = di(g)
            assert val >= prev - 1e-9
            prev = val


# -- wrapper types ---------------------------------------------------------------


def test_feature_matrix_validation():
    with pytest.raises(DegenerateInput):
        FeatureMatrix(values=np.ones((2, 1)))
    fm = FeatureMatrix(values=np.ones((2, 4)))
    assert fm.values.shape == (2, 4)


def test_label_matrix_from_labels():
    lm = LabelMatrix.from_labels(np.array([0, 2, 1, 2]), num_classes=3)
    np.testing.assert_array_equal(lm.values.sum(axis=0), 1.0)
    np.testing.assert_array_equal(lm.values[:, 1], [0, 0, 1])


def test_label_matrix_rejects_non_onehot():
    with pytest.raises(DegenerateInput):
        LabelMatrix(values=np.array([[0.5, 1.0], [0.5, 0.0]]))


def test_grams_accept_wrapper_types():
    X = np.array([[0.5, 0.5, -0.5, -0.5]])
    lm = LabelMatrix.from_labels(np.array([0, 0, 1, 1]), num_classes=2)
    g = compute_grams(FeatureMatrix(values=X), lm, rho=0.1)
    np.testing.assert_allclose(g.kb, [[2.0]], atol=1e-12)
