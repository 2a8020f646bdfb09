import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from whathow import hmm
from oracles import enumerate_hmm, gauss_logpdf


def _instance(rng, T, Z, X, D=2):
    means = rng.normal(size=(Z, X, D))
    q = rng.normal(size=(T, D))
    pi = rng.dirichlet(np.ones(Z))
    A = rng.dirichlet(np.ones(Z), size=Z)
    px = np.full(X, 1 / X)
    return q, means, pi, A, px


def test_logsumexp_matches_naive_and_survives_large_values():
    a = np.array([[1.0, 2.0, -3.0], [0.5, -np.inf, 4.0]])
    np.testing.assert_allclose(hmm.logsumexp(a, axis=1), np.log(np.exp(a).sum(axis=1)), rtol=1e-14)
    assert hmm.logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000 + math.log(2))
    assert hmm.logsumexp(np.array([-np.inf, -np.inf])) == -np.inf


def test_log_gauss_against_direct_formula():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(4, 3))
    means = rng.normal(size=(2, 3, 3))
    out = hmm.log_gauss(q, means, 0.7)
    for t in range(4):
        for z in range(2):
            for x in range(3):
                assert out[t, z, x] == pytest.approx(gauss_logpdf(q[t], means[z, x], 0.7), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 6), Z=st.integers(1, 3), X=st.integers(1, 2))
def test_smooth_matches_enumeration(seed, T, Z, X):
    rng = np.random.default_rng(seed)
    q, means, pi, A, px = _instance(rng, T, Z, X)
    sigma = rng.uniform(0.5, 2.0)
    le = hmm.log_gauss(q, means, sigma)
    with np.errstate(divide="ignore"):
        gamma, xi, ll = hmm.smooth(le, np.log(pi), np.log(A), np.log(px))
    ref_ll, ref_g, ref_xi = enumerate_hmm(q, means, sigma, pi, A, px)
    assert abs(ll - ref_ll) < 1e-9
    np.testing.assert_allclose(gamma, ref_g, atol=1e-9, rtol=0)
    np.testing.assert_allclose(xi, ref_xi, atol=1e-9, rtol=0)


def test_filter_batched_equals_unbatched():
    rng = np.random.default_rng(1)
    qs = rng.normal(size=(3, 5, 2))
    _, means, pi, A, px = _instance(rng, 5, 3, 2)
    le = hmm.log_gauss(qs, means, 1.0)
    batched = hmm.filter_z(le, np.log(pi), np.log(A), np.log(px))
    for b in range(3):
        np.testing.assert_allclose(batched[b], hmm.filter_z(le[b], np.log(pi), np.log(A), np.log(px)), atol=1e-14)
    np.testing.assert_allclose(batched.sum(axis=-1), 1.0, atol=1e-12)


def test_zero_likelihood_names_step_and_task():
    le = np.zeros((4, 2, 1))
    le[2, :, :] = -np.inf
    with pytest.raises(hmm.InferenceError) as err:
        hmm.forward(le, np.log([0.5, 0.5]), np.log(np.full((2, 2), 0.5)), np.zeros(1), c=3)
    assert (err.value.t, err.value.c) == (2, 3)
    assert "t=2" in str(err.value) and "c=3" in str(err.value)
