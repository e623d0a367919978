import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flgap import superposition as sp
from flgap.numerics import make_rng

from tests.helpers import random_state


def test_orthogonal_features_have_unit_dimension():
    W = np.diag([1.0, -3.0, 0.5])
    assert np.array_equal(sp.feature_dimensionality(W), [1.0, 1.0, 1.0])
    Q, _ = np.linalg.qr(make_rng(0).standard_normal((6, 6)))
    np.testing.assert_allclose(sp.feature_dimensionality(Q), 1.0, rtol=1e-12)


def test_duplicate_pair_gives_half_exactly():
    W = np.array([[2.0, 2.0, 0.0], [0.0, 0.0, 5.0]])  # columns 0 and 1 identical
    assert np.array_equal(sp.feature_dimensionality(W), [0.5, 0.5, 1.0])
    assert np.array_equal(sp.sample_dimensionality(W.T), [0.5, 0.5, 1.0])


def test_zero_vectors_and_bounds():
    W = np.array([[1.0, 0.0, 1.0], [1.0, 0.0, -2.0]])
    d = sp.feature_dimensionality(W)
    assert d[1] == 0.0
    assert np.all((d[[0, 2]] > 0) & (d[[0, 2]] <= 1))
    with pytest.raises(ValueError):
        sp.feature_dimensionality(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        sp.feature_dimensionality(np.ones((2, 2)), axis="diagonal")


def test_single_vector():
    assert sp.dimensionality([[3.0, 4.0]])[0] == 1.0


def test_rows_axis():
    W = make_rng(1).standard_normal((4, 7))
    assert np.array_equal(sp.feature_dimensionality(W, "rows"), sp.dimensionality(W))
    assert np.array_equal(sp.feature_dimensionality(W, "columns"), sp.dimensionality(W.T))


def test_matches_defining_formula():
    V = make_rng(2).standard_normal((9, 5))
    ref = []
    for i in range(9):
        u = V[i] / np.linalg.norm(V[i])
        ref.append(V[i] @ V[i] / np.sum((V @ u) ** 2))
    np.testing.assert_allclose(sp.dimensionality(V), ref, rtol=1e-12)


@given(st.integers(0, 2**31), st.sampled_from([0.5, 2.0, -4.0, 2.0 ** -8]))
@settings(max_examples=40, deadline=None)
def test_scale_invariance_exact(seed, c):
    W = make_rng(seed).standard_normal((5, 8))
    assert np.array_equal(sp.feature_dimensionality(c * W), sp.feature_dimensionality(W))


@given(st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_permutation_equivariance_and_range(seed):
    rng = make_rng(seed)
    W = rng.standard_normal((6, 10))
    perm = rng.permutation(10)
    d = sp.feature_dimensionality(W)
    np.testing.assert_allclose(sp.feature_dimensionality(W[:, perm]), d[perm], rtol=1e-13)
    assert np.all((d > 0) & (d <= 1 + 1e-15))


def test_histogram_examples():
    edges, counts = sp.dim_histogram(np.ones(7), 10)
    assert counts[-1] == 7 and counts.sum() == 7
    edges, counts = sp.dim_histogram([0.05, 0.55, 0.95], 10)
    assert list(np.nonzero(counts)[0] + 1) == [1, 6, 10]
    assert np.allclose(edges, np.linspace(0, 1, 11))
    vals = make_rng(3).uniform(size=123)
    assert sp.dim_histogram(vals, 7)[1].sum() == 123
    with pytest.raises(ValueError):
        sp.dim_histogram(vals, 0)


def test_zero_fraction_examples():
    assert sp.zero_fraction(np.zeros(5)) == 1.0
    assert sp.zero_fraction([0.5, 0.9], tol=0.01) == 0.0
    assert sp.zero_fraction([0.0, 0.001, 0.5], tol=0.01) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        sp.zero_fraction([0.1], tol=-1.0)


def test_layer_report_and_exports(tmp_path):
    s = random_state((5, 8, 8, 1), seed=4)
    X = make_rng(5).standard_normal((12, 5))
    reps = [sp.layer_report(s, X, l, n_bins=5) for l in (1, 2)]
    assert reps[0].feature_dims.shape == (5,) and reps[1].feature_dims.shape == (8,)
    assert reps[0].sample_dims.shape == (12,)
    assert 0.0 <= reps[0].zero_fraction <= 1.0 and reps[0].tol == 1e-3
    with pytest.raises(ValueError):
        sp.layer_report(s, X, 3)
    sp.write_dims_csv(tmp_path / "dims.csv", reps)
    sp.write_hist_csv(tmp_path / "hist.csv", reps)
    lines = (tmp_path / "dims.csv").read_text().splitlines()
    assert lines[0] == "layer,index,kind,D" and len(lines) == 1 + 5 + 12 + 8 + 12
    h = (tmp_path / "hist.csv").read_text().splitlines()
    assert h[0] == "layer,bin_lo,bin_hi,count" and len(h) == 1 + 10
