import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flgap import numerics as nm


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nm.matmul(np.eye(2), a), a)
    assert np.array_equal(nm.matmul(a, [[0, 1], [1, 0]]), [[2, 1], [4, 3]])
    assert np.array_equal(nm.matmul(np.zeros((3, 2)), a), np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(nm.NumericsError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(st.integers(0, 2**32))
@settings(max_examples=20, deadline=None)
def test_matmul_associative(seed):
    rng = nm.make_rng(seed)
    a, b, c = (rng.standard_normal((5, 5)) for _ in range(3))
    left = nm.matmul(nm.matmul(a, b), c)
    right = nm.matmul(a, nm.matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-6 * np.linalg.norm(left)


def test_sym_eig_examples():
    s = nm.sym_eig(np.diag([2.0, 5.0]))
    assert np.array_equal(s.eigenvalues, [5.0, 2.0])
    s = nm.sym_eig([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(s.eigenvalues, [1.0, -1.0], atol=1e-15)
    v = s.eigenvectors * np.sign(s.eigenvectors[0])
    np.testing.assert_allclose(v, np.array([[1, 1], [1, -1]]) / np.sqrt(2), atol=1e-12)
    assert np.allclose(nm.sym_eig(np.eye(4)).eigenvalues, 1.0)


@pytest.mark.parametrize("n", [1, 7, 50, 200])
def test_sym_eig_reconstruction(n):
    rng = nm.make_rng(n)
    a = rng.standard_normal((n, n))
    a = a + a.T
    s = nm.sym_eig(a)
    assert len(s) == n
    assert np.all(np.diff(s.eigenvalues) <= 0)
    V = s.eigenvectors
    assert np.abs(V.T @ V - np.eye(n)).max() < 1e-8
    rec = V @ np.diag(s.eigenvalues) @ V.T
    assert np.linalg.norm(a - rec) <= 1e-6 * np.linalg.norm(a)


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(nm.NumericsError):
        nm.sym_eig([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(nm.NumericsError):
        nm.sym_eig(np.ones((2, 3)))


def test_solve_spd_examples():
    b = np.array([[1.0], [-2.0], [3.0]])
    assert np.allclose(nm.solve_spd(np.eye(3), b), b)
    assert np.allclose(nm.solve_spd([[2.0]], [[4.0]]), [[2.0]])
    np.testing.assert_allclose(nm.solve_spd([[2.0, 1.0], [1.0, 2.0]], [1.0, 1.0]), [1 / 3, 1 / 3],
                               rtol=1e-14)


def test_solve_spd_residual_and_ridge():
    rng = nm.make_rng(3)
    g = rng.standard_normal((40, 40))
    k = g @ g.T + 1e-3 * np.eye(40)
    y = rng.standard_normal((40, 2))
    for ridge in (0.0, 0.5):
        x = nm.solve_spd(k, y, ridge)
        r = (k + ridge * np.eye(40)) @ x - y
        assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(y)


def test_solve_spd_errors():
    with pytest.raises(nm.NumericsError):
        nm.solve_spd([[1.0, 0.0], [0.0, -1.0]], [1.0, 1.0])
    with pytest.raises(nm.NumericsError):
        nm.solve_spd(np.eye(2), np.ones(3))
    with pytest.raises(nm.NumericsError):
        nm.solve_spd(np.eye(2), np.ones(2), ridge=-1.0)


def test_qr_orthonormal():
    assert np.allclose(np.abs(nm.qr_orthonormal(np.eye(3))), np.eye(3))
    q = nm.qr_orthonormal([[2.0, 0.0], [0.0, 3.0]])
    assert np.allclose(np.abs(q), np.eye(2))
    g = nm.make_rng(0).standard_normal((20, 3))
    q = nm.qr_orthonormal(g)
    assert np.abs(q.T @ q - np.eye(3)).max() < 1e-8
    # same column span: projecting g onto span(q) leaves it unchanged
    assert np.allclose(q @ (q.T @ g), g)


def test_qr_rank_deficient():
    with pytest.raises(nm.NumericsError):
        nm.qr_orthonormal([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])


def test_gaussian_statistics_and_determinism():
    assert np.array_equal(nm.gaussian(nm.make_rng(1), 3, 4, 0.0), np.zeros((3, 4)))
    x = nm.gaussian(nm.make_rng(7), 100_000, 1, 1.0).ravel()
    n = x.size
    # standard error of the sample variance of a normal is sqrt(2/(n-1))
    assert abs(x.var(ddof=1) - 1.0) < 3 * np.sqrt(2.0 / (n - 1))
    assert np.array_equal(nm.gaussian(nm.make_rng(5), 4, 4, 2.0), nm.gaussian(nm.make_rng(5), 4, 4, 2.0))
    with pytest.raises(nm.NumericsError):
        nm.gaussian(nm.make_rng(5), 1, 1, -1.0)


def test_rng_streams():
    a = nm.make_rng(11).standard_normal(8)
    b = nm.make_rng(11).standard_normal(8)
    c = nm.make_rng(12).standard_normal(8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert nm.child_seed(1, 2) == nm.child_seed(1, 2)
    assert len({nm.child_seed(1, k) for k in range(50)}) == 50


def test_rng_frozen_values():
    # pins the generator so a silent algorithm change is caught
    assert nm.RNG_ALGORITHM == "philox4x64-10"
    v = nm.make_rng(0).integers(0, 2**32, size=3)
    w = np.random.Generator(np.random.Philox(0)).integers(0, 2**32, size=3)
    assert np.array_equal(v, w)


def test_matrix_binary_roundtrip(tmp_path):
    a = nm.make_rng(2).standard_normal((5, 3))
    p = tmp_path / "a.bin"
    nm.write_matrix(p, a)
    raw = p.read_bytes()
    assert raw[:4] == b"FLGM"
    assert int.from_bytes(raw[4:8], "little") == 5 and int.from_bytes(raw[8:12], "little") == 3
    assert len(raw) == 12 + 8 * 15
    assert np.array_equal(nm.read_matrix(p), a)
    nm.write_matrix(p, np.arange(4.0))
    assert nm.read_matrix(p).shape == (1, 4)


def test_matrix_binary_corrupt(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(nm.NumericsError):
        nm.read_matrix(p)
    nm.write_matrix(p, np.ones((2, 2)))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(nm.NumericsError):
        nm.read_matrix(p)


def test_matrix_csv_roundtrip(tmp_path):
    a = nm.make_rng(9).standard_normal((4, 3))
    nm.write_matrix_csv(tmp_path / "a.csv", a)
    assert np.array_equal(nm.read_matrix_csv(tmp_path / "a.csv"), a)


def test_as_matrix():
    assert nm.as_matrix([1.0, 2.0]).shape == (2, 1)
    with pytest.raises(nm.NumericsError):
        nm.as_matrix([np.nan])
    with pytest.raises(nm.NumericsError):
        nm.as_matrix(np.ones((2, 2, 2)))
