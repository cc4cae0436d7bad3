import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dprobfl.sketch import (
    CountSketch,
    SketchConfigError,
    TableSketch,
    distortion_scan,
    sketch_for_rate,
    spectral_norm_sq,
    splitmix64,
)
from dprobfl.tensor import make_rng
from oracles import dense_count_sketch, splitmix64_int


def test_splitmix_matches_integer_reference():
    xs = [0, 1, 2**63, 2**64 - 1, 123456789]
    assert [int(v) for v in splitmix64(np.array(xs, dtype=np.uint64))] == [splitmix64_int(x) for x in xs]


def test_configuration_errors():
    with pytest.raises(SketchConfigError):
        CountSketch(8, 5, 2, 0)
    with pytest.raises(SketchConfigError):
        CountSketch(8, 8, 2, 0)
    with pytest.raises(SketchConfigError):
        sketch_for_rate(10, 20, 2, 0)


def test_small_construction():
    sk = CountSketch(8, 4, 2, seed=3)
    assert sk.s == 2
    rows, signs = sk.tables()
    assert rows.shape == (2, 8) and set(np.unique(rows)) <= {0, 1}
    assert set(np.unique(signs)) <= {-1.0, 1.0}
    dense = sk.to_dense() * np.sqrt(2)
    for block in range(2):
        part = dense[2 * block : 2 * block + 2]
        assert np.all((part != 0).sum(axis=0) == 1)
        np.testing.assert_array_equal(part[rows[block], np.arange(8)], signs[block])


@pytest.mark.parametrize("seed", [0, 1, 2**62 + 5])
def test_matches_column_by_column_reference(seed):
    sk = CountSketch(30, 12, 3, seed)
    np.testing.assert_array_equal(sk.to_dense(), dense_count_sketch(30, 12, 3, seed))


def test_same_seed_same_matrix():
    a, b = CountSketch(500, 50, 5, 9), CountSketch(500, 50, 5, 9)
    v = make_rng(0).standard_normal((100, 500))
    assert np.array_equal(a.compress(v), b.compress(v))
    assert not np.array_equal(a.compress(v), CountSketch(500, 50, 5, 10).compress(v))


def test_operator_agrees_with_dense():
    sk = CountSketch(32, 8, 2, 4)
    dense = sk.to_dense()
    rng = make_rng(1)
    v, c = rng.standard_normal(32), rng.standard_normal(8)
    np.testing.assert_allclose(sk.compress(v), dense @ v, atol=1e-12)
    np.testing.assert_allclose(sk.decompress(c), dense.T @ c, atol=1e-12)
    np.testing.assert_allclose(sk.roundtrip(v), dense.T @ dense @ v, atol=1e-12)


def test_zero_and_basis_vectors():
    sk = CountSketch(100, 20, 4, 0)
    assert np.array_equal(sk.compress(np.zeros(100)), np.zeros(20))
    assert np.array_equal(sk.decompress(np.zeros(20)), np.zeros(100))
    for col in (0, 17, 99):
        out = sk.compress(np.eye(100)[col])
        assert np.count_nonzero(out) == 4
        np.testing.assert_allclose(np.abs(out[out != 0]), 0.5)
        assert np.sum(out**2) == pytest.approx(1.0, abs=1e-15)


def test_length_checks():
    sk = CountSketch(10, 4, 2, 0)
    with pytest.raises(ValueError):
        sk.compress(np.zeros(9))
    with pytest.raises(ValueError):
        sk.decompress(np.zeros(5))


@given(st.integers(0, 2**32), st.floats(-5, 5), st.floats(-5, 5))
def test_linearity(seed, a, b):
    sk = CountSketch(64, 16, 4, seed)
    rng = make_rng(seed)
    u, w = rng.standard_normal(64), rng.standard_normal(64)
    np.testing.assert_allclose(sk.compress(a * u + b * w), a * sk.compress(u) + b * sk.compress(w), atol=1e-10)


@given(st.integers(0, 2**32))
def test_adjoint_identity(seed):
    sk = CountSketch(200, 40, 4, seed)
    rng = make_rng(seed, 1)
    v, c = rng.standard_normal(200), rng.standard_normal(40)
    lhs, rhs = sk.compress(v) @ c, v @ sk.decompress(c)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)


def test_rate_rounding():
    sk = sketch_for_rate(650, 10, 10, 0)
    assert sk.k == 60
    assert sketch_for_rate(650, 50, 10, 0).k == 10


def test_power_iteration_matches_dense_eigensolve():
    for seed in range(10):
        sk = CountSketch(8, 4, 2, seed)
        exact = np.linalg.eigvalsh(sk.to_dense().T @ sk.to_dense())[-1]
        assert spectral_norm_sq(sk, 500, make_rng(seed)) == pytest.approx(exact, abs=1e-6)


def test_power_iteration_improves_with_iterations():
    sk = CountSketch(2000, 200, 4, 1)
    assert spectral_norm_sq(sk, 200, make_rng(0)) >= spectral_norm_sq(sk, 5, make_rng(0)) - 1e-9


def test_square_single_block_collision_bound():
    rows = np.array([[0, 0, 1, 2, 3, 3, 3, 4]])
    signs = np.ones((1, 8))
    sk = TableSketch(rows, signs)
    dense = sk.to_dense()
    exact = np.linalg.eigvalsh(dense @ dense.T)[-1]
    assert exact == pytest.approx(3.0)  # largest row collision count
    assert spectral_norm_sq(sk, 300, make_rng(0)) == pytest.approx(exact, abs=1e-6)


def test_distortion_scan_examples():
    sk = CountSketch(50, 10, 2, 0)
    same = np.tile(make_rng(0).standard_normal(50), (4, 1))
    assert distortion_scan(sk, same) == 0.0
    e1 = np.eye(50)[0]
    assert distortion_scan(sk, np.array([e1, -e1])) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        distortion_scan(sk, e1[None, :])


def test_distortion_matches_pairwise_definition():
    sk = CountSketch(300, 60, 6, 2)
    vs = make_rng(3).standard_normal((5, 300))
    worst = 0.0
    for i in range(5):
        for j in range(i + 1, 5):
            diff = vs[i] - vs[j]
            worst = max(worst, abs(np.linalg.norm(sk.to_dense() @ diff) / np.linalg.norm(diff) - 1))
    assert distortion_scan(sk, vs) == pytest.approx(worst, rel=1e-12)


def test_unbiased_norm_small_scale():
    v = make_rng(0).standard_normal(400)
    est = np.mean([np.sum(CountSketch(400, 40, 4, s).compress(v) ** 2) for s in range(2000)])
    assert est == pytest.approx(v @ v, rel=0.03)
