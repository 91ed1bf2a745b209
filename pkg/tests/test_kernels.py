"""Backend equivalence for the numba/numpy kernel pair."""

import numpy as np
import pytest

from codec_lm import _kernels


@pytest.fixture
def both_backends():
    original = _kernels.BACKEND
    yield
    _kernels.select_backend(original)


def _brute_nearest(frames, book):
    codes = np.empty(frames.shape[0], dtype=np.int64)
    for t in range(frames.shape[0]):
        d = ((book - frames[t]) ** 2).sum(axis=1)
        codes[t] = int(np.argmin(d))
    return codes


def test_backends_agree_on_random_data(both_backends, rng):
    frames = rng.normal(size=(257, 12))
    book = rng.normal(size=(33, 12))
    _kernels.select_backend("numpy")
    codes_np, resid_np = _kernels.nearest_codeword(frames, book)
    _kernels.select_backend("numba")
    codes_nb, resid_nb = _kernels.nearest_codeword(frames, book)
    np.testing.assert_array_equal(codes_np, codes_nb)
    np.testing.assert_allclose(resid_np, resid_nb, atol=1e-12)
    np.testing.assert_array_equal(codes_np, _brute_nearest(frames, book))


def test_smallest_index_tie_break(both_backends):
    frames = np.array([[1.0, 0.0]])
    book = np.array([[1.0, 0.5], [1.0, -0.5], [9.0, 9.0]])  # rows 0/1 equidistant
    for backend in ("numpy", "numba"):
        _kernels.select_backend(backend)
        codes, _ = _kernels.nearest_codeword(frames, book)
        assert codes[0] == 0


def test_exact_match_gives_zero_residual(both_backends, rng):
    book = rng.normal(size=(9, 5))
    frames = book[[4, 7]].copy()
    for backend in ("numpy", "numba"):
        _kernels.select_backend(backend)
        codes, resid = _kernels.nearest_codeword(frames, book)
        np.testing.assert_array_equal(codes, [4, 7])
        np.testing.assert_array_equal(resid, np.zeros((2, 5)))


def test_cluster_accumulate_matches_bincount(both_backends, rng):
    frames = rng.normal(size=(100, 4))
    codes = rng.integers(0, 7, size=100)
    expected_counts = np.bincount(codes, minlength=7)
    for backend in ("numpy", "numba"):
        _kernels.select_backend(backend)
        sums, counts = _kernels.cluster_accumulate(frames, codes, 7)
        np.testing.assert_array_equal(counts, expected_counts)
        for c in range(7):
            np.testing.assert_allclose(sums[c], frames[codes == c].sum(axis=0), atol=1e-12)


def test_shape_mismatch_rejected(both_backends):
    with pytest.raises(ValueError):
        _kernels.nearest_codeword(np.zeros((3, 4)), np.zeros((5, 6)))


def test_backend_selection_env_names():
    assert _kernels._resolve("auto") in ("numba", "numpy")
    with pytest.raises(ValueError):
        _kernels._resolve("gpu")
