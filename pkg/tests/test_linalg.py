import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coherentcsi.estimator import eigh
from coherentcsi.linalg import NotHermitianError, check_hermitian, hermitian_eigh, normalize_phase, outer

from _util import charpoly, random_hermitian


def _first_significant(v, thr=1e-8):
    return v[np.flatnonzero(np.abs(v) > thr)[0]]


def test_identity_2x2():
    w, v = hermitian_eigh(np.eye(2, dtype=complex))
    np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(v.conj().T @ v, np.eye(2), atol=1e-14)
    for k in range(2):
        z = _first_significant(v[:, k])
        assert z.imag == 0 and z.real > 0


def test_rank_one_outer_product():
    h = np.array([1, 1j])
    w, v = hermitian_eigh(np.outer(h, h.conj()))
    np.testing.assert_allclose(w, [2.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(v[:, 0], h / np.sqrt(2), atol=1e-14)


def test_random_4x4_reconstruction_and_charpoly():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = random_hermitian(rng, 4)
        w, v = hermitian_eigh(a)
        recon = (v * w) @ v.conj().T
        assert np.linalg.norm(recon - a) <= 1e-9
        # independent route: roots of the characteristic polynomial
        roots = np.sort(np.roots(charpoly(a)).real)[::-1]
        np.testing.assert_allclose(w, roots, atol=1e-8)


def test_small_charpoly_oracle_m2_m3():
    rng = np.random.default_rng(2)
    for m in (1, 2, 3):
        a = random_hermitian(rng, m)
        w, _ = hermitian_eigh(a)
        roots = np.sort(np.roots(charpoly(a)).real)[::-1]
        np.testing.assert_allclose(w, roots, atol=1e-9)


def test_non_hermitian_rejected():
    a = np.array([[1, 2], [3, 4]], dtype=complex)
    with pytest.raises(NotHermitianError):
        hermitian_eigh(a)
    with pytest.raises(NotHermitianError):
        check_hermitian(np.array([[1, 1j], [1j, 1]]))


def test_within_tolerance_accepted():
    a = np.array([[2, 1 + 1j], [1 - 1j, 3]], dtype=complex)
    a[0, 1] *= 1 + 1e-14
    hermitian_eigh(a)


def test_batched_equals_loop():
    rng = np.random.default_rng(3)
    batch = np.stack([random_hermitian(rng, 8) for _ in range(10)])
    w, v = hermitian_eigh(batch)
    for k in range(10):
        wk, vk = hermitian_eigh(batch[k])
        np.testing.assert_allclose(w[k], wk, atol=1e-12)
        np.testing.assert_allclose(v[k], vk, atol=1e-10)


def test_deterministic_bits():
    rng = np.random.default_rng(4)
    a = random_hermitian(rng, 8)
    w1, v1 = hermitian_eigh(a)
    w2, v2 = hermitian_eigh(a.copy())
    assert np.array_equal(w1, w2) and np.array_equal(v1, v2)


def test_jacobi_agrees_with_lapack():
    rng = np.random.default_rng(5)
    a = np.stack([random_hermitian(rng, 8) for _ in range(52)])
    wj, vj = eigh(a, "jacobi")
    wl, vl = eigh(a, "lapack")
    np.testing.assert_allclose(wj, wl, atol=1e-11)
    # generic spectra: eigenvectors agree once both use the phase convention
    np.testing.assert_allclose(vj, vl, atol=1e-9)


def test_repeated_eigenvalues_orthonormal():
    rng = np.random.default_rng(6)
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6)))
    a = (q * np.array([3, 3, 3, 1, 1, 0.0])) @ q.conj().T
    a = (a + a.conj().T) / 2
    w, v = hermitian_eigh(a)
    np.testing.assert_allclose(w, [3, 3, 3, 1, 1, 0], atol=1e-12)
    np.testing.assert_allclose(v.conj().T @ v, np.eye(6), atol=1e-12)


def test_normalize_phase_skips_tiny_leading_entries():
    v = np.array([[1e-12], [1j]])
    out = normalize_phase(v)
    assert out[1, 0] == pytest.approx(1.0)


def test_outer_shapes():
    h = np.arange(6).reshape(2, 3) + 1j
    assert outer(h).shape == (2, 3, 3)
    np.testing.assert_allclose(outer(h[0]), np.outer(h[0], h[0].conj()))


@st.composite
def hermitian_matrices(draw):
    m = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**32 - 1))
    scale = draw(st.sampled_from([1e-6, 1.0, 1e3]))
    return random_hermitian(np.random.default_rng(seed), m, scale)


@given(hermitian_matrices())
def test_eigendecomposition_contract(a):
    w, v = hermitian_eigh(a)
    m = a.shape[0]
    fro = max(np.linalg.norm(a), 1e-300)
    assert np.all(np.isreal(w))
    assert np.all(np.diff(w) <= 1e-12 * fro)
    assert abs(np.sum(w) - np.trace(a).real) <= 1e-9 * fro
    np.testing.assert_allclose(np.linalg.norm(v, axis=0), 1.0, atol=1e-9)
    assert np.max(np.abs(v.conj().T @ v - np.eye(m))) <= 1e-9
    for k in range(m):
        assert np.linalg.norm(a @ v[:, k] - w[k] * v[:, k]) <= 1e-9 * fro
        z = _first_significant(v[:, k])
        assert z.imag == 0 and z.real > 0


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_psd_inputs_have_nonnegative_eigenvalues(m, rank, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, rank)) + 1j * rng.standard_normal((m, rank))
    a = x @ x.conj().T
    w, _ = hermitian_eigh(a)
    assert np.all(w >= -1e-9 * np.linalg.norm(a))


def test_jacobi_tiny_off_diagonals_stay_finite():
    # near-real rank-1 matrix whose imaginary parts sit close to the denormal range
    h = 1 + 1j * np.array([3.4, 1.1, -1.1, -3.4, 3.4, 1.1, -1.1, -3.4]) * 1e-159
    w, v = hermitian_eigh(np.outer(h, h.conj()))
    assert np.all(np.isfinite(w)) and np.all(np.isfinite(v))
    assert w[0] == pytest.approx(8.0)
