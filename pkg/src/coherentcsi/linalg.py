"""Small dense Hermitian kernels.

The eigensolver is a cyclic Jacobi method vectorised over a stack of
matrices, so a whole window of per-subcarrier covariances (52 matrices of
size 8x8, say) is diagonalised in one call.  Rotations are applied in the
round-robin (tournament) ordering, which lets the M/2 disjoint pivot pairs of
one step be processed together.
"""

from __future__ import annotations

import numpy as np

HERMITIAN_RTOL = 1e-12
PHASE_REF_THRESHOLD = 1e-8


class NotHermitianError(ValueError):
    """Input matrix deviates from its conjugate transpose beyond tolerance."""


def hermitian_defect(a: np.ndarray) -> np.ndarray:
    """Relative Frobenius distance between ``a`` and ``a^H`` per matrix."""
    a = np.asarray(a)
    diff = np.linalg.norm(a - np.conj(np.swapaxes(a, -1, -2)), axis=(-2, -1))
    scale = np.linalg.norm(a, axis=(-2, -1))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), diff)
    return rel


def check_hermitian(a: np.ndarray, rtol: float = HERMITIAN_RTOL) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    defect = hermitian_defect(a)
    if np.any(defect > rtol):
        raise NotHermitianError(
            f"matrix is not Hermitian (relative defect {float(np.max(defect)):.3g} > {rtol:g})"
        )
    return a


def _round_robin(m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method; a dummy player pads odd sizes
    players = list(range(m)) + ([-1] if m % 2 else [])
    n = len(players)
    steps = []
    for _ in range(n - 1):
        pairs = [(players[i], players[n - 1 - i]) for i in range(n // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            steps.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return steps


_SCHEDULES: dict[int, list] = {}


def _schedule(m: int):
    if m not in _SCHEDULES:
        _SCHEDULES[m] = _round_robin(m)
    return _SCHEDULES[m]


def normalize_phase(vectors: np.ndarray, threshold: float = PHASE_REF_THRESHOLD) -> np.ndarray:
    """Rotate each column so its first non-negligible entry is real and positive.

    ``vectors`` has shape (..., M, K); the convention is applied to each of the
    K columns independently.  Columns with no entry above ``threshold`` are
    left untouched.
    """
    v = np.array(vectors, dtype=np.complex128, copy=True)
    mag = np.abs(v)
    above = mag > threshold
    first = np.argmax(above, axis=-2)
    anchor = np.take_along_axis(v, first[..., None, :], axis=-2)
    anchor_mag = np.abs(anchor)
    rot = np.where(anchor_mag > threshold, np.conj(anchor) / np.where(anchor_mag > 0, anchor_mag, 1.0), 1.0)
    v *= rot
    # make the anchor exactly real so the convention is bit-stable
    np.put_along_axis(v, first[..., None, :], np.abs(np.take_along_axis(v, first[..., None, :], axis=-2)) + 0j, axis=-2)
    return v


def hermitian_eigh(a: np.ndarray, *, tol: float = 1e-15, max_sweeps: int = 50, check: bool = True):
    """Eigendecomposition of one Hermitian matrix or a stack of them.

    Parameters
    ----------
    a : array_like, shape (..., M, M)
        Hermitian matrices.
    tol : float
        Sweeps stop once the off-diagonal Frobenius norm drops below
        ``tol * ||A||_F`` for every matrix in the stack.

    Returns
    -------
    eigenvalues : ndarray, shape (..., M)
        Real, sorted in descending order.
    eigenvectors : ndarray, shape (..., M, M)
        Unit-norm columns; column ``k`` pairs with ``eigenvalues[..., k]``.
        Each column's first entry above 1e-8 in magnitude is real-positive.
    """
    a = np.asarray(a, dtype=np.complex128)
    if check:
        check_hermitian(a)
    batch_shape = a.shape[:-2]
    m = a.shape[-1]
    work = a.reshape((-1, m, m)).copy()
    work = 0.5 * (work + np.conj(np.swapaxes(work, -1, -2)))
    b = work.shape[0]
    vecs = np.broadcast_to(np.eye(m, dtype=np.complex128), (b, m, m)).copy()
    fro = np.linalg.norm(work, axis=(-2, -1))
    limit = (tol * fro) ** 2
    # off-diagonals this small move eigenvalues far below rounding; rotating
    # on them only risks overflow in the angle computation
    negligible = (np.finfo(float).eps * 1e-10 * fro)[:, None]
    offmask = ~np.eye(m, dtype=bool)
    rot = np.broadcast_to(np.eye(m, dtype=np.complex128), (b, m, m)).copy()

    for _ in range(max_sweeps):
        off = np.sum(np.abs(work[:, offmask]) ** 2, axis=-1)
        if np.all(off <= limit):
            break
        for p, q in _schedule(m):
            bpq = work[:, p, q]
            absb = np.abs(bpq)
            active = absb > negligible
            safe = np.where(active, absb, 1.0)
            app = work[:, p, p].real
            aqq = work[:, q, q].real
            theta = (aqq - app) / (2.0 * safe)
            with np.errstate(over="ignore"):
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            e = np.where(active, bpq / safe, 1.0)  # e^{j alpha}
            ec = np.conj(e)
            rot[:, p, p] = c
            rot[:, p, q] = s
            rot[:, q, p] = -s * ec
            rot[:, q, q] = c * ec
            work = np.conj(np.swapaxes(rot, -1, -2)) @ work @ rot
            vecs = vecs @ rot
            work[:, p, q] = 0.0
            work[:, q, p] = 0.0
            rot[:, p, p] = 1.0
            rot[:, q, q] = 1.0
            rot[:, p, q] = 0.0
            rot[:, q, p] = 0.0
    else:
        off = np.sum(np.abs(work[:, offmask]) ** 2, axis=-1)
        if np.any(off > limit * 1e6):
            raise np.linalg.LinAlgError("Jacobi iteration did not converge")

    evals = np.real(np.diagonal(work, axis1=-2, axis2=-1)).copy()
    order = np.argsort(-evals, axis=-1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=-1)
    vecs = np.take_along_axis(vecs, order[:, None, :], axis=-1)
    # re-normalise against accumulated rounding before fixing phases
    vecs /= np.linalg.norm(vecs, axis=-2, keepdims=True)
    vecs = normalize_phase(vecs)
    return evals.reshape(batch_shape + (m,)), vecs.reshape(batch_shape + (m, m))


def outer(h: np.ndarray) -> np.ndarray:
    """h h^H for a vector or a stack of vectors (..., M)."""
    h = np.asarray(h)
    return h[..., :, None] * np.conj(h[..., None, :])
