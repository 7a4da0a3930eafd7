"""Channel-vector estimation from incomplete, phase-scrambled CSI.

Each frame's CSI is ``r = h exp(j phi) + n`` with an unknown per-frame
transmitter phase ``phi``.  The phase drops out of ``r r^H``, so the
covariance is accumulated first, pairwise over whichever receivers delivered
the frame::

    C_ij = 1/|T_ij| * sum_{t in T_ij} r_i[t] conj(r_j[t])

and the channel is recovered as the best rank-1 fit of ``C - sigma^2 I`` in
Frobenius norm, i.e. the principal eigenvector scaled to
``sqrt(lambda_1 - sigma^2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import check_hermitian, hermitian_eigh

OK = "ok"
RANK_DEFICIENT = "rank-deficient"
INSUFFICIENT_PAIRS = "insufficient-pairs"

TIE_RTOL = 1e-9


class InsufficientPairsError(ValueError):
    """Some antenna pair never appeared together in the window."""


def eigh(a, method: str = "jacobi"):
    """Hermitian eigendecomposition, descending, with the unit phase convention.

    ``method="jacobi"`` uses the in-house Jacobi solver; ``"lapack"`` hands
    the diagonalisation to ``numpy.linalg.eigh`` and then applies the same
    ordering and phase convention.
    """
    if method == "jacobi":
        return hermitian_eigh(a)
    if method == "lapack":
        from .linalg import normalize_phase

        a = check_hermitian(np.asarray(a, dtype=np.complex128))
        w, v = np.linalg.eigh(a)
        return w[..., ::-1].copy(), normalize_phase(v[..., ::-1])
    raise ValueError(f"unknown eigen method {method!r}")


_QUARTER_TURNS = np.array([1, -1j, -1, 1j])


def quadrant_canonical(r: np.ndarray) -> np.ndarray:
    """Rotate each frame of ``r`` (T, M, N) by a multiple of 90 degrees.

    The rotation puts the frame's largest coefficient (first one on ties)
    into the sector ``re > 0, im >= 0``.  Multiplying by a power of ``j`` is
    exact in floating point, so a frame and any ``j**k`` multiple of it map
    to the same values.  ``r r^H`` is unchanged, but the accumulated
    covariance becomes bitwise independent of such per-frame phase flips.
    """
    r = np.asarray(r, dtype=np.complex128)
    t = r.shape[0]
    flat = r.reshape(t, -1)
    k = np.argmax(flat.real * flat.real + flat.imag * flat.imag, axis=1)
    z = flat[np.arange(t), k]
    a, b = z.real, z.imag
    quad = np.select([(a > 0) & (b >= 0), (a <= 0) & (b > 0), (a < 0) & (b <= 0)], [0, 1, 2], 3)
    return r * _QUARTER_TURNS[quad][:, None, None]


class CovarianceAccumulator:
    """Running pairwise sums for the incomplete-data sample covariance.

    ``sums[n]`` is the M x M matrix ``S_n`` of summed products for subcarrier
    ``n``; ``pairs`` holds the pair counts ``|T_ij|``.  A report always
    carries every subcarrier, so the counts are shared by all subcarriers
    (``pair_counts`` broadcasts them per subcarrier).
    """

    def __init__(self, n_antennas: int, n_subcarriers: int):
        self.n_antennas = n_antennas
        self.n_subcarriers = n_subcarriers
        self.sums = np.zeros((n_subcarriers, n_antennas, n_antennas), dtype=np.complex128)
        self.pairs = np.zeros((n_antennas, n_antennas), dtype=np.int64)
        self.n_frames = 0

    @property
    def antenna_counts(self) -> np.ndarray:
        return np.diagonal(self.pairs).copy()

    @property
    def pair_counts(self) -> np.ndarray:
        return np.broadcast_to(self.pairs, self.sums.shape)

    def copy(self) -> "CovarianceAccumulator":
        new = CovarianceAccumulator(self.n_antennas, self.n_subcarriers)
        new.sums = self.sums.copy()
        new.pairs = self.pairs.copy()
        new.n_frames = self.n_frames
        return new

    def add(self, coefficients: np.ndarray, present: np.ndarray) -> "CovarianceAccumulator":
        """Add one frame: ``coefficients`` (M, N), ``present`` (M,) bool."""
        r = np.asarray(coefficients)
        present = np.asarray(present, dtype=bool)
        if r.shape != (self.n_antennas, self.n_subcarriers) or present.shape != (self.n_antennas,):
            raise ValueError(
                f"expected coefficients {(self.n_antennas, self.n_subcarriers)} and mask "
                f"({self.n_antennas},), got {r.shape} and {present.shape}"
            )
        idx = np.flatnonzero(present)
        if idx.size == 0:
            return self
        sub = quadrant_canonical(r[idx].astype(np.complex128)[None])[0]  # (k, N)
        block = sub.T[:, :, None] * np.conj(sub.T[:, None, :])  # (N, k, k)
        self.sums[:, idx[:, None], idx[None, :]] += block
        self.pairs[idx[:, None], idx[None, :]] += 1
        self.n_frames += 1
        return self

    def add_batch(self, coefficients: np.ndarray, present: np.ndarray) -> "CovarianceAccumulator":
        """Add T frames at once: ``coefficients`` (T, M, N), ``present`` (T, M)."""
        r = np.asarray(coefficients, dtype=np.complex128)
        present = np.asarray(present, dtype=bool)
        if r.ndim != 3 or r.shape[1:] != (self.n_antennas, self.n_subcarriers) or present.shape != r.shape[:2]:
            raise ValueError(f"bad batch shapes {r.shape} / {present.shape}")
        r = quadrant_canonical(np.where(present[:, :, None], r, 0))
        rn = np.ascontiguousarray(r.transpose(2, 1, 0))  # (N, M, T)
        self.sums += rn @ np.conj(rn.transpose(0, 2, 1))
        p = present.astype(np.int64)
        self.pairs += p.T @ p
        self.n_frames += r.shape[0]
        return self


def accumulate(acc: CovarianceAccumulator, cluster) -> CovarianceAccumulator:
    """Add one :class:`~coherentcsi.ingest.FrameCluster` to ``acc``."""
    m, n = acc.n_antennas, acc.n_subcarriers
    r = np.zeros((m, n), dtype=np.complex128)
    present = np.zeros(m, dtype=bool)
    for rx, rep in cluster.reports.items():
        if rep.coefficients.shape != (n,):
            raise ValueError(f"report has {rep.coefficients.shape[0]} subcarriers, accumulator expects {n}")
        if not 0 <= rx < m:
            raise ValueError(f"receiver id {rx} outside array of {m}")
        r[rx] = rep.coefficients
        present[rx] = True
    return acc.add(r, present)


def finalize_covariance(acc: CovarianceAccumulator) -> np.ndarray:
    """Entrywise ``S_ij / |T_ij|`` per subcarrier; zero where ``|T_ij| = 0``.

    The result is exactly Hermitian.  Check :func:`has_insufficient_pairs`
    for the zero-filled case.
    """
    t = acc.pairs
    safe = np.where(t > 0, t, 1)
    c = np.where(t > 0, acc.sums / safe, 0)
    # mirror the upper triangle so Hermitian symmetry is exact
    iu = np.triu_indices(acc.n_antennas, 1)
    c[:, iu[1], iu[0]] = np.conj(c[:, iu[0], iu[1]])
    d = np.arange(acc.n_antennas)
    c[:, d, d] = c[:, d, d].real
    return c


def has_insufficient_pairs(acc: CovarianceAccumulator) -> bool:
    return bool(np.any(acc.pairs == 0))


@dataclass
class ChannelEstimate:
    """Per-subcarrier channel vectors with their quality metadata.

    ``h`` has shape (N, M).  ``flags[n]`` is ``"ok"``, ``"rank-deficient"``
    or ``"insufficient-pairs"``.  Calibration may add to ``extra_flags`` and
    mark antennas in ``invalid``.
    """

    h: np.ndarray
    eigenvalues: np.ndarray  # (N, M), descending
    noise_variance: float
    sample_count: int
    flags: list
    pair_counts: np.ndarray | None = None
    timestamp_us: int | None = None
    extra_flags: set = field(default_factory=set)
    invalid: np.ndarray | None = None  # (N, M) bool

    @property
    def n_subcarriers(self) -> int:
        return self.h.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.h.shape[1]

    @property
    def principal_eigenvalue(self) -> np.ndarray:
        return self.eigenvalues[:, 0]

    @property
    def ok(self) -> np.ndarray:
        return np.array([f == OK for f in self.flags])

    @property
    def all_ok(self) -> bool:
        return all(f == OK for f in self.flags)

    def entry_flags(self, n: int, m: int) -> list[str]:
        out = set(self.extra_flags)
        if self.flags[n] != OK:
            out.add(self.flags[n])
        if self.invalid is not None and self.invalid[n, m]:
            out.add("invalid-antenna")
        return sorted(out) if out else [OK]


def _flags_from_eigs(evals: np.ndarray, sigma2: float) -> list[str]:
    lam1 = evals[..., 0]
    flags = []
    for n in range(evals.shape[0]):
        l1 = lam1[n]
        gap_small = evals.shape[1] > 1 and (l1 - evals[n, 1]) < TIE_RTOL * abs(l1)
        flags.append(RANK_DEFICIENT if (l1 <= sigma2 or gap_small) else OK)
    return flags


def estimate_channel(c_hat: np.ndarray, noise_variance: float = 0.0, method: str = "jacobi") -> ChannelEstimate:
    """Rank-1 least-squares channel estimate from covariance matrices.

    ``c_hat`` is one Hermitian (M, M) matrix or a stack (N, M, M).  Returns
    ``h = sqrt(max(lambda_1 - sigma^2, 0)) * v_1`` per subcarrier.
    """
    if noise_variance < 0:
        raise ValueError("noise_variance must be >= 0")
    c = np.asarray(c_hat, dtype=np.complex128)
    single = c.ndim == 2
    if single:
        c = c[None]
    evals, evecs = eigh(c, method)
    scale = np.sqrt(np.maximum(evals[:, 0] - noise_variance, 0.0))
    h = scale[:, None] * evecs[:, :, 0]
    return ChannelEstimate(
        h=h,
        eigenvalues=evals,
        noise_variance=float(noise_variance),
        sample_count=0,
        flags=_flags_from_eigs(evals, noise_variance),
    )


def estimate_noise_floor(acc_or_cov, method: str = "jacobi") -> float:
    """Mean of the M-1 non-principal eigenvalues, averaged over subcarriers."""
    if isinstance(acc_or_cov, CovarianceAccumulator):
        if has_insufficient_pairs(acc_or_cov):
            raise InsufficientPairsError("cannot estimate noise floor with missing antenna pairs")
        c = finalize_covariance(acc_or_cov)
    else:
        c = np.asarray(acc_or_cov)
        if c.ndim == 2:
            c = c[None]
    if c.shape[-1] < 2:
        raise ValueError("noise floor estimate needs at least two antennas")
    evals, _ = eigh(c, method)
    return float(max(np.mean(evals[:, 1:]), 0.0))


def estimate_channels(
    acc: CovarianceAccumulator,
    noise_variance: float | None = None,
    method: str = "jacobi",
    timestamp_us: int | None = None,
) -> ChannelEstimate:
    """Finalize ``acc`` and estimate every subcarrier independently.

    With ``noise_variance=None`` the noise floor is estimated from the
    window itself (see :func:`estimate_noise_floor`).
    """
    c = finalize_covariance(acc)
    insufficient = has_insufficient_pairs(acc)
    evals, evecs = eigh(c, method)
    if noise_variance is None:
        if insufficient or acc.n_antennas < 2:
            sigma2 = 0.0
        else:
            sigma2 = float(max(np.mean(evals[:, 1:]), 0.0))
    else:
        sigma2 = float(noise_variance)
    scale = np.sqrt(np.maximum(evals[:, 0] - sigma2, 0.0))
    h = scale[:, None] * evecs[:, :, 0]
    flags = _flags_from_eigs(evals, sigma2)
    if insufficient:
        flags = [INSUFFICIENT_PAIRS] * len(flags)
    return ChannelEstimate(
        h=h,
        eigenvalues=evals,
        noise_variance=sigma2,
        sample_count=acc.n_frames,
        flags=flags,
        pair_counts=acc.pairs.copy(),
        timestamp_us=timestamp_us,
    )
