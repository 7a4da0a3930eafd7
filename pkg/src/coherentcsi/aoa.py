"""Downstream analyses: per-antenna phase statistics and MUSIC pseudo-spectra."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .estimator import ChannelEstimate, eigh
from .geometry import ArrayGeometry, manifold
from .linalg import check_hermitian, outer

LOW_CONFIDENCE_RATIO = 0.1
DEFAULT_PROMINENCE_DB = 3.0


def default_azimuth_grid(points: int = 181) -> np.ndarray:
    return np.linspace(-np.pi / 2, np.pi / 2, points)


def wrap(phase):
    """Wrap to [-pi, pi)."""
    return (np.asarray(phase) + np.pi) % (2 * np.pi) - np.pi


# -- phase statistics --------------------------------------------------------


class AntennaPhase(NamedTuple):
    phase: float
    coherence: float  # |sum| / sum|.|
    low_confidence: bool


def _coefficients(estimate) -> np.ndarray:
    h = estimate.h if isinstance(estimate, ChannelEstimate) else np.asarray(estimate)
    return h[None, :] if h.ndim == 1 else h


def antenna_phase(estimate, m: int) -> AntennaPhase:
    """Phase of the subcarrier sum of antenna ``m``'s coefficients.

    Only meaningful for channels that are close to frequency-flat.  The
    result is tagged low-confidence when the sum's magnitude is under a tenth
    of the summed magnitudes, i.e. the subcarriers largely cancel.
    """
    h = _coefficients(estimate)
    if not 0 <= m < h.shape[1]:
        raise IndexError(f"antenna {m} outside 0..{h.shape[1] - 1}")
    if isinstance(estimate, ChannelEstimate) and estimate.invalid is not None and np.all(estimate.invalid[:, m]):
        raise ValueError(f"antenna {m} has no valid coefficients")
    col = h[:, m]
    total = np.sum(col)
    mass = np.sum(np.abs(col))
    coh = float(abs(total) / mass) if mass > 0 else 0.0
    return AntennaPhase(float(np.angle(total)), coh, coh < LOW_CONFIDENCE_RATIO)


def antenna_phases(estimate) -> np.ndarray:
    """(M,) subcarrier-sum phases for every antenna."""
    h = _coefficients(estimate)
    return np.angle(np.sum(h, axis=0))


@dataclass
class PhaseSeries:
    """Time series of per-antenna phase differences to a reference antenna."""

    timestamps: np.ndarray  # (T,) microseconds
    phases: np.ndarray  # (T, M), wrapped, column m0 is zero
    reference_antenna: int = 0
    window: int = 20

    @classmethod
    def from_phases(cls, timestamps, absolute_phases, reference_antenna: int = 0, window: int = 20) -> "PhaseSeries":
        p = np.asarray(absolute_phases, dtype=float)
        rel = wrap(p - p[:, reference_antenna : reference_antenna + 1])
        return cls(np.asarray(timestamps), rel, reference_antenna, window)

    @classmethod
    def from_estimates(cls, estimates: Sequence[ChannelEstimate], reference_antenna: int = 0, window: int = 20) -> "PhaseSeries":
        ts = [e.timestamp_us if e.timestamp_us is not None else i for i, e in enumerate(estimates)]
        return cls.from_phases(ts, [antenna_phases(e) for e in estimates], reference_antenna, window)

    def __len__(self):
        return len(self.timestamps)

    def moving_average(self) -> np.ndarray:
        """Trailing circular mean over ``window`` samples (shorter at the start)."""
        z = np.exp(1j * self.phases)
        c = np.cumsum(np.vstack([np.zeros((1, z.shape[1])), z]), axis=0)
        k = np.arange(1, len(z) + 1)
        lo = np.maximum(k - self.window, 0)
        return wrap(np.angle(c[k] - c[lo]))

    def to_csv(self, path, smoothed: bool = False) -> None:
        vals = self.moving_average() if smoothed else self.phases
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp_us"] + [f"phase_{m}" for m in range(vals.shape[1])])
            for t, row in zip(self.timestamps, vals):
                w.writerow([int(t)] + [f"{x:.9f}" for x in row])


def circular_std(phases, axis=0) -> np.ndarray:
    """sqrt(-2 ln R) with R the mean resultant length."""
    r = np.abs(np.mean(np.exp(1j * np.asarray(phases)), axis=axis))
    r = np.clip(r, 1e-300, 1.0)
    return np.sqrt(np.maximum(-2.0 * np.log(r), 0.0))


def circular_mean(phases, axis=0) -> np.ndarray:
    return np.angle(np.mean(np.exp(1j * np.asarray(phases)), axis=axis))


@dataclass
class StabilityReport:
    boundaries: list  # (start, stop) sample indices per segment
    std: np.ndarray  # (S, M) circular std-dev
    mean: np.ndarray  # (S, M) circular mean

    def steps(self) -> np.ndarray:
        """(S-1, M) wrapped mean difference between consecutive segments."""
        return np.abs(wrap(np.diff(self.mean, axis=0)))

    def to_rows(self) -> list[dict]:
        rows = []
        for s, (a, b) in enumerate(self.boundaries):
            for m in range(self.std.shape[1]):
                rows.append({"segment": s, "start": a, "stop": b, "antenna": m,
                             "circular_std_rad": float(self.std[s, m]), "mean_rad": float(self.mean[s, m])})
        return rows


def phase_stability_report(series: PhaseSeries, boundaries: Sequence[int] | None = None) -> StabilityReport:
    """Circular std-dev per antenna per segment.

    ``boundaries`` are sample indices where new segments start (for example
    known relocation times); by default the whole series is one segment.
    """
    cuts = [0] + sorted(int(b) for b in (boundaries or ())) + [len(series)]
    segs = [(a, b) for a, b in zip(cuts, cuts[1:])]
    stds, means = [], []
    for a, b in segs:
        if b - a < 2:
            raise ValueError(f"segment [{a}, {b}) has fewer than two samples")
        seg = series.phases[a:b]
        stds.append(circular_std(seg))
        means.append(circular_mean(seg))
    return StabilityReport(segs, np.array(stds), np.array(means))


def time_boundaries(timestamps, cut_times) -> list[int]:
    ts = np.asarray(timestamps)
    return [int(np.searchsorted(ts, t)) for t in cut_times]


# -- MUSIC ---------------------------------------------------------------------


@dataclass
class Peak:
    azimuth: float
    power_db: float
    prominence_db: float

    @property
    def azimuth_deg(self) -> float:
        return float(np.degrees(self.azimuth))


@dataclass
class PseudoSpectrum:
    azimuths: np.ndarray
    power_db: np.ndarray
    source_count: int = 1
    peaks: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def argmax(self) -> float:
        return float(self.azimuths[int(np.argmax(self.power_db))])

    def to_csv_rows(self, label: str = "") -> list[list]:
        return [[label, f"{np.degrees(a):.6f}", f"{p:.6f}"] for a, p in zip(self.azimuths, self.power_db)]

    def to_jsonl(self, label: str = "") -> str:
        return json.dumps({
            "label": label,
            "azimuth_deg": [float(np.degrees(a)) for a in self.azimuths],
            "power_db": [float(p) for p in self.power_db],
            "peaks_deg": [p.azimuth_deg for p in self.peaks],
            "degenerate": self.degenerate,
        })


def as_covariance(data) -> np.ndarray:
    """Accept a covariance (M, M), a vector h (M,), or a set of vectors (K, M).

    Vectors are turned into ``mean_k h_k h_k^H``.
    """
    x = np.asarray(data.h if isinstance(data, ChannelEstimate) else data, dtype=np.complex128)
    if x.ndim == 1:
        return outer(x)
    if x.ndim == 2 and x.shape[0] == x.shape[1] and np.allclose(x, np.conj(x.T), rtol=1e-10, atol=1e-14 * max(np.abs(x).max(), 1.0)):
        return x
    if x.ndim == 2:
        return np.mean(outer(x), axis=0)
    raise ValueError(f"cannot interpret array of shape {x.shape} as covariance or vectors")


def find_spectrum_peaks(azimuths, power_db, prominence_db: float = DEFAULT_PROMINENCE_DB) -> list[Peak]:
    from scipy.signal import find_peaks  # deferred: scipy.signal is slow to import

    idx, props = find_peaks(power_db, prominence=prominence_db)
    peaks = [Peak(float(azimuths[i]), float(power_db[i]), float(p)) for i, p in zip(idx, props["prominences"])]
    peaks.sort(key=lambda p: -p.power_db)
    return peaks


def music_spectrum(
    data,
    geometry: ArrayGeometry,
    azimuths: np.ndarray | None = None,
    source_count: int = 1,
    prominence_db: float = DEFAULT_PROMINENCE_DB,
    method: str = "jacobi",
) -> PseudoSpectrum:
    """MUSIC pseudo-spectrum ``1 / (a^H E_n E_n^H a)`` over an azimuth grid.

    ``E_n`` spans the ``M - d`` eigenvectors with the smallest eigenvalues.
    Values are in dB relative to the spectrum maximum.
    """
    c = check_hermitian(as_covariance(data), rtol=1e-9)
    m = c.shape[0]
    if m != geometry.n_antennas:
        raise ValueError(f"covariance is {m}x{m}, geometry has {geometry.n_antennas} antennas")
    if not 0 < source_count < m:
        raise ValueError(f"source_count must satisfy 0 < d < M={m}")
    az = default_azimuth_grid() if azimuths is None else np.asarray(azimuths, dtype=float)
    if np.any(np.diff(az) <= 0):
        raise ValueError("azimuth grid must be strictly increasing")
    evals, evecs = eigh(c, method)
    scale = max(abs(evals[0]), np.finfo(float).tiny)
    degenerate = (evals[source_count - 1] - evals[source_count]) < 1e-9 * scale
    noise = evecs[:, source_count:]
    a = manifold(geometry, az)  # (M, P)
    proj = np.sum(np.abs(noise.conj().T @ a) ** 2, axis=0)
    proj = np.maximum(proj, 1e-15 * m)
    p = 1.0 / proj
    p_db = 10 * np.log10(p / p.max())
    return PseudoSpectrum(az, p_db, source_count, find_spectrum_peaks(az, p_db, prominence_db), bool(degenerate))


def beamformer_spectrum(data, geometry: ArrayGeometry, azimuths: np.ndarray | None = None) -> PseudoSpectrum:
    """Conventional (Bartlett) spectrum ``a^H C a``, in dB relative to its maximum."""
    c = as_covariance(data)
    az = default_azimuth_grid() if azimuths is None else np.asarray(azimuths, dtype=float)
    a = manifold(geometry, az)
    p = np.real(np.einsum("ip,ij,jp->p", a.conj(), c, a))
    p = np.maximum(p, np.finfo(float).tiny)
    p_db = 10 * np.log10(p / p.max())
    return PseudoSpectrum(az, p_db, 1, find_spectrum_peaks(az, p_db))
