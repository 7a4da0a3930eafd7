"""Phase and power calibration against the on-board reference signal.

    h_cal[m] = h_ota[m] / h_ref[m] * exp(-j phi_path[m])

Dividing by the reference estimate cancels each receiver's PLL phase and
analog gain (both are common to the over-the-air and reference paths); the
static path phases of the distribution network are removed with the board
description.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .estimator import OK, ChannelEstimate

log = logging.getLogger(__name__)

MIN_REFERENCE_MAGNITUDE = 1e-12
DEFAULT_STALENESS_S = 5.0
# reference network is rank-1 by construction; more energy than this
# (relative to the principal component) in the second eigenvalue means the
# window straddled a PLL relock or was otherwise corrupted
DEFAULT_MAX_SECOND_EIGEN_RATIO = 0.05

STALE = "stale-calibration"
UNCALIBRATED = "uncalibrated"


@dataclass
class CalibrationState:
    path_phase: np.ndarray
    reference: np.ndarray | None = None  # (N, M)
    timestamp_us: int | None = None
    staleness_limit_s: float = DEFAULT_STALENESS_S
    max_second_eigen_ratio: float = DEFAULT_MAX_SECOND_EIGEN_RATIO
    rejected_updates: int = 0
    updates: int = 0
    rejections: list = field(default_factory=list)

    @property
    def n_antennas(self) -> int:
        return len(self.path_phase)

    @property
    def usable(self) -> np.ndarray:
        """(M,) antennas whose reference magnitude is above the floor on every subcarrier."""
        if self.reference is None:
            return np.zeros(self.n_antennas, dtype=bool)
        return np.all(np.abs(self.reference) > MIN_REFERENCE_MAGNITUDE, axis=0)

    def age_s(self, now_us: int | None) -> float:
        if self.timestamp_us is None:
            return np.inf
        if now_us is None:
            return 0.0
        return (now_us - self.timestamp_us) * 1e-6

    def is_fresh(self, now_us: int | None) -> bool:
        return self.age_s(now_us) <= self.staleness_limit_s


def reference_defect(estimate: ChannelEstimate) -> float:
    """Median over subcarriers of (lambda_2 - sigma^2) / (lambda_1 - sigma^2)."""
    ev = estimate.eigenvalues
    if ev.shape[1] < 2:
        return 0.0
    s2 = estimate.noise_variance
    num = np.maximum(ev[:, 1] - s2, 0.0)
    den = np.maximum(ev[:, 0] - s2, np.finfo(float).tiny)
    return float(np.median(num / den))


def update_reference(state: CalibrationState, estimate: ChannelEstimate, timestamp_us: int | None = None) -> CalibrationState:
    """Install a reference-window estimate, or keep the old state if it is unusable.

    Rejected when any subcarrier is not flagged ok, when the estimate carries
    extra flags, or when it does not look rank-1.  Rejections bump
    ``rejected_updates`` and leave every other field untouched.
    """
    if estimate.n_antennas != state.n_antennas:
        raise ValueError(f"estimate has {estimate.n_antennas} antennas, state {state.n_antennas}")
    reason = None
    if not estimate.all_ok:
        reason = "flagged"
    elif estimate.extra_flags:
        reason = ",".join(sorted(estimate.extra_flags))
    else:
        defect = reference_defect(estimate)
        if defect > state.max_second_eigen_ratio:
            reason = f"not rank-1 (defect {defect:.3g})"
    if reason is not None:
        log.warning("reference update rejected: %s", reason)
        return replace(
            state,
            rejected_updates=state.rejected_updates + 1,
            rejections=state.rejections + [(timestamp_us, reason)],
        )
    ts = timestamp_us if timestamp_us is not None else estimate.timestamp_us
    return replace(state, reference=estimate.h.copy(), timestamp_us=ts, updates=state.updates + 1)


def calibrate(
    state: CalibrationState,
    ota: ChannelEstimate,
    now_us: int | None = None,
    phase_reference: int | None = None,
) -> ChannelEstimate:
    """Apply reference-based phase/power calibration to an over-the-air estimate.

    Antennas whose reference magnitude is below 1e-12 come out as zero and
    are marked in ``invalid``.  A stale state still calibrates but tags the
    result ``stale-calibration``.  With ``phase_reference=m0`` the output is
    rotated so antenna ``m0`` has phase 0 on every subcarrier; by default no
    rotation is applied and the operation is linear in ``ota.h``.
    """
    if ota.n_antennas != state.n_antennas:
        raise ValueError(f"estimate has {ota.n_antennas} antennas, state {state.n_antennas}")
    extra = set(ota.extra_flags)
    if state.reference is None:
        extra.add(UNCALIBRATED)
        invalid = np.ones(ota.h.shape, dtype=bool)
        return replace(ota, h=np.zeros_like(ota.h), extra_flags=extra, invalid=invalid)
    if state.reference.shape != ota.h.shape:
        raise ValueError(f"reference shape {state.reference.shape} != estimate shape {ota.h.shape}")
    ref = state.reference
    invalid = np.abs(ref) < MIN_REFERENCE_MAGNITUDE
    safe = np.where(invalid, 1.0, ref)
    h = ota.h / safe * np.exp(-1j * state.path_phase)[None, :]
    h = np.where(invalid, 0, h)
    if ota.invalid is not None:
        invalid = invalid | ota.invalid
    if not state.is_fresh(now_us if now_us is not None else ota.timestamp_us):
        extra.add(STALE)
    if phase_reference is not None:
        h = align_phase(h, phase_reference)
    return replace(ota, h=h, extra_flags=extra, invalid=invalid)


def align_phase(h: np.ndarray, m0: int = 0) -> np.ndarray:
    """Rotate each row of (N, M) ``h`` so that antenna ``m0`` is real-positive."""
    h = np.asarray(h)
    anchor = h[..., m0:m0 + 1]
    mag = np.abs(anchor)
    rot = np.where(mag > 0, np.conj(anchor) / np.where(mag > 0, mag, 1.0), 1.0)
    return h * rot


def self_reference(estimate: ChannelEstimate, path_phase: np.ndarray | None = None) -> CalibrationState:
    """Calibration state that uses ``estimate`` itself as the reference."""
    m = estimate.n_antennas
    pp = np.zeros(m) if path_phase is None else np.asarray(path_phase, float)
    return CalibrationState(path_phase=pp, reference=estimate.h.copy(), timestamp_us=estimate.timestamp_us, updates=1)


__all__ = [
    "CalibrationState",
    "OK",
    "STALE",
    "UNCALIBRATED",
    "align_phase",
    "calibrate",
    "reference_defect",
    "self_reference",
    "update_reference",
]
