"""Streaming processing chain: clusters -> windows -> estimates -> calibration.

Over-the-air and reference clusters are collected into estimation windows.
A PLL relock changes every receiver's phase, so an over-the-air frame can
only be calibrated with reference frames from the same lock epoch.  The
windower therefore commits over-the-air clusters in segments bounded by two
reference clusters whose inter-antenna phase pattern agrees; a segment whose
closing reference disagrees (a relock happened somewhere inside it) is
dropped and a new epoch starts.
"""

from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

from .board import BoardDescription
from .calibration import CalibrationState, calibrate, update_reference
from .estimator import ChannelEstimate, CovarianceAccumulator, estimate_channels, finalize_covariance
from .ingest import FrameCluster, FrameClusterer, FrameKind, StreamParser

DEFAULT_WINDOW = 100
DEFAULT_RELOCK_THRESHOLD = 0.25


@dataclass
class PipelineConfig:
    window: int = DEFAULT_WINDOW  # over-the-air clusters per estimation window
    min_window: int = 10  # shorter windows (cut by a relock) are discarded
    noise_variance: float | None = None  # None: estimate per window
    relock_threshold: float = DEFAULT_RELOCK_THRESHOLD  # rad
    eig_method: str = "lapack"  # "jacobi" selects the in-house solver
    staleness_s: float = 5.0
    phase_reference: int | None = 0
    reference_window: int = 50  # most recent same-epoch reference clusters used
    cluster_window_us: int = 500
    flush_horizon_us: int = 10_000
    stall_timeout_us: int | None = 10_000


@dataclass
class WindowResult:
    index: int
    start_us: int
    end_us: int
    ota: ChannelEstimate
    reference: ChannelEstimate | None
    calibrated: ChannelEstimate
    ota_covariance: np.ndarray  # (N, M, M) raw incomplete-data covariance
    calibration: CalibrationState
    epoch: int

    @property
    def n_ota(self) -> int:
        return self.ota.sample_count

    def calibration_matrix(self) -> np.ndarray | None:
        """(N, M) per-antenna factors exp(-j phi_path) / h_ref, or None."""
        st = self.calibration
        if st.reference is None:
            return None
        ref = st.reference
        bad = np.abs(ref) < 1e-12
        return np.where(bad, 0, np.exp(-1j * st.path_phase)[None, :] / np.where(bad, 1, ref))

    def calibrated_covariance(self) -> np.ndarray | None:
        """Subcarrier-averaged covariance of calibrated per-frame vectors (M, M).

        Calibration is a per-antenna scaling, so it is applied to the
        incomplete-data covariance directly: ``D C D^H`` per subcarrier.
        """
        d = self.calibration_matrix()
        if d is None:
            return None
        c = d[:, :, None] * self.ota_covariance * np.conj(d[:, None, :])
        return np.mean(c, axis=0)


def _stack(clusters: list[FrameCluster], m: int, n: int):
    t_idx, rx_idx, coefs = [], [], []
    for t, cl in enumerate(clusters):
        for rx, rep in cl.reports.items():
            t_idx.append(t)
            rx_idx.append(rx)
            coefs.append(rep.coefficients)
    r = np.zeros((len(clusters), m, n), dtype=np.complex64)
    present = np.zeros((len(clusters), m), dtype=bool)
    if coefs:
        r[t_idx, rx_idx] = np.stack(coefs)
        present[t_idx, rx_idx] = True
    return r, present


def _stack_one(cluster: FrameCluster, m: int):
    """(M, N) coefficients and (M,) presence mask of a single cluster."""
    reps = cluster.reports
    n = len(next(iter(reps.values())).coefficients)
    r = np.zeros((m, n), dtype=np.complex64)
    present = np.zeros(m, dtype=bool)
    for rx, rep in reps.items():
        r[rx] = rep.coefficients
        present[rx] = True
    return r, present


class EpochTracker:
    """Detects PLL relocks from the inter-antenna phase pattern of reference frames."""

    def __init__(self, n_antennas: int, threshold: float):
        self.m = n_antennas
        self.threshold = threshold
        self.signature = None  # (M,) unit phasors, nan where unknown

    def check(self, cluster: FrameCluster, stacked=None) -> bool:
        """Return True when ``cluster`` agrees with the current epoch; update state.

        ``stacked`` optionally passes the cluster's (M, N) coefficients and
        (M,) presence mask when the caller already built them.
        """
        r, present = stacked if stacked is not None else _stack_one(cluster, self.m)
        sums = np.sum(r, axis=1, dtype=np.complex128)
        mag = np.abs(sums)
        z = np.where(present & (mag > 0), sums / np.where(mag > 0, mag, 1), np.nan + 0j)
        if self.signature is None:
            self.signature = z
            return False
        known = ~np.isnan(z) & ~np.isnan(self.signature)
        if np.count_nonzero(known) < 2:
            self.signature = z
            return False
        d = z[known] * np.conj(self.signature[known])
        common = np.angle(np.sum(d))
        resid = np.angle(d * np.exp(-1j * common))
        aligned = z * np.exp(-1j * common)
        if np.max(np.abs(resid)) > self.threshold:
            self.signature = z
            return False
        upd = ~np.isnan(z)
        self.signature = np.where(upd, aligned, self.signature)
        return True


class Pipeline:
    """Consumes frame clusters and produces calibrated window estimates."""

    def __init__(self, board: BoardDescription, config: PipelineConfig | None = None):
        self.board = board
        self.config = config or PipelineConfig()
        self.m = board.n_antennas
        self.n = board.grid.n_subcarriers
        self.state = CalibrationState(path_phase=board.path_phase.copy(), staleness_limit_s=self.config.staleness_s)
        self.epochs = EpochTracker(self.m, self.config.relock_threshold)
        self.counters: Counter = Counter()
        self._window_ota: list[FrameCluster] = []
        self._window_ref: list[FrameCluster] = []
        self._epoch_refs: deque = deque(maxlen=self.config.reference_window)
        self._state_epoch = None
        self._state_weight = 0
        self._prior = None  # (reference (N, M), weight) carried over from the last epoch
        self._pending: list[FrameCluster] = []
        self._seen_reference = False
        self._epoch = 0
        self._index = 0

    # -- window assembly -------------------------------------------------
    def push(self, cluster: FrameCluster) -> list[WindowResult]:
        out: list[WindowResult] = []
        if cluster.frame_kind is FrameKind.OTA:
            self.counters["ota_clusters"] += 1
            if not self._seen_reference:
                # no reference signal seen yet: raw estimation still works
                self._pending.append(cluster)
                if len(self._pending) >= self.config.window:
                    self._window_ota, self._pending = self._pending, []
                    out += self._close()
                return out
            self._pending.append(cluster)
            return out

        self.counters["reference_clusters"] += 1
        if not self._seen_reference:
            self._seen_reference = True
            if self._pending:
                self.counters["unreferenced_ota"] += len(self._pending)
                self._pending = []
        first = self.epochs.signature is None
        stacked = _stack_one(cluster, self.m)
        if self.epochs.check(cluster, stacked):
            self._window_ota += self._pending
            self._pending = []
            self._window_ref.append(cluster)
            self._remember_reference(cluster, stacked)
            if len(self._window_ota) >= self.config.window:
                out += self._close()
                self._window_ref = [cluster]
        else:
            if not first:
                self.counters["epoch_changes"] += 1
            if self._pending and self._window_ref:
                self.counters["ambiguous_ota"] += len(self._pending)
            elif self._pending:
                self.counters["unreferenced_ota"] += len(self._pending)
            self._pending = []
            if self._window_ota:
                out += self._close(allow_short=True)
            if self._state_epoch == self._epoch and self.state.reference is not None:
                self._prior = (self.state.reference, self._state_weight)
            self._epoch += 1
            self._window_ota = []
            self._window_ref = [cluster]
            self._epoch_refs.clear()
            self._remember_reference(cluster, stacked)
        return out

    def cut(self) -> list[WindowResult]:
        """Close the current window at an externally known boundary.

        Over-the-air clusters still awaiting their closing reference are
        dropped (``boundary_ota``) so no window straddles the boundary.
        """
        out = []
        if self._seen_reference:
            self.counters["boundary_ota"] += len(self._pending)
            self._pending = []
        elif self._pending:
            self._window_ota, self._pending = self._pending, []
        if self._window_ota:
            out += self._close(allow_short=True)
        if self._window_ref:
            self._window_ref = self._window_ref[-1:]
        return out

    def _remember_reference(self, cluster: FrameCluster, stacked) -> None:
        r, present = stacked
        self._epoch_refs.append((cluster.cluster_timestamp, r, present))

    def finish(self) -> list[WindowResult]:
        out = []
        if not self._seen_reference:
            self._window_ota += self._pending
        elif self._pending:
            self.counters["unverified_tail_ota"] += len(self._pending)
        self._pending = []
        if self._window_ota:
            out += self._close(allow_short=True)
        return out

    def _close(self, allow_short: bool = False) -> list[WindowResult]:
        ota, refs = self._window_ota, self._window_ref
        self._window_ota = []
        if len(ota) < (self.config.min_window if allow_short else 1):
            self.counters["short_window_ota"] += len(ota)
            return []
        res = self.estimate_window(ota, refs)
        return [res]

    # -- estimation ------------------------------------------------------
    def estimate_window(self, ota: list[FrameCluster], refs: list[FrameCluster]) -> WindowResult:
        """Estimate one window.

        ``refs`` are the reference clusters bracketing the window; the
        reference estimate also uses earlier reference clusters of the same
        lock epoch (up to ``reference_window``), since the distribution
        network itself does not change.
        """
        cfg = self.config
        m, n = self.m, self.n
        r, present = _stack(ota, m, n)
        acc = CovarianceAccumulator(m, n).add_batch(r, present)
        start = ota[0].cluster_timestamp
        end = ota[-1].cluster_timestamp
        ota_est = estimate_channels(acc, cfg.noise_variance, cfg.eig_method, timestamp_us=end)
        ref_est = None
        if self._epoch_refs:
            ref_ts = self._epoch_refs[-1][0]
            rr = np.stack([e[1] for e in self._epoch_refs])
            rp = np.stack([e[2] for e in self._epoch_refs])
            racc = CovarianceAccumulator(m, n).add_batch(rr, rp)
            ref_est = estimate_channels(racc, cfg.noise_variance, cfg.eig_method, timestamp_us=ref_ts)
            pooled, weight = self._pool_reference(ref_est)
            before = self.state.updates
            self.state = update_reference(self.state, ref_est, ref_est.timestamp_us)
            if self.state.updates != before:
                self.state = replace(self.state, reference=pooled)
                self._state_epoch = self._epoch
                self._state_weight = weight
        if self._state_epoch == self._epoch:
            cal = calibrate(self.state, ota_est, now_us=end, phase_reference=cfg.phase_reference)
        else:
            # never calibrate against a reference from another lock epoch
            self.counters["uncalibrated_windows"] += 1
            blank = CalibrationState(path_phase=self.state.path_phase, staleness_limit_s=cfg.staleness_s)
            cal = calibrate(blank, ota_est, now_us=end)
        self.counters["windows"] += 1
        res = WindowResult(
            self._index, start, end, ota_est, ref_est, cal, finalize_covariance(acc), self.state, self._epoch,
        )
        self._index += 1
        return res

    def _pool_reference(self, ref_est: ChannelEstimate):
        """Blend the current epoch's reference estimate with the previous epoch's.

        A relock turns each receiver's phase by one constant on every
        subcarrier and leaves gains and the distribution network alone, so
        the older reference stays valid once each antenna is rotated by its
        offset, measured over all subcarriers against the new estimate.
        """
        k = ref_est.sample_count
        if self._prior is None or not ref_est.all_ok:
            return ref_est.h, k
        prior, w = self._prior
        w = min(w, self.config.reference_window)
        d = np.sum(ref_est.h * np.conj(prior), axis=0)
        mag = np.abs(d)
        rot = np.where(mag > 0, d / np.where(mag > 0, mag, 1.0), 1.0)
        return (k * ref_est.h + w * prior * rot) / (k + w), k + w

    def run(self, clusters: Iterable[FrameCluster]) -> Iterator[WindowResult]:
        for cl in clusters:
            yield from self.push(cl)
        yield from self.finish()


def make_clusterer(board: BoardDescription, config: PipelineConfig) -> FrameClusterer:
    return FrameClusterer(board.n_antennas, config.cluster_window_us, config.flush_horizon_us, config.stall_timeout_us)


def process_reports(reports: Iterable, board: BoardDescription, config: PipelineConfig | None = None):
    """Cluster and process an in-memory report stream; returns (windows, pipeline, clusterer)."""
    config = config or PipelineConfig()
    clusterer = make_clusterer(board, config)
    pipe = Pipeline(board, config)
    windows = []
    for rep in reports:
        for cl in clusterer.push(rep):
            windows += pipe.push(cl)
    for cl in clusterer.flush():
        windows += pipe.push(cl)
    windows += pipe.finish()
    return windows, pipe, clusterer


def process_stream(chunks: Iterable[bytes], board: BoardDescription, config: PipelineConfig | None = None):
    """Parse, cluster and process a byte stream lazily.

    Yields :class:`WindowResult` objects; the parser, clusterer and pipeline
    are exposed on the returned generator's ``stats`` via the ``sink`` dict.
    """
    config = config or PipelineConfig()
    parser = StreamParser(board.grid.n_subcarriers)
    clusterer = make_clusterer(board, config)
    pipe = Pipeline(board, config)
    return parser, clusterer, pipe, _drive(chunks, parser, clusterer, pipe)


def _drive(chunks, parser, clusterer, pipe):
    push = clusterer.push
    for chunk in chunks:
        for rep in parser.feed(chunk):
            for cl in push(rep):
                yield from pipe.push(cl)
    for rep in parser.close():
        for cl in push(rep):
            yield from pipe.push(cl)
    for cl in clusterer.flush():
        yield from pipe.push(cl)
    yield from pipe.finish()


def estimate_lines(result: WindowResult, subcarrier_indices) -> Iterator[str]:
    """JSONL lines ``{cluster_window, subcarrier, antenna, re, im, flags}``."""
    est = result.calibrated
    h = est.h
    w = result.index
    for n, k in enumerate(subcarrier_indices):
        for m in range(h.shape[1]):
            z = h[n, m]
            yield json.dumps({
                "cluster_window": w,
                "subcarrier": int(k),
                "antenna": m,
                "re": float(z.real),
                "im": float(z.imag),
                "flags": est.entry_flags(n, m),
            })
