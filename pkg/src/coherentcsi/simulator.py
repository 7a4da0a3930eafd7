"""Closed-loop simulator for a frequency-locked but phase-ambiguous receiver array.

Each receiver ``m`` reports

    r_m[n] = h_m[n] * g_m * exp(j (phi + theta_m)) + noise

where ``phi`` is the transmitter's random start phase for the frame,
``theta_m`` the receiver's PLL phase (re-drawn at every relock) and ``g_m`` an
analog gain.  Reference frames see the on-board distribution network,
``h_m[n] = exp(-j phi_path_m)``, instead of the over-the-air channel:
``phi_path_m`` is the phase lag the signal picks up along the network trace
to receiver ``m``.

Ground truth is kept next to every frame but never enters the reports.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .board import BoardDescription
from .geometry import ArrayGeometry, SubcarrierGrid, steering_vector
from .ingest.wire import CsiReport, FrameKind, format_mac

OTA_MAC = bytes.fromhex("24dcc3a10b01")
REFERENCE_MAC = bytes.fromhex("24dcc3a1fe00")


@dataclass
class ImpairmentConfig:
    noise_variance: float = 0.0  # E|n|^2 per complex coefficient
    frame_loss_probability: float = 0.0
    pll_relock_rate: float = 0.0  # events per simulated second
    quantization_bits: int | None = None
    quantization_full_scale: float = 4.0

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        if not 0 <= self.frame_loss_probability < 1:
            raise ValueError("frame_loss_probability must be in [0, 1)")
        if self.pll_relock_rate < 0:
            raise ValueError("pll_relock_rate must be >= 0")


@dataclass
class ReceiverState:
    """Hidden per-receiver state; ``pll_phase`` changes only at relock."""

    pll_phase: np.ndarray
    path_phase: np.ndarray
    gain: np.ndarray
    relock_count: int = 0

    @property
    def n_receivers(self) -> int:
        return len(self.pll_phase)


@dataclass
class GroundTruth:
    frame_index: int
    frame_kind: FrameKind
    source_mac: bytes
    sequence_number: int
    tx_time_us: int
    azimuth: float | None
    complex_gain: complex
    tx_phase: float
    pll_phase: np.ndarray
    relock_count: int
    rx_timestamps: dict  # receiver_id -> timestamp of delivered report
    channel: np.ndarray = field(repr=False)  # (M, N) true channel, before impairments

    @property
    def delivered(self) -> list[int]:
        return sorted(self.rx_timestamps)

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame_index": self.frame_index,
                "frame_kind": self.frame_kind.name,
                "source_mac": format_mac(self.source_mac),
                "sequence_number": self.sequence_number,
                "tx_time_us": self.tx_time_us,
                "azimuth_rad": self.azimuth,
                "complex_gain": [self.complex_gain.real, self.complex_gain.imag],
                "tx_phase_rad": self.tx_phase,
                "pll_phase_rad": [float(x) for x in self.pll_phase],
                "relock_count": self.relock_count,
                "delivered": {str(m): ts for m, ts in sorted(self.rx_timestamps.items())},
            }
        )


def uniform_phases(rng: np.random.Generator, m: int) -> np.ndarray:
    return rng.uniform(-np.pi, np.pi, size=m)


def synthesize_ota_channel(
    geometry: ArrayGeometry,
    grid: SubcarrierGrid,
    azimuth: float,
    complex_gain: complex = 1.0,
    second_path: tuple | None = None,
) -> np.ndarray:
    """Single planar-wave line-of-sight channel, shape (M, N).

    Column ``n`` is ``complex_gain`` times the steering vector evaluated at
    subcarrier ``n``'s absolute frequency.  ``second_path`` optionally adds a
    delayed echo given as ``(azimuth, complex_gain, delay_s)``.
    """
    freqs = grid.frequencies
    h = complex_gain * np.stack([steering_vector(geometry, azimuth, f) for f in freqs], axis=-1)
    if second_path is not None:
        az2, g2, delay = second_path
        rel = freqs - grid.center_frequency
        echo = np.stack([steering_vector(geometry, az2, f) for f in freqs], axis=-1)
        h = h + g2 * echo * np.exp(-2j * np.pi * rel * delay)
    return h


def reference_channel(path_phase: np.ndarray, n_subcarriers: int) -> np.ndarray:
    """Unit-gain distribution network channel, lagging by ``path_phase`` per antenna."""
    return np.repeat(np.exp(-1j * np.asarray(path_phase))[:, None], n_subcarriers, axis=1)


def relock_event(state: ReceiverState, rng: np.random.Generator, sampler: Callable = uniform_phases) -> ReceiverState:
    """Every PLL re-acquires lock: all ``theta_m`` are redrawn, nothing else changes."""
    return ReceiverState(
        pll_phase=np.asarray(sampler(rng, state.n_receivers), dtype=float),
        path_phase=state.path_phase,
        gain=state.gain,
        relock_count=state.relock_count + 1,
    )


def quantize(x: np.ndarray, bits: int, full_scale: float) -> np.ndarray:
    step = full_scale / 2 ** (bits - 1)
    lim = full_scale - step
    re = np.clip(np.round(x.real / step) * step, -full_scale, lim)
    im = np.clip(np.round(x.imag / step) * step, -full_scale, lim)
    return re + 1j * im


def emit_frame(
    state: ReceiverState,
    channel: np.ndarray,
    config: ImpairmentConfig,
    frame_kind: FrameKind,
    t: int,
    rng: np.random.Generator,
    *,
    source_mac: bytes = OTA_MAC,
    sequence_number: int = 0,
    tx_time_us: int = 0,
    timestamp_jitter_us: int = 0,
    tx_phase: float | None = None,
) -> tuple[list[CsiReport], float, dict]:
    """Impair one transmitted frame and return the surviving reports.

    ``channel`` is the (M, N) propagation channel for this frame kind (OTA
    or reference network).  Returns ``(reports, tx_phase, rx_timestamps)``.
    The random draws happen in a fixed order so equal seeds give equal
    streams.
    """
    m, n = channel.shape
    phi = rng.uniform(-np.pi, np.pi) if tx_phase is None else tx_phase
    keep = rng.random(m) >= config.frame_loss_probability
    rot = state.gain * np.exp(1j * (phi + state.pll_phase))
    r = channel * rot[:, None]
    if config.noise_variance > 0:
        s = np.sqrt(config.noise_variance / 2.0)
        r = r + s * (rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n)))
    if config.quantization_bits:
        r = quantize(r, config.quantization_bits, config.quantization_full_scale)
    if timestamp_jitter_us:
        jitter = rng.integers(-timestamp_jitter_us, timestamp_jitter_us + 1, size=m)
    else:
        jitter = np.zeros(m, dtype=int)
    r = r.astype(np.complex64)
    power = np.mean(np.abs(r) ** 2, axis=1)
    reports = []
    stamps = {}
    seq = sequence_number % 4096
    for i in np.flatnonzero(keep).tolist():
        ts = int(tx_time_us + jitter[i])
        rssi = int(np.clip(np.round(10 * np.log10(power[i] + 1e-30)) - 40, -128, 127))
        reports.append(CsiReport(i, source_mac, seq, ts, frame_kind, rssi, r[i]))
        stamps[i] = ts
    return reports, float(phi), stamps


class ArraySimulator:
    """Generates a frame-by-frame stream of reports with ground truth.

    Frame slots are ``frame_interval_us`` apart.  With ``reference_every=k``
    one reference frame is sent before every ``k`` over-the-air frames
    (slot 0 is a reference); ``k=0`` disables the reference signal.  PLL
    relocks follow a Poisson process of rate ``impairments.pll_relock_rate``
    plus any times listed in ``relock_times_us``.
    """

    def __init__(
        self,
        board: BoardDescription | None = None,
        impairments: ImpairmentConfig | None = None,
        *,
        seed: int = 0,
        azimuth: float = 0.0,
        complex_gain: complex = 1.0,
        gains: np.ndarray | None = None,
        frame_interval_us: int = 10_000,
        reference_every: int = 10,
        timestamp_jitter_us: int = 2,
        start_time_us: int = 1000,
        relock_times_us: Iterable[int] = (),
        pll_sampler: Callable = uniform_phases,
        initial_pll_phase: np.ndarray | None = None,
        second_path: tuple | None = None,
        source_mac: bytes = OTA_MAC,
        reference_mac: bytes = REFERENCE_MAC,
    ):
        self.board = board or BoardDescription()
        self.config = impairments or ImpairmentConfig()
        self.rng = np.random.default_rng(seed)
        self.azimuth = azimuth
        self.complex_gain = complex(complex_gain)
        self.frame_interval_us = int(frame_interval_us)
        self.start_time_us = int(start_time_us)  # keeps jittered timestamps non-negative
        self.reference_every = reference_every
        self.timestamp_jitter_us = timestamp_jitter_us
        self.second_path = second_path
        self.source_mac = source_mac
        self.reference_mac = reference_mac
        self.pll_sampler = pll_sampler
        m = self.board.n_antennas
        theta = pll_sampler(self.rng, m) if initial_pll_phase is None else np.asarray(initial_pll_phase, float)
        self.state = ReceiverState(
            pll_phase=np.asarray(theta, dtype=float),
            path_phase=self.board.path_phase.copy(),
            gain=np.ones(m) if gains is None else np.asarray(gains, dtype=float),
        )
        self.frame_index = 0
        self._seq = {source_mac: 0, reference_mac: 0}
        self._scheduled = sorted(int(x) for x in relock_times_us)
        self._next_poisson = self._draw_poisson(0.0)
        self.relock_log: list[int] = []
        self._ota_cache = None
        self._ref_cache = reference_channel(self.state.path_phase, self.board.grid.n_subcarriers)

    @property
    def geometry(self) -> ArrayGeometry:
        return self.board.geometry

    @property
    def grid(self) -> SubcarrierGrid:
        return self.board.grid

    def _draw_poisson(self, after_us: float) -> float:
        rate = self.config.pll_relock_rate
        if rate <= 0:
            return np.inf
        return after_us + self.rng.exponential(1e6 / rate)

    def ota_channel(self) -> np.ndarray:
        key = (self.azimuth, self.complex_gain, self.second_path)
        if self._ota_cache is None or self._ota_cache[0] != key:
            h = synthesize_ota_channel(self.geometry, self.grid, self.azimuth, self.complex_gain, self.second_path)
            self._ota_cache = (key, h)
        return self._ota_cache[1]

    def _apply_relocks(self, now_us: int):
        while True:
            nxt_sched = self._scheduled[0] if self._scheduled else np.inf
            nxt = min(nxt_sched, self._next_poisson)
            if nxt > now_us:
                return
            if nxt == nxt_sched:
                self._scheduled.pop(0)
            else:
                self._next_poisson = self._draw_poisson(self._next_poisson)
            self.state = relock_event(self.state, self.rng, self.pll_sampler)
            self.relock_log.append(int(nxt))

    def frame_kind_of(self, t: int) -> FrameKind:
        k = self.reference_every
        if k and t % (k + 1) == 0:
            return FrameKind.REFERENCE
        return FrameKind.OTA

    def step(self) -> tuple[list[CsiReport], GroundTruth]:
        t = self.frame_index
        tx_time = self.start_time_us + t * self.frame_interval_us
        self._apply_relocks(tx_time)
        kind = self.frame_kind_of(t)
        if kind is FrameKind.REFERENCE:
            mac, channel, az, gain = self.reference_mac, self._ref_cache, None, 1.0 + 0j
        else:
            mac, channel, az, gain = self.source_mac, self.ota_channel(), self.azimuth, self.complex_gain
        seq = self._seq[mac]
        self._seq[mac] = (seq + 1) % 4096
        reports, phi, stamps = emit_frame(
            self.state, channel, self.config, kind, t, self.rng,
            source_mac=mac, sequence_number=seq, tx_time_us=tx_time,
            timestamp_jitter_us=self.timestamp_jitter_us,
        )
        truth = GroundTruth(
            t, kind, mac, seq, tx_time, az, gain, phi,
            self.state.pll_phase.copy(), self.state.relock_count, stamps, channel,
        )
        self.frame_index += 1
        return reports, truth

    def frames(self, n_frames: int) -> Iterator[tuple[list[CsiReport], GroundTruth]]:
        for _ in range(n_frames):
            yield self.step()


def arrival_order(
    frames: Iterable[tuple[list[CsiReport], GroundTruth]],
    rng: np.random.Generator,
    delivery_jitter_us: int = 1000,
    truth_sink: list | None = None,
) -> Iterator[CsiReport]:
    """Interleave reports as a host would receive them.

    Each report is delayed by a uniform latency in ``[0, delivery_jitter_us]``;
    reports of one receiver keep their order.  Ground truth objects are
    appended to ``truth_sink`` as frames are consumed.
    """
    heap: list = []
    last_arrival: dict[int, float] = {}
    counter = 0
    for reports, truth in frames:
        if truth_sink is not None:
            truth_sink.append(truth)
        horizon = truth.tx_time_us - 1000
        while heap and heap[0][0] < horizon:
            yield heapq.heappop(heap)[2]
        for rep in reports:
            arr = rep.rx_timestamp + (rng.uniform(0, delivery_jitter_us) if delivery_jitter_us else 0.0)
            arr = max(arr, last_arrival.get(rep.receiver_id, -np.inf))
            last_arrival[rep.receiver_id] = arr
            heapq.heappush(heap, (arr, counter, rep))
            counter += 1
    while heap:
        yield heapq.heappop(heap)[2]
