"""Group per-receiver reports that belong to the same transmitted frame."""

from __future__ import annotations

import heapq
import itertools
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .wire import CsiReport, FrameKind

DEFAULT_WINDOW_US = 500
DEFAULT_FLUSH_HORIZON_US = 10_000


@dataclass(eq=False)
class FrameCluster:
    """Reports from several receivers matched to one transmitted frame."""

    cluster_id: int
    source_mac: bytes
    sequence_number: int
    frame_kind: FrameKind
    reports: dict = field(default_factory=dict)  # receiver_id -> CsiReport
    cluster_timestamp: int = 0
    latest_timestamp: int = 0

    @property
    def receivers(self) -> list[int]:
        return sorted(self.reports)

    def __len__(self):
        return len(self.reports)


class FrameClusterer:
    """Streaming clusterer.

    Two reports join one cluster iff they share (source MAC, sequence number,
    frame kind) and their timestamps are within ``window`` microseconds.  A
    cluster is released once every receiver that is not yet a member has
    reported a timestamp beyond ``cluster_timestamp + flush_horizon`` (so no
    member can still arrive, given in-order delivery per receiver), or when
    the stream ends.  ``stall_timeout`` additionally releases clusters once
    any receiver is that far past the horizon, which bounds memory when a
    receiver goes quiet; ``None`` waits indefinitely.

    Clusters come out in ``cluster_timestamp`` order.  Reports that would
    reopen time already released are counted under ``discards['late']``;
    duplicate receivers within one cluster under ``discards['duplicate']``.
    """

    def __init__(
        self,
        n_receivers: int,
        window: int = DEFAULT_WINDOW_US,
        flush_horizon: int = DEFAULT_FLUSH_HORIZON_US,
        stall_timeout: int | None = DEFAULT_FLUSH_HORIZON_US,
    ):
        self.n_receivers = n_receivers
        self.window = window
        self.flush_horizon = flush_horizon
        self.stall_timeout = stall_timeout
        self.discards: Counter = Counter()
        self.reports_in = 0
        self.emitted = 0
        self._open: dict[tuple, list[FrameCluster]] = {}
        self._heap: list = []  # (cluster_timestamp, cluster_id) of open clusters
        self._last_ts = [None] * n_receivers
        self._max_ts = None
        self._released_until = None
        self._ids = itertools.count()
        self._n_buffered = 0
        self.max_buffered = 0
        # recently released clusters, so stragglers for them count as late
        self._recent: dict[tuple, FrameCluster] = {}
        self._recent_order: deque = deque()
        self._blocked = None  # head cluster the last release stopped at

    @property
    def buffered_reports(self) -> int:
        return self._n_buffered

    def push(self, report: CsiReport) -> list[FrameCluster]:
        self.reports_in += 1
        rx = report.receiver_id
        ts = report.rx_timestamp
        if not 0 <= rx < self.n_receivers:
            self.discards["bad-receiver"] += 1
            return []
        released = self._released_until
        if released is not None and ts < released:
            self.discards["late"] += 1
            return []
        key = (report.source_mac, report.sequence_number, report.frame_kind)
        window = self.window
        gone = self._recent.get(key)
        if gone is not None and ts - gone.cluster_timestamp <= window and gone.latest_timestamp - ts <= window:
            self.discards["late"] += 1
            return []
        target = None
        bucket = self._open.get(key)
        if bucket is not None:
            for cl in bucket:
                lo = cl.cluster_timestamp if cl.cluster_timestamp < ts else ts
                hi = cl.latest_timestamp if cl.latest_timestamp > ts else ts
                if hi - lo <= window:
                    target = cl
                    break
        if target is None:
            target = FrameCluster(
                next(self._ids), report.source_mac, report.sequence_number, report.frame_kind,
                {rx: report}, ts, ts,
            )
            if bucket is None:
                self._open[key] = [target]
            else:
                bucket.append(target)
            heapq.heappush(self._heap, (ts, target.cluster_id, target))
            self._n_buffered += 1
        elif rx in target.reports:
            self.discards["duplicate"] += 1
        else:
            target.reports[rx] = report
            self._n_buffered += 1
            if ts < target.cluster_timestamp:
                target.cluster_timestamp = ts
                heapq.heappush(self._heap, (ts, target.cluster_id, target))
            elif ts > target.latest_timestamp:
                target.latest_timestamp = ts
        if self._n_buffered > self.max_buffered:
            self.max_buffered = self._n_buffered
        last = self._last_ts
        prev = last[rx]
        if prev is None or ts > prev:
            last[rx] = ts
        if self._max_ts is None or ts > self._max_ts:
            self._max_ts = ts
        heap = self._heap
        if heap:
            head_ts, _, head = heap[0]
            cutoff = head_ts + self.flush_horizon
            if self._max_ts <= cutoff:
                return []  # nothing can be ready yet
            if head is self._blocked and head_ts == head.cluster_timestamp and head is not target:
                # the head still waits unless this report moved a receiver past its cutoff
                stalled = self.stall_timeout is not None and self._max_ts > cutoff + self.stall_timeout
                if not stalled and (ts <= cutoff or (prev is not None and prev > cutoff)):
                    return []
        return self._release(final=False)

    def _ready(self, cl: FrameCluster) -> bool:
        cutoff = cl.cluster_timestamp + self.flush_horizon
        if self.stall_timeout is not None and self._max_ts > cutoff + self.stall_timeout:
            return True
        members = cl.reports
        for m, last in enumerate(self._last_ts):
            if m in members:
                continue
            if last is None or last <= cutoff:
                return False
        return True

    def _release(self, final: bool) -> list[FrameCluster]:
        out = []
        heap = self._heap
        while heap:
            ts, cid, cl = heap[0]
            if ts != cl.cluster_timestamp:
                heapq.heappop(heap)  # stale entry
                continue
            if not final and self._max_ts <= ts + self.flush_horizon:
                break
            if not final and not self._ready(cl):
                self._blocked = cl
                break
            heapq.heappop(heap)
            key = (cl.source_mac, cl.sequence_number, cl.frame_kind)
            bucket = self._open[key]
            bucket.remove(cl)
            if not bucket:
                del self._open[key]
            self._n_buffered -= len(cl.reports)
            self._released_until = ts if self._released_until is None else max(self._released_until, ts)
            self._recent[key] = cl
            self._recent_order.append(cl)
            cl.cluster_id = self.emitted
            self.emitted += 1
            out.append(cl)
        if out:
            horizon = self._released_until - 2 * self.window
            order = self._recent_order
            while order and order[0].cluster_timestamp < horizon:
                old = order.popleft()
                key = (old.source_mac, old.sequence_number, old.frame_kind)
                if self._recent.get(key) is old:
                    del self._recent[key]
        return out

    def flush(self) -> list[FrameCluster]:
        return self._release(final=True)


def cluster_reports(
    reports: Iterable[CsiReport],
    n_receivers: int,
    window: int = DEFAULT_WINDOW_US,
    flush_horizon: int = DEFAULT_FLUSH_HORIZON_US,
    stall_timeout: int | None = DEFAULT_FLUSH_HORIZON_US,
    clusterer: FrameClusterer | None = None,
) -> Iterator[FrameCluster]:
    """Cluster a report stream; see :class:`FrameClusterer`."""
    c = clusterer or FrameClusterer(n_receivers, window, flush_horizon, stall_timeout)
    for rep in reports:
        yield from c.push(rep)
    yield from c.flush()
