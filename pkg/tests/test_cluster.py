import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from coherentcsi.ingest import CsiReport, FrameClusterer, FrameKind, cluster_reports
from coherentcsi.simulator import ArraySimulator, ImpairmentConfig

from _util import simulate_clusters

MAC = bytes(6)


def _truth_index(truths):
    """(mac, seq, kind, rx, ts) -> frame index, from the ground-truth sidecar."""
    idx = {}
    for tr in truths:
        for rx, ts in tr.rx_timestamps.items():
            idx[(tr.source_mac, tr.sequence_number, int(tr.frame_kind), rx, ts)] = tr.frame_index
    return idx


def _check_against_truth(clusters, truths):
    idx = _truth_index(truths)
    seen = set()
    for cl in clusters:
        frames = {idx[(r.source_mac, r.sequence_number, int(r.frame_kind), rx, r.rx_timestamp)] for rx, r in cl.reports.items()}
        assert len(frames) == 1, "cross-frame contamination"
        f = frames.pop()
        assert f not in seen, "frame split across clusters"
        seen.add(f)
        assert sorted(cl.reports) == truths[f].delivered
    delivered = {tr.frame_index for tr in truths if tr.rx_timestamps}
    assert seen == delivered


def test_lossless_clusters_are_full():
    clusters, truths, _, c = simulate_clusters(500, seed=1)
    assert len(clusters) == 500
    assert all(len(cl) == 8 for cl in clusters)
    assert not c.discards
    _check_against_truth(clusters, truths)


def test_lossy_clusters_match_sidecar():
    clusters, truths, _, c = simulate_clusters(2000, seed=2, loss=0.3, reference_every=10)
    _check_against_truth(clusters, truths)
    assert not c.discards


def test_emission_in_timestamp_order_and_ids():
    clusters, _, _, _ = simulate_clusters(300, seed=3, loss=0.2)
    ts = [cl.cluster_timestamp for cl in clusters]
    assert ts == sorted(ts)
    assert [cl.cluster_id for cl in clusters] == list(range(len(clusters)))


def test_cluster_invariants():
    clusters, _, _, _ = simulate_clusters(300, seed=4, loss=0.3, reference_every=5)
    for cl in clusters:
        reps = list(cl.reports.values())
        assert len({r.frame_key for r in reps}) == 1
        stamps = [r.rx_timestamp for r in reps]
        assert max(stamps) - min(stamps) <= 500
        assert cl.cluster_timestamp == min(stamps)
        assert all(rx == r.receiver_id for rx, r in cl.reports.items())


def test_sequence_wraparound_separates_frames():
    clusters, truths, _, _ = simulate_clusters(4200, seed=5, jitter_us=0)
    assert truths[0].sequence_number == truths[4096].sequence_number
    assert len(clusters) == 4200
    _check_against_truth(clusters, truths)


def _rep(rx, seq, ts, kind=FrameKind.OTA):
    return CsiReport(rx, MAC, seq, ts, kind, 0, np.zeros(4, np.complex64))


def test_same_seq_outside_window_not_merged():
    c = FrameClusterer(2, window=500)
    out = c.push(_rep(0, 7, 1000)) + c.push(_rep(1, 7, 1600)) + c.flush()
    assert [len(x) for x in out] == [1, 1]


def test_kind_is_part_of_identity():
    out = list(cluster_reports([_rep(0, 1, 0), _rep(1, 1, 0, FrameKind.REFERENCE)], 2))
    assert len(out) == 2


def test_duplicate_receiver_keeps_first():
    c = FrameClusterer(2)
    a, b = _rep(0, 1, 100), _rep(0, 1, 120)
    out = c.push(a) + c.push(b) + c.flush()
    assert len(out) == 1 and out[0].reports[0] is a
    assert c.discards["duplicate"] == 1


def test_late_report_counted():
    c = FrameClusterer(2, flush_horizon=1000, stall_timeout=None)
    out = c.push(_rep(0, 1, 0)) + c.push(_rep(1, 2, 5000)) + c.push(_rep(0, 3, 5000))
    assert [len(x) for x in out] == [1]
    out += c.push(_rep(1, 1, 10))  # older than what was already released
    assert c.discards["late"] == 1


def test_bad_receiver_id():
    c = FrameClusterer(2)
    assert c.push(_rep(5, 1, 0)) == []
    assert c.discards["bad-receiver"] == 1


def test_every_report_accounted_for():
    rng = np.random.default_rng(6)
    reps = []
    for f in range(200):
        for rx in range(4):
            if rng.random() < 0.7:
                reps.append(_rep(rx, f % 4096, f * 1000 + int(rng.integers(0, 3))))
    # inject duplicates
    reps += [reps[10], reps[50]]
    reps.sort(key=lambda r: r.rx_timestamp)
    c = FrameClusterer(4)
    out = list(cluster_reports(reps, 4, clusterer=c))
    assert sum(len(x) for x in out) + sum(c.discards.values()) == len(reps)


def _interleave(streams, rng):
    """Random merge that keeps each per-receiver stream in order."""
    pos = [0] * len(streams)
    out = []
    while True:
        live = [i for i in range(len(streams)) if pos[i] < len(streams[i])]
        if not live:
            return out
        i = live[int(rng.integers(len(live)))]
        out.append(streams[i][pos[i]])
        pos[i] += 1


def _membership(clusters):
    return sorted(tuple(sorted((rx, r.rx_timestamp) for rx, r in cl.reports.items())) for cl in clusters)


@given(st.integers(0, 2**32 - 1), st.floats(0, 0.6))
def test_permutation_of_arrival_invariance(seed, loss):
    sim = ArraySimulator(impairments=ImpairmentConfig(frame_loss_probability=loss), seed=seed % 1000, reference_every=3)
    per_rx = [[] for _ in range(8)]
    for reps, _ in sim.frames(40):
        for r in reps:
            per_rx[r.receiver_id].append(r)
    base = _membership(cluster_reports(sorted(sum(per_rx, []), key=lambda r: r.rx_timestamp), 8, stall_timeout=None))
    rng = np.random.default_rng(seed)
    mixed = _membership(cluster_reports(_interleave(per_rx, rng), 8, stall_timeout=None))
    assert mixed == base


def test_memory_bound_in_order_delivery():
    """Frames every 1 ms, horizon 10 ms: buffer stays within M * (horizon / spacing) plus boundary frames."""
    m, spacing, horizon = 8, 1000, 10_000
    c = FrameClusterer(m, flush_horizon=horizon)
    for f in range(2000):
        for rx in range(m):
            c.push(_rep(rx, f % 4096, f * spacing))
    assert c.max_buffered <= m * (horizon // spacing + 2)
    c.flush()
    assert c.buffered_reports == 0


def test_stall_timeout_bounds_memory_when_a_receiver_goes_quiet():
    m = 4
    c = FrameClusterer(m, flush_horizon=10_000, stall_timeout=10_000)
    stuck = FrameClusterer(m, flush_horizon=10_000, stall_timeout=None)
    for f in range(2000):
        for rx in range(m - 1):  # receiver 3 never reports
            c.push(_rep(rx, f % 4096, f * 1000))
            stuck.push(_rep(rx, f % 4096, f * 1000))
    assert c.max_buffered <= (m - 1) * 22
    assert stuck.buffered_reports == 2000 * (m - 1)
