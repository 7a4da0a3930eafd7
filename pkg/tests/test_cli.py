import csv
import json
import subprocess
import sys
import tracemalloc

import numpy as np

from coherentcsi.board import BoardDescription
from coherentcsi.cli import EXIT_DATA, EXIT_IO, EXIT_OK, EXIT_USAGE, RunConfig, Scenario, Segment, main
from coherentcsi.ingest import FrameClusterer, StreamParser, read_chunks
from coherentcsi.pipeline import estimate_lines, process_reports


def _simulate(tmp_path, name="s.bin", *args):
    out = tmp_path / name
    assert main(["simulate", "--out", str(out), *args]) == EXIT_OK
    return out


def _records(path):
    parser = StreamParser(52)
    reps = []
    for chunk in read_chunks(path):
        reps += parser.feed(chunk)
    reps += parser.close()
    return reps, parser


def test_simulate_deterministic(tmp_path):
    a = _simulate(tmp_path, "a.bin", "--seed", "3", "--frames", "200", "--loss", "0.2", "--noise-var", "0.01", "--relock-rate", "2")
    b = _simulate(tmp_path, "b.bin", "--seed", "3", "--frames", "200", "--loss", "0.2", "--noise-var", "0.01", "--relock-rate", "2")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.bin.truth.jsonl").read_bytes() == (tmp_path / "b.bin.truth.jsonl").read_bytes()
    c = _simulate(tmp_path, "c.bin", "--seed", "4", "--frames", "200", "--loss", "0.2")
    assert a.read_bytes() != c.read_bytes()


def test_lossless_record_count(tmp_path):
    out = _simulate(tmp_path, "s.bin", "--frames", "150")
    reps, parser = _records(out)
    assert len(reps) == 150 * 8 and parser.corruption_events == 0
    board = BoardDescription.load(tmp_path / "s.bin.board.json")
    np.testing.assert_array_equal(board.path_phase, BoardDescription().path_phase)


def test_sidecar_join_is_bijective(tmp_path):
    out = _simulate(tmp_path, "s.bin", "--frames", "400", "--loss", "0.3", "--seed", "1")
    truths = [json.loads(line) for line in open(tmp_path / "s.bin.truth.jsonl")]
    assert [t["frame_index"] for t in truths] == list(range(400))
    key_to_frame = {}
    for t in truths:
        for rx, ts in t["delivered"].items():
            key_to_frame[(t["source_mac"].replace(":", ""), t["sequence_number"], t["frame_kind"], int(rx), ts)] = t["frame_index"]
    reps, _ = _records(out)
    clusterer = FrameClusterer(8)
    clusters = []
    for r in reps:
        clusters += clusterer.push(r)
    clusters += clusterer.flush()
    frame_of_cluster = []
    for cl in clusters:
        frames = {key_to_frame[(r.source_mac.hex(), r.sequence_number, r.frame_kind.name, rx, r.rx_timestamp)]
                  for rx, r in cl.reports.items()}
        assert len(frames) == 1
        frame_of_cluster.append(frames.pop())
    delivered = {t["frame_index"] for t in truths if t["delivered"]}
    assert len(frame_of_cluster) == len(set(frame_of_cluster)) == len(delivered)
    assert set(frame_of_cluster) == delivered


def test_jsonl_stream_matches_binary(tmp_path):
    b = _simulate(tmp_path, "s.bin", "--frames", "120", "--noise-var", "0.01")
    j = _simulate(tmp_path, "s.jsonl", "--frames", "120", "--noise-var", "0.01", "--format", "jsonl")
    assert main(["process", "--in", str(b), "--out", str(tmp_path / "b.out")]) == EXIT_OK
    assert main(["process", "--in", str(j), "--out", str(tmp_path / "j.out")]) == EXIT_OK
    assert (tmp_path / "b.out").read_text() == (tmp_path / "j.out").read_text()


def test_process_lossless_noiseless_all_ok(tmp_path):
    out = _simulate(tmp_path, "s.bin", "--frames", "330", "--azimuth-deg", "20")
    res = tmp_path / "est.jsonl"
    assert main(["process", "--in", str(out), "--out", str(res)]) == EXIT_OK
    lines = [json.loads(line) for line in open(res)]
    assert len(lines) == 3 * 52 * 8
    assert all(d["flags"] == ["ok"] for d in lines)
    assert set(lines[0]) == {"cluster_window", "subcarrier", "antenna", "re", "im", "flags"}


def test_process_csv(tmp_path):
    out = _simulate(tmp_path, "s.bin", "--frames", "120")
    res = tmp_path / "est.csv"
    assert main(["process", "--in", str(out), "--out", str(res), "--format", "csv"]) == EXIT_OK
    rows = list(csv.DictReader(open(res)))
    assert len(rows) == 52 * 8 and rows[0]["flags"] == "ok"


def test_corrupted_byte_counted_once(tmp_path, capsys):
    out = _simulate(tmp_path, "s.bin", "--frames", "220")
    blob = bytearray(out.read_bytes())
    blob[len(blob) // 2] ^= 0x5A
    out.write_bytes(bytes(blob))
    assert main(["process", "--in", str(out), "--out", str(tmp_path / "e.jsonl")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary["corruption_events"] == 1
    assert summary["records"] == 220 * 8 - 1


def test_file_output_matches_in_process(tmp_path):
    out = _simulate(tmp_path, "s.bin", "--frames", "440", "--loss", "0.2", "--noise-var", "0.01", "--azimuth-deg", "-15", "--seed", "5")
    res = tmp_path / "est.jsonl"
    assert main(["process", "--in", str(out), "--out", str(res)]) == EXIT_OK
    reps, _ = _records(out)
    windows, _, _ = process_reports(reps, BoardDescription.load(tmp_path / "s.bin.board.json"))
    idx = BoardDescription().grid.subcarrier_indices
    expected = [json.loads(line) for w in windows for line in estimate_lines(w, idx)]
    got = [json.loads(line) for line in open(res)]
    assert len(got) == len(expected) > 0
    for a, b in zip(got, expected):
        assert (a["cluster_window"], a["subcarrier"], a["antenna"], a["flags"]) == (
            b["cluster_window"], b["subcarrier"], b["antenna"], b["flags"])
        assert abs(complex(a["re"], a["im"]) - complex(b["re"], b["im"])) <= 1e-9


def _three_placements(tmp_path, frames=330):
    scen = Scenario([Segment("left", -30, frames), Segment("front", 0, frames), Segment("right", 30, frames)])
    path = tmp_path / "scen.json"
    scen.save(path)
    return path


def test_aoa_three_placements_ordered(tmp_path, capsys):
    scen = _three_placements(tmp_path)
    out = _simulate(tmp_path, "s.bin", "--scenario", str(scen), "--noise-var", "0.01", "--loss", "0.1", "--seed", "2")
    spec = tmp_path / "spec.csv"
    assert main(["aoa", "--in", str(out), "--scenario", str(scen), "--out", str(spec)]) == EXIT_OK
    peaks = list(csv.DictReader(open(str(spec) + ".peaks.csv")))
    assert [p["label"] for p in peaks] == ["left", "front", "right"]
    deg = [float(p["peak_deg"]) for p in peaks]
    assert deg == sorted(deg)
    for d, truth in zip(deg, (-30, 0, 30)):
        assert abs(d - truth) <= 2
    rows = list(csv.DictReader(open(spec)))
    assert len(rows) == 3 * 181


def test_stability_static_below_threshold(tmp_path, capsys):
    out = _simulate(tmp_path, "s.bin", "--frames", "2200", "--noise-var", "0.01", "--relock-rate", "0.5", "--seed", "7")
    series = tmp_path / "phase.csv"
    assert main(["stability", "--in", str(out), "--out", str(series)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert summary["phase_source"] == "calibrated"
    assert summary["max_circular_std_rad"] < 0.1
    report = list(csv.DictReader(open(str(series) + ".report.csv")))
    assert len(report) == 8 and all(float(r["circular_std_rad"]) < 0.1 for r in report)


def test_stability_detects_relocation(tmp_path, capsys):
    scen = tmp_path / "move.json"
    Scenario([Segment("before", 0, 1100), Segment("after", 20, 1100)]).save(scen)
    out = _simulate(tmp_path, "s.bin", "--scenario", str(scen), "--noise-var", "0.01", "--seed", "8")
    assert main(["stability", "--in", str(out), "--scenario", str(scen), "--out", str(tmp_path / "p.csv"),
                 "--window", "50"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    steps = np.array(summary["segment_steps_rad"][0])
    # antenna 4 shares antenna 0's column, so an azimuth move leaves its phase difference unchanged
    assert np.all(steps[[1, 2, 3, 5, 6, 7]] > 0.5)


def test_empty_input_exit_code(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    assert main(["process", "--in", str(empty)]) == EXIT_IO
    assert main(["process", "--in", str(tmp_path / "missing.bin")]) == EXIT_IO


def test_garbage_input_exit_code(tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(bytes(range(256)) * 10)
    assert main(["process", "--in", str(junk), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["simulate"]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path / "x"), "--loss", "1.5"]) == EXIT_USAGE
    assert main(["process", "--in", "x", "--window", "0"]) == EXIT_USAGE


def test_bad_board_file(tmp_path):
    out = _simulate(tmp_path, "s.bin", "--frames", "20")
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["process", "--in", str(out), "--board", str(bad)]) == EXIT_DATA
    assert main(["process", "--in", str(out), "--board", str(tmp_path / "nope.json")]) == EXIT_IO


def test_run_config_serializable():
    cfg = RunConfig("simulate", seed=4, frames=10)
    d = json.loads(cfg.to_json())
    assert RunConfig(**d) == cfg


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "coherentcsi", "simulate", "--out", str(tmp_path / "m.bin"), "--frames", "5"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stderr.strip().splitlines()[-1])["records"] == 40


def _peak_memory(path, out):
    tracemalloc.start()
    try:
        assert main(["process", "--in", str(path), "--out", str(out)]) == EXIT_OK
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def test_process_memory_independent_of_length(tmp_path):
    short = _simulate(tmp_path, "short.bin", "--frames", "1100", "--loss", "0.2")
    long = _simulate(tmp_path, "long.bin", "--frames", "5500", "--loss", "0.2")
    p_short = _peak_memory(short, tmp_path / "a.jsonl")
    p_long = _peak_memory(long, tmp_path / "b.jsonl")
    # five times the input may not grow peak memory by more than a quarter
    assert p_long < 1.25 * p_short
