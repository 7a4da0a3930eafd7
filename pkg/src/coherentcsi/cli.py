"""Command-line entry point: ``coherentcsi {simulate,process,aoa,stability}``.

Exit codes: 0 ok, 1 usage, 2 I/O (including empty input), 3 data integrity
(input that yields no valid records).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aoa import PhaseSeries, antenna_phases, music_spectrum, phase_stability_report, time_boundaries, wrap
from .board import BoardDescription
from .ingest import StreamParser, read_chunks, report_from_json, serialize_report, report_to_json
from .ingest.wire import MAGIC
from .pipeline import Pipeline, PipelineConfig, make_clusterer
from .simulator import ArraySimulator, ImpairmentConfig, arrival_order

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("coherentcsi")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class Segment:
    label: str
    azimuth_deg: float
    frames: int


@dataclass
class Scenario:
    """Placement schedule: the transmitter sits at each azimuth for ``frames`` slots."""

    segments: list = field(default_factory=list)
    frame_interval_us: int = 10_000

    @classmethod
    def load(cls, path) -> "Scenario":
        d = json.loads(Path(path).read_text())
        segs = [Segment(str(s.get("label", i)), float(s["azimuth_deg"]), int(s["frames"])) for i, s in enumerate(d["segments"])]
        return cls(segs, int(d.get("frame_interval_us", 10_000)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"frame_interval_us": self.frame_interval_us,
                                          "segments": [asdict(s) for s in self.segments]}, indent=2) + "\n")

    @property
    def total_frames(self) -> int:
        return sum(s.frames for s in self.segments)

    def time_ranges(self) -> list[tuple[str, int, int]]:
        out, t = [], 0
        for s in self.segments:
            end = t + s.frames * self.frame_interval_us
            out.append((s.label, t, end))
            t = end
        return out


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    frames: int = 1000
    azimuth_deg: float = 0.0
    noise_var: float | None = None
    loss: float = 0.0
    relock_rate: float = 0.0
    window: int = 100
    board: str | None = None
    format: str = "jsonl"
    out: str | None = None
    input: str | None = None
    truth: str | None = None
    scenario: str | None = None
    reference_every: int = 10
    frame_interval_us: int = 10_000
    delivery_jitter_us: int = 1000
    eig_method: str = "lapack"
    peaks: str | None = None
    report: str | None = None
    raw: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# -- simulate --------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> dict:
    if not cfg.out:
        raise CliError("simulate needs --out", EXIT_USAGE)
    board = BoardDescription()
    scenario = Scenario.load(cfg.scenario) if cfg.scenario else None
    interval = scenario.frame_interval_us if scenario else cfg.frame_interval_us
    imp = ImpairmentConfig(
        noise_variance=cfg.noise_var or 0.0,
        frame_loss_probability=cfg.loss,
        pll_relock_rate=cfg.relock_rate,
    )
    sim = ArraySimulator(
        board, imp, seed=cfg.seed, azimuth=np.radians(cfg.azimuth_deg),
        frame_interval_us=interval, reference_every=cfg.reference_every,
    )
    out = Path(cfg.out)
    truth_path = Path(cfg.truth) if cfg.truth else out.with_name(out.name + ".truth.jsonl")
    board_path = Path(cfg.board) if cfg.board else out.with_name(out.name + ".board.json")

    def frames():
        if scenario is None:
            yield from sim.frames(cfg.frames)
            return
        for seg in scenario.segments:
            sim.azimuth = np.radians(seg.azimuth_deg)
            yield from sim.frames(seg.frames)

    truths: list = []
    order_rng = np.random.default_rng([cfg.seed, 1])
    n_records = 0
    try:
        with open(out, "wb") as fh, open(truth_path, "w") as tf:
            binary = cfg.format != "jsonl"
            for rep in arrival_order(frames(), order_rng, cfg.delivery_jitter_us, truths):
                if binary:
                    fh.write(serialize_report(rep))
                else:
                    fh.write((report_to_json(rep) + "\n").encode())
                n_records += 1
                if len(truths) > 64:
                    for t in truths[:-8]:
                        tf.write(t.to_json() + "\n")
                    del truths[:-8]
            for t in truths:
                tf.write(t.to_json() + "\n")
        board.save(board_path)
    except OSError as exc:
        raise CliError(f"cannot write output: {exc}", EXIT_IO) from exc
    return {"records": n_records, "frames": sim.frame_index, "relocks": len(sim.relock_log),
            "stream": str(out), "truth": str(truth_path), "board": str(board_path)}


# -- shared input handling ------------------------------------------------------


def _load_board(cfg: RunConfig) -> BoardDescription:
    if cfg.board is None:
        guess = Path(cfg.input + ".board.json") if cfg.input else None
        if guess is not None and guess.exists():
            return BoardDescription.load(guess)
        return BoardDescription()
    try:
        return BoardDescription.load(cfg.board)
    except OSError as exc:
        raise CliError(f"cannot read board file: {exc}", EXIT_IO) from exc
    except (ValueError, KeyError) as exc:
        raise CliError(f"malformed board file: {exc}", EXIT_DATA) from exc


def _open_reports(cfg: RunConfig, board: BoardDescription):
    """Return (parser-like stats object, report iterator) for --in."""
    if not cfg.input:
        raise CliError("--in is required", EXIT_USAGE)
    path = Path(cfg.input)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            head = fh.read(2)
    except OSError as exc:
        raise CliError(f"cannot read input: {exc}", EXIT_IO) from exc
    if size == 0:
        raise CliError(f"input file {path} is empty", EXIT_IO)
    n = board.grid.n_subcarriers
    parser = StreamParser(n)
    if head[:1] == b"{":
        return parser, _jsonl_reports(path, parser, n)
    return parser, _binary_reports(path, parser)


def _binary_reports(path, parser):
    for chunk in read_chunks(path):
        yield from parser.feed(chunk)
    yield from parser.close()


def _jsonl_reports(path, parser, n):
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                rep = report_from_json(line, n)
            except (ValueError, KeyError) as exc:
                parser._fault(getattr(exc, "kind", "jsonl"))
                continue
            parser._ok()
            yield rep


def _pipeline_config(cfg: RunConfig) -> PipelineConfig:
    return PipelineConfig(window=cfg.window, noise_variance=cfg.noise_var, eig_method=cfg.eig_method)


def run_pipeline(cfg: RunConfig, board: BoardDescription, boundaries_us=()):
    """Yield window results for --in, cutting windows at ``boundaries_us``."""
    pcfg = _pipeline_config(cfg)
    parser, reports = _open_reports(cfg, board)
    clusterer = make_clusterer(board, pcfg)
    pipe = Pipeline(board, pcfg)
    cuts = sorted(boundaries_us)

    def gen():
        nxt = 0
        push = clusterer.push

        def feed(cl):
            nonlocal nxt
            while nxt < len(cuts) and cl.cluster_timestamp >= cuts[nxt]:
                nxt += 1
                yield from pipe.cut()
            yield from pipe.push(cl)

        for rep in reports:
            for cl in push(rep):
                yield from feed(cl)
        for cl in clusterer.flush():
            yield from feed(cl)
        yield from pipe.finish()

    return parser, clusterer, pipe, gen()


def _summary(parser, clusterer, pipe, extra=None) -> dict:
    d = {
        "records": parser.records,
        "corruption_events": parser.corruption_events,
        "parse_errors": dict(parser.errors),
        "clusters": clusterer.emitted,
        "cluster_discards": dict(clusterer.discards),
        "pipeline": dict(pipe.counters),
    }
    if extra:
        d.update(extra)
    return d


def _check_data(parser):
    if parser.records == 0:
        raise CliError("input contains no valid CSI records", EXIT_DATA)


# -- process ----------------------------------------------------------------------


def _format_line(w: int, k: int, m: int, z: complex, flags: str) -> str:
    return f'{{"cluster_window": {w}, "subcarrier": {k}, "antenna": {m}, "re": {z.real!r}, "im": {z.imag!r}, "flags": {flags}}}\n'


def cmd_process(cfg: RunConfig) -> dict:
    board = _load_board(cfg)
    parser, clusterer, pipe, windows = run_pipeline(cfg, board)
    idx = board.grid.subcarrier_indices
    out_path = cfg.out
    try:
        fh = open(out_path, "w") if out_path else sys.stdout
    except OSError as exc:
        raise CliError(f"cannot open output: {exc}", EXIT_IO) from exc
    n_windows = 0
    try:
        if cfg.format == "csv":
            fh.write("cluster_window,subcarrier,antenna,re,im,flags\n")
        for res in windows:
            est = res.calibrated
            h = est.h.tolist()
            w = res.index
            flag_cache: dict = {}
            lines = []
            for n, k in enumerate(idx):
                row = h[n]
                for m in range(len(row)):
                    fl = est.entry_flags(n, m)
                    key = tuple(fl)
                    if key not in flag_cache:
                        flag_cache[key] = json.dumps(fl) if cfg.format != "csv" else "|".join(fl)
                    z = row[m]
                    if cfg.format == "csv":
                        lines.append(f"{w},{k},{m},{z.real!r},{z.imag!r},{flag_cache[key]}\n")
                    else:
                        lines.append(_format_line(w, k, m, z, flag_cache[key]))
            fh.write("".join(lines))
            n_windows += 1
    finally:
        if fh is not sys.stdout:
            fh.close()
    _check_data(parser)
    return _summary(parser, clusterer, pipe, {"windows": n_windows})


# -- aoa --------------------------------------------------------------------------


def cmd_aoa(cfg: RunConfig) -> dict:
    board = _load_board(cfg)
    scenario = Scenario.load(cfg.scenario) if cfg.scenario else None
    ranges = scenario.time_ranges() if scenario else [("all", -np.inf, np.inf)]
    cuts = [a for _, a, _ in ranges[1:]]
    parser, clusterer, pipe, windows = run_pipeline(cfg, board, cuts)
    m = board.n_antennas
    acc = {label: [np.zeros((m, m), complex), 0] for label, _, _ in ranges}
    for res in windows:
        c = res.calibrated_covariance()
        if c is None or res.calibrated.extra_flags:
            continue
        mid = 0.5 * (res.start_us + res.end_us)
        for label, a, b in ranges:
            if a <= mid < b:
                acc[label][0] += c * res.n_ota
                acc[label][1] += res.n_ota
    _check_data(parser)
    spectra = []
    for label, _, _ in ranges:
        c, count = acc[label]
        if count == 0:
            log.warning("segment %s has no calibrated windows", label)
            continue
        spectra.append((label, music_spectrum(c / count, board.geometry)))
    peak_rows = []
    for label, sp in spectra:
        top = sp.peaks[0] if sp.peaks else None
        peak_rows.append({"label": label, "peak_deg": top.azimuth_deg if top else float("nan"),
                          "power_db": top.power_db if top else float("nan"),
                          "n_peaks": len(sp.peaks)})
    try:
        if cfg.out:
            with open(cfg.out, "w", newline="") as fh:
                if cfg.format == "csv":
                    w = csv.writer(fh)
                    w.writerow(["label", "azimuth_deg", "power_db"])
                    for label, sp in spectra:
                        w.writerows(sp.to_csv_rows(label))
                else:
                    for label, sp in spectra:
                        fh.write(sp.to_jsonl(label) + "\n")
        peaks_path = cfg.peaks or (cfg.out + ".peaks.csv" if cfg.out else None)
        if peaks_path:
            with open(peaks_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["label", "peak_deg", "power_db", "n_peaks"])
                w.writeheader()
                w.writerows(peak_rows)
    except OSError as exc:
        raise CliError(f"cannot write output: {exc}", EXIT_IO) from exc
    for row in peak_rows:
        print(f"{row['label']}\t{row['peak_deg']:.1f}\t{row['power_db']:.2f}")
    return _summary(parser, clusterer, pipe, {"peaks": peak_rows})


# -- stability ----------------------------------------------------------------------


def cmd_stability(cfg: RunConfig) -> dict:
    board = _load_board(cfg)
    scenario = Scenario.load(cfg.scenario) if cfg.scenario else None
    cut_times = [a for _, a, _ in scenario.time_ranges()[1:]] if scenario else []
    parser, clusterer, pipe, windows = run_pipeline(cfg, board, cut_times)
    raw_ts, raw, cal_ts, cal = [], [], [], []
    for res in windows:
        raw_ts.append(res.end_us)
        raw.append(antenna_phases(res.ota))
        if not res.calibrated.extra_flags:
            cal_ts.append(res.end_us)
            cal.append(antenna_phases(res.calibrated))
    _check_data(parser)
    # calibrated phases survive PLL relocks; raw phases are the fallback
    # for streams without a reference signal
    use_raw = cfg.raw or not cal_ts
    ts, phases = (raw_ts, raw) if use_raw else (cal_ts, cal)
    if len(ts) < 2:
        raise CliError("not enough windows for a phase series", EXIT_DATA)
    series = PhaseSeries.from_phases(np.array(ts), np.array(phases))
    report = phase_stability_report(series, time_boundaries(series.timestamps, cut_times))
    try:
        if cfg.out:
            if cfg.format == "csv":
                series.to_csv(cfg.out)
            else:
                with open(cfg.out, "w") as fh:
                    smooth = series.moving_average()
                    for t, p, s in zip(series.timestamps, series.phases, smooth):
                        fh.write(json.dumps({"timestamp_us": int(t), "phase": [float(x) for x in p],
                                             "phase_avg": [float(x) for x in s]}) + "\n")
        report_path = cfg.report or (cfg.out + ".report.csv" if cfg.out else None)
        if report_path:
            rows = report.to_rows()
            with open(report_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
    except OSError as exc:
        raise CliError(f"cannot write output: {exc}", EXIT_IO) from exc
    worst = float(np.max(report.std))
    steps = report.steps().tolist() if len(report.boundaries) > 1 else []
    print(f"segments={len(report.boundaries)} max_circular_std_rad={worst:.4f}")
    return _summary(parser, clusterer, pipe, {"phase_source": "raw" if use_raw else "calibrated",
                                              "max_circular_std_rad": worst, "segment_steps_rad": steps})


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coherentcsi", description="Phase-coherent CSI array simulation and processing")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, stream_in=True):
        sp.add_argument("--board", help="board description JSON")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--window", type=int, default=100, help="over-the-air clusters per estimation window")
        sp.add_argument("--noise-var", type=float, default=None)
        sp.add_argument("--eig-method", choices=["lapack", "jacobi"], default="lapack")
        if stream_in:
            sp.add_argument("--in", dest="input", required=True, help="report stream (binary or JSONL)")

    s = sub.add_parser("simulate", help="write a simulated report stream plus ground truth")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=1000)
    s.add_argument("--azimuth-deg", type=float, default=0.0)
    s.add_argument("--noise-var", type=float, default=0.0)
    s.add_argument("--loss", type=float, default=0.0)
    s.add_argument("--relock-rate", type=float, default=0.0)
    s.add_argument("--window", type=int, default=100)
    s.add_argument("--board", help="where to write the board description (default: <out>.board.json)")
    s.add_argument("--format", choices=["binary", "jsonl"], default="binary")
    s.add_argument("--out", required=True)
    s.add_argument("--truth", help="ground-truth sidecar (default: <out>.truth.jsonl)")
    s.add_argument("--scenario", help="placement schedule JSON")
    s.add_argument("--reference-every", type=int, default=10)
    s.add_argument("--frame-interval-us", type=int, default=10_000)
    s.add_argument("--delivery-jitter-us", type=int, default=1000)

    pr = sub.add_parser("process", help="estimate and calibrate channel vectors")
    common(pr)
    pr.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")

    a = sub.add_parser("aoa", help="MUSIC spectra per placement")
    common(a)
    a.add_argument("--scenario")
    a.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    a.add_argument("--peaks", help="peak list CSV (default: <out>.peaks.csv)")

    st = sub.add_parser("stability", help="per-antenna phase stability series")
    common(st)
    st.set_defaults(window=10)
    st.add_argument("--scenario")
    st.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    st.add_argument("--report", help="stability report CSV (default: <out>.report.csv)")
    st.add_argument("--raw", action="store_true", help="use uncalibrated over-the-air phases")
    return p


COMMANDS = {"simulate": cmd_simulate, "process": cmd_process, "aoa": cmd_aoa, "stability": cmd_stability}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    known = set(RunConfig.__dataclass_fields__)
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in known})
    if cfg.window < 1:
        print("error: --window must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = COMMANDS[cfg.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(summary, default=str), file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
