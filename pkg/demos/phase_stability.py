"""Calibrated phase stability for a static transmitter, then a relocation.

The transmitter sits at 0 deg for the first half and 25 deg for the second.
Within each segment the per-antenna circular spread stays small. The move
shows up as a step many times larger than that spread.

    python demos/phase_stability.py
"""

import numpy as np

from coherentcsi import ArraySimulator, BoardDescription, ImpairmentConfig, PhaseSeries, antenna_phases, arrival_order
from coherentcsi import phase_stability_report
from coherentcsi.aoa import time_boundaries
from coherentcsi.calibration import UNCALIBRATED
from coherentcsi.pipeline import Pipeline, PipelineConfig, make_clusterer


def main(frames_per_segment: int = 2000, seed: int = 3):
    board = BoardDescription()
    config = PipelineConfig(window=20)
    sim = ArraySimulator(board, ImpairmentConfig(noise_variance=0.01, pll_relock_rate=0.2), seed=seed)
    clusterer = make_clusterer(board, config)
    pipe = Pipeline(board, config)
    rng = np.random.default_rng(seed)
    windows = []
    move_us = None
    for azimuth in (0.0, np.radians(25)):
        sim.azimuth = azimuth
        for rep in arrival_order(sim.frames(frames_per_segment), rng):
            for cl in clusterer.push(rep):
                windows += pipe.push(cl)
        for cl in clusterer.flush():
            windows += pipe.push(cl)
        windows += pipe.cut()  # no window straddles the move
        move_us = move_us or sim.start_time_us + sim.frame_index * sim.frame_interval_us
    windows += pipe.finish()

    ok = [w for w in windows if UNCALIBRATED not in w.calibrated.extra_flags]
    series = PhaseSeries.from_phases([w.end_us for w in ok], [antenna_phases(w.calibrated) for w in ok])
    report = phase_stability_report(series, time_boundaries(series.timestamps, [move_us]))
    steps = np.abs(report.steps()[0])
    print(f"{len(ok)} calibrated windows, {len(sim.relock_log)} relocks")
    print("antenna  std before  std after  step (rad)")
    for m in range(board.n_antennas):
        print(f"{m:7d} {report.std[0, m]:11.4f} {report.std[1, m]:10.4f} {steps[m]:11.3f}")


if __name__ == "__main__":
    main()
