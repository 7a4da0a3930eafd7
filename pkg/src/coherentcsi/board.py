"""Board description file: array layout plus reference-network path phases."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ArrayGeometry, SubcarrierGrid
from .ingest.wire import WIRE_VERSION

BOARD_FILE_VERSION = 1


def default_path_phases(n_antennas: int) -> np.ndarray:
    """Fixed, layout-like path phases used when a board file does not give any.

    Mimics microstrip runs of different length: a fixed pseudo-random phase
    per antenna, identical on every call.
    """
    rng = np.random.default_rng(0xE5A4)
    return rng.uniform(-np.pi, np.pi, size=n_antennas)


@dataclass
class BoardDescription:
    geometry: ArrayGeometry = field(default_factory=ArrayGeometry)
    grid: SubcarrierGrid = field(default_factory=SubcarrierGrid)
    path_phase: np.ndarray | None = None
    wire_version: int = WIRE_VERSION

    def __post_init__(self):
        m = self.geometry.n_antennas
        if self.path_phase is None:
            self.path_phase = default_path_phases(m)
        self.path_phase = np.asarray(self.path_phase, dtype=float)
        if self.path_phase.shape != (m,):
            raise ValueError(f"expected {m} path phases, got shape {self.path_phase.shape}")

    @property
    def n_antennas(self) -> int:
        return self.geometry.n_antennas

    def to_dict(self) -> dict:
        return {
            "board_file_version": BOARD_FILE_VERSION,
            "wire_format_version": self.wire_version,
            "n_antennas": self.n_antennas,
            "geometry": self.geometry.to_dict(),
            "grid": self.grid.to_dict(),
            "path_phase_rad": [float(x) for x in self.path_phase],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoardDescription":
        geometry = ArrayGeometry.from_dict(d["geometry"])
        if int(d.get("n_antennas", geometry.n_antennas)) != geometry.n_antennas:
            raise ValueError("n_antennas disagrees with geometry rows x cols")
        grid = SubcarrierGrid.from_dict(d["grid"]) if "grid" in d else SubcarrierGrid()
        return cls(geometry, grid, np.asarray(d["path_phase_rad"], dtype=float), int(d.get("wire_format_version", WIRE_VERSION)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "BoardDescription":
        return cls.from_dict(json.loads(Path(path).read_text()))
