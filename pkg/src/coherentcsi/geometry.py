"""Array geometry, OFDM subcarrier grid and the planar-wave array manifold."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
WIFI_CH6_HZ = 2.437e9
LEGACY_SUBCARRIER_SPACING_HZ = 312.5e3


def _half_wavelength(frequency: float) -> float:
    return SPEED_OF_LIGHT / frequency / 2.0


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform rectangular array lying in the x-z plane, facing +y.

    Antennas are numbered row-major starting at the top-left element as seen
    from the front, so ``m = row * cols + col``.  Columns run along +x and
    rows run downwards along -z.  The array is centred on the origin.
    """

    rows: int = 2
    cols: int = 4
    element_spacing: float = field(default_factory=lambda: _half_wavelength(WIFI_CH6_HZ))
    carrier_frequency: float = WIFI_CH6_HZ

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if not self.element_spacing > 0:
            raise ValueError("element_spacing must be positive")
        if not self.carrier_frequency > 0:
            raise ValueError("carrier_frequency must be positive")

    @property
    def n_antennas(self) -> int:
        return self.rows * self.cols

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def antenna_positions(self) -> np.ndarray:
        """(M, 3) antenna coordinates in metres."""
        r, c = np.divmod(np.arange(self.n_antennas), self.cols)
        x = (c - (self.cols - 1) / 2.0) * self.element_spacing
        z = ((self.rows - 1) / 2.0 - r) * self.element_spacing
        return np.stack([x, np.zeros_like(x), z], axis=-1)

    def column_of(self, m: int) -> int:
        return m % self.cols

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "element_spacing_m": self.element_spacing,
            "carrier_frequency_hz": self.carrier_frequency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        return cls(
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            element_spacing=float(d["element_spacing_m"]),
            carrier_frequency=float(d["carrier_frequency_hz"]),
        )


@dataclass(frozen=True)
class SubcarrierGrid:
    """Usable OFDM subcarriers as signed offsets from the centre frequency."""

    subcarrier_indices: tuple = tuple(k for k in range(-26, 27) if k != 0)
    subcarrier_spacing: float = LEGACY_SUBCARRIER_SPACING_HZ
    center_frequency: float = WIFI_CH6_HZ

    def __post_init__(self):
        idx = tuple(int(k) for k in self.subcarrier_indices)
        object.__setattr__(self, "subcarrier_indices", idx)
        if len(idx) < 1:
            raise ValueError("grid needs at least one subcarrier")
        if 0 in idx:
            raise ValueError("DC subcarrier (index 0) is not usable")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("subcarrier indices must be strictly increasing")
        if not self.subcarrier_spacing > 0:
            raise ValueError("subcarrier_spacing must be positive")

    @property
    def n_subcarriers(self) -> int:
        return len(self.subcarrier_indices)

    @property
    def frequencies(self) -> np.ndarray:
        """Absolute subcarrier frequencies in Hz."""
        return self.center_frequency + np.asarray(self.subcarrier_indices) * self.subcarrier_spacing

    def to_dict(self) -> dict:
        return {
            "subcarrier_indices": list(self.subcarrier_indices),
            "subcarrier_spacing_hz": self.subcarrier_spacing,
            "center_frequency_hz": self.center_frequency,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubcarrierGrid":
        return cls(
            subcarrier_indices=tuple(d["subcarrier_indices"]),
            subcarrier_spacing=float(d["subcarrier_spacing_hz"]),
            center_frequency=float(d["center_frequency_hz"]),
        )


def direction(azimuth) -> np.ndarray:
    """Unit vector(s) in the horizontal plane pointing towards the source.

    Azimuth 0 is broadside (+y); positive azimuth turns towards +x, i.e. to
    the right of the array seen from the front.
    """
    az = np.asarray(azimuth, dtype=float)
    return np.stack([np.sin(az), np.cos(az), np.zeros_like(az)], axis=-1)


def steering_vector(geometry: ArrayGeometry, azimuth, frequency: float | None = None) -> np.ndarray:
    """Narrowband planar-wave response of the array.

    Entry ``m`` is ``exp(-j 2 pi / lambda * <k, p_m>)`` with ``k`` the
    horizontal unit vector returned by :func:`direction`.  ``azimuth`` may be
    a scalar (result shape (M,)) or an array (result shape (..., M)).
    ``frequency`` defaults to the geometry's carrier.
    """
    az = np.asarray(azimuth, dtype=float)
    if np.any(np.abs(az) > np.pi / 2 + 1e-12):
        raise ValueError("azimuth must lie in [-pi/2, pi/2]")
    f = geometry.carrier_frequency if frequency is None else frequency
    wavenumber = 2.0 * np.pi * f / SPEED_OF_LIGHT
    proj = direction(az) @ geometry.antenna_positions.T
    return np.exp(-1j * wavenumber * proj)


def manifold(geometry: ArrayGeometry, azimuths: np.ndarray) -> np.ndarray:
    """(M, P) matrix whose columns are steering vectors on an azimuth grid."""
    return steering_vector(geometry, np.asarray(azimuths)).T
