"""Phase-coherent multi-receiver WiFi CSI: simulation, ingest, estimation, calibration and AoA."""

from .aoa import (
    PhaseSeries,
    PseudoSpectrum,
    antenna_phase,
    antenna_phases,
    beamformer_spectrum,
    circular_std,
    music_spectrum,
    phase_stability_report,
)
from .board import BoardDescription
from .calibration import CalibrationState, calibrate, update_reference
from .estimator import (
    ChannelEstimate,
    CovarianceAccumulator,
    estimate_channel,
    estimate_channels,
    estimate_noise_floor,
    finalize_covariance,
)
from .geometry import ArrayGeometry, SubcarrierGrid, manifold, steering_vector
from .ingest import (
    CsiReport,
    FrameCluster,
    FrameClusterer,
    FrameKind,
    StreamParser,
    parse_report,
    serialize_report,
)
from .linalg import hermitian_eigh
from .pipeline import Pipeline, PipelineConfig, process_reports, process_stream
from .simulator import ArraySimulator, GroundTruth, ImpairmentConfig, arrival_order

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry", "ArraySimulator", "BoardDescription", "CalibrationState", "ChannelEstimate",
    "CovarianceAccumulator", "CsiReport", "FrameCluster", "FrameClusterer", "FrameKind", "GroundTruth",
    "ImpairmentConfig", "PhaseSeries", "Pipeline", "PipelineConfig", "PseudoSpectrum", "StreamParser",
    "SubcarrierGrid", "antenna_phase", "antenna_phases", "arrival_order", "beamformer_spectrum", "calibrate",
    "circular_std", "estimate_channel", "estimate_channels", "estimate_noise_floor", "finalize_covariance",
    "hermitian_eigh", "manifold", "music_spectrum", "parse_report", "phase_stability_report",
    "process_reports", "process_stream", "serialize_report", "steering_vector", "update_reference",
]
