"""Wire format parsing and frame clustering."""

from .cluster import FrameCluster, FrameClusterer, cluster_reports
from .wire import (
    HEADER_SIZE,
    MAGIC,
    SEQ_MODULUS,
    WIRE_VERSION,
    BadMagic,
    CountMismatch,
    CrcMismatch,
    CsiReport,
    FrameKind,
    StreamParser,
    TruncatedRecord,
    UnsupportedVersion,
    WireFormatError,
    iter_reports,
    parse_report,
    read_chunks,
    record_size,
    report_from_json,
    report_to_json,
    serialize_report,
)

__all__ = [
    "HEADER_SIZE",
    "MAGIC",
    "SEQ_MODULUS",
    "WIRE_VERSION",
    "BadMagic",
    "CountMismatch",
    "CrcMismatch",
    "CsiReport",
    "FrameCluster",
    "FrameClusterer",
    "FrameKind",
    "StreamParser",
    "TruncatedRecord",
    "UnsupportedVersion",
    "WireFormatError",
    "cluster_reports",
    "iter_reports",
    "parse_report",
    "read_chunks",
    "record_size",
    "report_from_json",
    "report_to_json",
    "serialize_report",
]
