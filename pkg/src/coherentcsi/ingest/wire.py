"""CSI report records and their binary / JSONL encodings.

Binary record, version 1, little-endian::

    magic        2  0xE5 0xA4
    version      u8
    receiver_id  u8
    source_mac   6
    sequence     u16  (low 12 bits valid)
    timestamp    u64  microseconds, synchronised receiver clock
    frame_kind   u8   0 = over-the-air, 1 = reference
    rssi_db      i8
    n_sub        u16
    coeffs       n_sub x (f32 re, f32 im)
    crc          u32  CRC-32C of every preceding byte of the record

The stream is self-framing: after any damage the parser scans for the next
magic marker and keeps going.
"""

from __future__ import annotations

import enum
import json
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
from crc32c import crc32c

MAGIC = b"\xe5\xa4"
WIRE_VERSION = 1
SEQ_MODULUS = 4096
MAX_SUBCARRIERS = 2048

_HEADER = struct.Struct("<2sBB6sHQBbH")
HEADER_SIZE = _HEADER.size  # 24
_CRC = struct.Struct("<I")


def record_size(n_subcarriers: int) -> int:
    return HEADER_SIZE + 8 * n_subcarriers + 4


class FrameKind(enum.IntEnum):
    OTA = 0
    REFERENCE = 1


_KINDS = (FrameKind.OTA, FrameKind.REFERENCE)


class WireFormatError(ValueError):
    kind = "wire-format"


class TruncatedRecord(WireFormatError):
    kind = "truncated"


class BadMagic(WireFormatError):
    kind = "bad-magic"


class CrcMismatch(WireFormatError):
    kind = "crc-mismatch"


class CountMismatch(WireFormatError):
    kind = "count-mismatch"


class UnsupportedVersion(WireFormatError):
    kind = "unsupported-version"


@dataclass(slots=True, eq=False)
class CsiReport:
    """One receiver's CSI for one received frame."""

    receiver_id: int
    source_mac: bytes
    sequence_number: int
    rx_timestamp: int
    frame_kind: FrameKind
    rssi: int
    coefficients: np.ndarray

    @property
    def n_subcarriers(self) -> int:
        return len(self.coefficients)

    @property
    def frame_key(self) -> tuple:
        return (self.source_mac, self.sequence_number, int(self.frame_kind))


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def parse_mac(text: str) -> bytes:
    mac = bytes(int(part, 16) for part in text.split(":"))
    if len(mac) != 6:
        raise ValueError(f"bad MAC address {text!r}")
    return mac


def serialize_report(report: CsiReport) -> bytes:
    coeffs = np.ascontiguousarray(report.coefficients, dtype="<c8")
    if len(report.source_mac) != 6:
        raise ValueError("source_mac must be 6 bytes")
    head = _HEADER.pack(
        MAGIC,
        WIRE_VERSION,
        report.receiver_id,
        bytes(report.source_mac),
        report.sequence_number % SEQ_MODULUS,
        report.rx_timestamp,
        int(report.frame_kind),
        report.rssi,
        coeffs.size,
    )
    body = head + coeffs.tobytes()
    return body + _CRC.pack(crc32c(body))


def parse_report(data: bytes, n_subcarriers: int | None = None) -> CsiReport:
    """Decode exactly one record from the start of ``data``.

    Raises a :class:`WireFormatError` subclass describing the defect.
    Trailing bytes after the record are ignored.
    """
    data = memoryview(data)
    if len(data) < 2 or bytes(data[:2]) != MAGIC:
        raise BadMagic("record does not start with the magic marker")
    if len(data) < HEADER_SIZE:
        raise TruncatedRecord(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    magic, version, rx, mac, seq, ts, kind, rssi, n = _HEADER.unpack_from(data)
    size = record_size(n)
    if len(data) < size:
        raise TruncatedRecord(f"record declares {n} subcarriers ({size} bytes), have {len(data)}")
    (crc,) = _CRC.unpack_from(data, size - 4)
    if crc32c(data[: size - 4]) != crc:
        raise CrcMismatch("CRC-32C mismatch")
    if version != WIRE_VERSION:
        raise UnsupportedVersion(f"wire version {version}")
    if kind > 1:
        raise CrcMismatch(f"invalid frame kind {kind} in CRC-valid record")
    if n_subcarriers is not None and n != n_subcarriers:
        raise CountMismatch(f"record has {n} subcarriers, expected {n_subcarriers}")
    coeffs = np.frombuffer(data, dtype="<c8", count=n, offset=HEADER_SIZE).copy()
    return CsiReport(rx, bytes(mac), seq & (SEQ_MODULUS - 1), ts, _KINDS[kind], rssi, coeffs)


def _record_dtype(n: int) -> np.dtype:
    return np.dtype(
        [
            ("magic", "u1", (2,)),
            ("version", "u1"),
            ("rx", "u1"),
            ("mac", "V6"),
            ("seq", "<u2"),
            ("ts", "<u8"),
            ("kind", "u1"),
            ("rssi", "i1"),
            ("n", "<u2"),
            ("coef", "<c8", (n,)),
            ("crc", "<u4"),
        ]
    )


class StreamParser:
    """Incremental, resynchronising parser for a byte stream of records.

    Feed arbitrary chunks with :meth:`feed`; call :meth:`close` at end of
    stream.  Defects never raise: they are tallied in ``errors`` (keyed by
    error kind) and ``corruption_events`` counts contiguous damaged regions,
    so one mangled record counts once however many false starts the rescan
    hits inside it.
    """

    def __init__(self, n_subcarriers: int | None = None, max_subcarriers: int = MAX_SUBCARRIERS):
        self.n_subcarriers = n_subcarriers
        self.max_subcarriers = max_subcarriers
        self.errors: Counter = Counter()
        self.corruption_events = 0
        self.records = 0
        self.bytes_skipped = 0
        self._buf = bytearray()
        self._damaged = False
        if n_subcarriers is not None:
            self._dtype = _record_dtype(n_subcarriers)
            self._rsize = record_size(n_subcarriers)

    def _fault(self, kind: str):
        self.errors[kind] += 1
        if not self._damaged:
            self._damaged = True
            self.corruption_events += 1

    def _ok(self):
        self._damaged = False
        self.records += 1

    def feed(self, data: bytes) -> list[CsiReport]:
        self._buf += data
        return self._drain(final=False)

    def close(self) -> list[CsiReport]:
        out = self._drain(final=True)
        if self._buf:
            self.bytes_skipped += len(self._buf)
            self._fault("truncated")
            self._buf.clear()
        return out

    def _fast(self, buf: memoryview, pos: int, out: list) -> int:
        """Bulk-decode back-to-back well-formed records starting at ``pos``."""
        size = self._rsize
        count = (len(buf) - pos) // size
        if count < 2:
            return pos
        arr = np.frombuffer(buf, dtype=self._dtype, count=count, offset=pos)
        good = (
            (arr["magic"][:, 0] == 0xE5)
            & (arr["magic"][:, 1] == 0xA4)
            & (arr["version"] == WIRE_VERSION)
            & (arr["n"] == self.n_subcarriers)
            & (arr["kind"] <= 1)
        )
        bad = np.flatnonzero(~good)
        limit = int(bad[0]) if bad.size else count
        crcs = arr["crc"][:limit].tolist()
        n_ok = limit
        for i in range(limit):
            start = pos + i * size
            if crc32c(buf[start : start + size - 4]) != crcs[i]:
                n_ok = i
                break
        if n_ok == 0:
            return pos
        arr = arr[:n_ok]
        coefs = arr["coef"].copy()
        rx = arr["rx"].tolist()
        seq = (arr["seq"] & (SEQ_MODULUS - 1)).tolist()
        ts = arr["ts"].tolist()
        kind = arr["kind"].tolist()
        rssi = arr["rssi"].tolist()
        for i in range(n_ok):
            start = pos + i * size
            out.append(
                CsiReport(
                    rx[i],
                    bytes(buf[start + 4 : start + 10]),
                    seq[i],
                    ts[i],
                    _KINDS[kind[i]],
                    rssi[i],
                    coefs[i],
                )
            )
        self._damaged = False
        self.records += n_ok
        return pos + n_ok * size

    def _drain(self, final: bool) -> list[CsiReport]:
        out: list[CsiReport] = []
        buf = self._buf
        pos = 0
        view = memoryview(buf)
        try:
            while True:
                if self.n_subcarriers is not None:
                    pos = self._fast(view, pos, out)
                remaining = len(buf) - pos
                if remaining == 0:
                    break
                idx = buf.find(MAGIC, pos)
                if idx < 0:
                    # keep a trailing 0xE5 that may begin the next marker
                    keep = 1 if buf[-1] == MAGIC[0] and not final else 0
                    skip = len(buf) - keep - pos
                    if skip > 0:
                        self.bytes_skipped += skip
                        self._fault("bad-magic")
                        pos += skip
                    break
                if idx > pos:
                    self.bytes_skipped += idx - pos
                    self._fault("bad-magic")
                    pos = idx
                if len(buf) - pos < HEADER_SIZE:
                    if final:
                        self._fault("truncated")
                        self.bytes_skipped += 1
                        pos += 1
                        continue
                    break
                n = _HEADER.unpack_from(buf, pos)[-1]
                size = record_size(n)
                expected = self.n_subcarriers
                if n > self.max_subcarriers or (expected is not None and n != expected and len(buf) - pos < size):
                    self._fault("count-mismatch" if expected is not None else "truncated")
                    self.bytes_skipped += 1
                    pos += 1
                    continue
                if len(buf) - pos < size:
                    if final:
                        self._fault("truncated")
                        self.bytes_skipped += 1
                        pos += 1
                        continue
                    break
                try:
                    rep = parse_report(view[pos : pos + size], expected)
                except CountMismatch:
                    # well-framed record for a different grid: drop it whole
                    self.errors["count-mismatch"] += 1
                    self.bytes_skipped += size
                    pos += size
                    continue
                except WireFormatError as exc:
                    self._fault(exc.kind)
                    self.bytes_skipped += 1
                    pos += 1
                    continue
                out.append(rep)
                self._ok()
                pos += size
        finally:
            view.release()
        del buf[:pos]
        return out


def iter_reports(chunks: Iterable[bytes], parser: StreamParser) -> Iterator[CsiReport]:
    for chunk in chunks:
        yield from parser.feed(chunk)
    yield from parser.close()


def read_chunks(path, chunk_size: int = 1 << 20) -> Iterator[bytes]:
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                return
            yield chunk


# JSONL debug mirror ---------------------------------------------------------


def report_to_json(report: CsiReport) -> str:
    c = np.asarray(report.coefficients, dtype=np.complex64)
    return json.dumps(
        {
            "receiver_id": report.receiver_id,
            "source_mac": format_mac(report.source_mac),
            "sequence_number": report.sequence_number,
            "rx_timestamp_us": report.rx_timestamp,
            "frame_kind": report.frame_kind.name,
            "rssi_db": report.rssi,
            "n_subcarriers": int(c.size),
            "coefficients": [[float(z.real), float(z.imag)] for z in c],
        }
    )


def report_from_json(line: str, n_subcarriers: int | None = None) -> CsiReport:
    d = json.loads(line)
    coeffs = np.array([complex(re, im) for re, im in d["coefficients"]], dtype=np.complex64)
    if n_subcarriers is not None and coeffs.size != n_subcarriers:
        raise CountMismatch(f"record has {coeffs.size} subcarriers, expected {n_subcarriers}")
    return CsiReport(
        int(d["receiver_id"]),
        parse_mac(d["source_mac"]),
        int(d["sequence_number"]) % SEQ_MODULUS,
        int(d["rx_timestamp_us"]),
        FrameKind[d["frame_kind"]],
        int(d["rssi_db"]),
        coeffs,
    )
