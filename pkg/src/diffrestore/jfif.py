"""Minimal JFIF marker-segment parser for extracting quantization tables.

Restoring a real `.jpg` file requires the exact quantization tables and the
subsampling mode the encoder used; both live in marker segments before the
scan data. This parser walks the marker stream (big-endian, per the JPEG
interchange format), collects DQT tables and the SOF component sampling
factors, and stops at SOS. It never decodes entropy data and never reads
past a declared segment length.

Grammar handled: SOI, DQT (8- or 16-bit precision, multiple tables per
segment), SOF0/SOF2 sampling factors, standalone markers (TEM, RSTn, EOI),
and arbitrary skippable length-prefixed segments. Everything else is an
error: a stream that is not a JPEG, has no tables, declares lengths past the
end of the data, or uses a sampling layout other than 4:4:4 / 4:2:0.
"""

from __future__ import annotations

import numpy as np

from .jpeg import JpegParams, QuantTable, Subsampling, TableOrder

_SOI = 0xD8
_EOI = 0xD9
_SOS = 0xDA
_DQT = 0xDB
_SOF_BASELINE = 0xC0
_SOF_PROGRESSIVE = 0xC2
_TEM = 0x01
_RST_FIRST, _RST_LAST = 0xD0, 0xD7


class JfifError(ValueError):
    """Base class for everything parse_jfif can raise."""


class NotAJpegError(JfifError):
    """The stream does not start with an SOI marker."""


class MissingTablesError(JfifError):
    """No DQT segment appeared before the scan started."""


class MalformedJpegError(JfifError):
    """Truncated segment, bad length field, or invalid table payload."""


class UnsupportedSubsamplingError(JfifError):
    """Sampling factors other than the 4:4:4 / 4:2:0 patterns."""


def _read_u16(data: bytes, pos: int, what: str) -> int:
    if pos + 2 > len(data):
        raise MalformedJpegError(f"truncated stream while reading {what}")
    return (data[pos] << 8) | data[pos + 1]


def _parse_dqt_payload(payload: bytes, tables: dict[int, QuantTable]) -> None:
    pos = 0
    while pos < len(payload):
        pq_tq = payload[pos]
        pos += 1
        pq, tq = pq_tq >> 4, pq_tq & 0x0F
        if pq not in (0, 1):
            raise MalformedJpegError(f"invalid table precision {pq}")
        if tq > 3:
            raise MalformedJpegError(f"invalid table id {tq}")
        width = 1 if pq == 0 else 2
        end = pos + 64 * width
        if end > len(payload):
            raise MalformedJpegError("quantization table runs past its segment")
        raw = payload[pos:end]
        if pq == 0:
            values = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        else:
            values = np.frombuffer(raw, dtype=">u2").astype(np.int64)
        if np.any(values == 0):
            raise MalformedJpegError("quantization table contains a zero divisor")
        tables[tq] = QuantTable(values, TableOrder.ZIGZAG).in_raster()
        pos = end


def _parse_sof_payload(payload: bytes) -> Subsampling:
    if len(payload) < 6:
        raise MalformedJpegError("SOF segment too short")
    ncomp = payload[5]
    if len(payload) < 6 + 3 * ncomp:
        raise MalformedJpegError("SOF component list truncated")
    factors = []
    for c in range(ncomp):
        hv = payload[6 + 3 * c + 1]
        factors.append((hv >> 4, hv & 0x0F))
    if all(f == (1, 1) for f in factors):
        return Subsampling.S444
    if len(factors) == 3 and factors[0] == (2, 2) and factors[1] == factors[2] == (1, 1):
        return Subsampling.S420
    raise UnsupportedSubsamplingError(f"unsupported sampling factors {factors}")


def parse_jfif(data: bytes) -> JpegParams:
    """Extract quantization tables and subsampling mode from raw `.jpg` bytes.

    Scans marker segments up to (not including) the first SOS or EOI. Table
    id 0 is taken as luma and id 1 as chroma; if only one table is present it
    is reused for both. Streams without an SOF segment default to 4:4:4.
    The returned params never carry a quality factor: files store tables,
    not the QF that generated them.

    Raises:
        NotAJpegError: stream does not begin with SOI.
        MissingTablesError: scan starts (or stream ends) with no DQT seen.
        MalformedJpegError: truncation, bad lengths, or invalid payloads.
        UnsupportedSubsamplingError: sampling other than 4:4:4 / 4:2:0.
    """
    if len(data) < 2 or data[0] != 0xFF or data[1] != _SOI:
        raise NotAJpegError("stream does not start with an SOI marker")
    tables: dict[int, QuantTable] = {}
    subsampling: Subsampling | None = None
    pos = 2
    while True:
        if pos >= len(data):
            raise MalformedJpegError("stream ended without SOS or EOI")
        if data[pos] != 0xFF:
            raise MalformedJpegError(f"expected a marker at offset {pos}")
        # Any number of 0xFF fill bytes may precede the marker code.
        while pos < len(data) and data[pos] == 0xFF:
            pos += 1
        if pos >= len(data):
            raise MalformedJpegError("stream ended inside a marker")
        code = data[pos]
        pos += 1
        if code == 0x00:
            raise MalformedJpegError("stuffed 0xFF00 outside entropy-coded data")
        if code in (_EOI, _SOS):
            break
        if code == _TEM or code == _SOI or _RST_FIRST <= code <= _RST_LAST:
            continue  # standalone markers carry no length field
        length = _read_u16(data, pos, "segment length")
        if length < 2:
            raise MalformedJpegError(f"segment length {length} below header size")
        if pos + length > len(data):
            raise MalformedJpegError("segment length runs past end of stream")
        payload = data[pos + 2 : pos + length]
        if code == _DQT:
            try:
                _parse_dqt_payload(payload, tables)
            except JfifError:
                raise
            except ValueError as exc:
                raise MalformedJpegError(str(exc)) from exc
        elif code in (_SOF_BASELINE, _SOF_PROGRESSIVE):
            subsampling = _parse_sof_payload(payload)
        pos += length
    if not tables:
        raise MissingTablesError("no quantization tables before the scan")
    luma = tables.get(0, next(iter(tables.values())))
    chroma = tables.get(1, luma)
    return JpegParams(
        luma_table=luma,
        chroma_table=chroma,
        subsampling=subsampling if subsampling is not None else Subsampling.S444,
        quality_factor=None,
    )
