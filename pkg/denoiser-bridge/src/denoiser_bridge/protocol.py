"""Wire format for the framed stdio denoiser protocol.

This module is the server-side implementation of the frame layout that the
restoration client speaks; the two sides share no code, so round trips
between them cross-check both implementations.  Each frame is:

    4-byte little-endian unsigned header length
    UTF-8 header: newline-separated ``key=value`` lines
    4-byte little-endian unsigned payload length
    payload: row-major little-endian 32-bit floats

Every request header carries ``op=<name>``; responses carry ``op=result``
or ``op=error`` (the latter with a ``message`` field).  Tensors travel with
``dims=<comma-separated sizes>`` and ``dtype=f32``.

Anything that breaks the frame structure itself — a stream that ends inside
a frame, an implausible length word, a header that is not UTF-8 ``key=value``
text, or a header without ``op`` — raises :class:`MalformedFrame`.  Problems
with the *content* of a well-formed frame (unknown op, bad dims, model
failures) are not malformed frames; the server answers those with
``op=error`` and keeps serving.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Mapping, Sequence

import numpy as np

_LENGTH_WORD = struct.Struct("<I")

MAX_HEADER_BYTES = 1 << 20
MAX_PAYLOAD_BYTES = 1 << 30


class MalformedFrame(ValueError):
    """The byte stream violates the frame structure."""


def encode_header(fields: Mapping[str, object]) -> bytes:
    """Serializes header fields as newline-separated ``key=value`` lines."""
    lines = []
    for key, value in fields.items():
        text = str(value)
        if not key or "=" in key or "\n" in key or "\n" in text:
            raise ValueError(f"header field {key!r} cannot be framed")
        lines.append(f"{key}={text}")
    return "\n".join(lines).encode("utf-8")


def decode_header(blob: bytes) -> dict[str, str]:
    """Parses a header blob; raises :class:`MalformedFrame` on violations."""
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedFrame(f"header is not valid UTF-8: {exc}") from exc
    fields: dict[str, str] = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise MalformedFrame(f"malformed header line {line!r}")
        fields[key] = value
    if "op" not in fields:
        raise MalformedFrame("header is missing the 'op' field")
    return fields


def write_frame(
    stream: BinaryIO, fields: Mapping[str, object], payload: bytes = b""
) -> None:
    """Writes one complete frame and flushes the stream."""
    header = encode_header(fields)
    stream.write(_LENGTH_WORD.pack(len(header)))
    stream.write(header)
    stream.write(_LENGTH_WORD.pack(len(payload)))
    stream.write(payload)
    stream.flush()


def _read_exact(stream: BinaryIO, count: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < count:
        piece = stream.read(count - len(chunks))
        if not piece:
            raise MalformedFrame(
                f"stream ended inside a frame ({len(chunks)} of {count} bytes)"
            )
        chunks.extend(piece)
    return bytes(chunks)


def read_frame(stream: BinaryIO) -> tuple[dict[str, str], bytes] | None:
    """Reads one frame; returns ``None`` on a clean end of stream.

    End of stream is clean only at a frame boundary (no bytes of the next
    frame read yet); everywhere else it is a :class:`MalformedFrame`.
    """
    first = stream.read(_LENGTH_WORD.size)
    if not first:
        return None
    if len(first) < _LENGTH_WORD.size:
        first += _read_exact(stream, _LENGTH_WORD.size - len(first))
    (header_len,) = _LENGTH_WORD.unpack(first)
    if header_len > MAX_HEADER_BYTES:
        raise MalformedFrame(f"header length {header_len} is implausible")
    fields = decode_header(_read_exact(stream, header_len))
    (payload_len,) = _LENGTH_WORD.unpack(_read_exact(stream, _LENGTH_WORD.size))
    if payload_len > MAX_PAYLOAD_BYTES:
        raise MalformedFrame(f"payload length {payload_len} is implausible")
    payload = _read_exact(stream, payload_len)
    return fields, payload


def encode_tensor(values: np.ndarray) -> bytes:
    """Row-major little-endian 32-bit float payload for an array."""
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_tensor(payload: bytes, dims: Sequence[int]) -> np.ndarray:
    """Decodes a payload into a float64 array of the given dimensions."""
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise ValueError(
            f"payload length {len(payload)} disagrees with dims "
            f"{tuple(dims)} (expected {expected} bytes)"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.reshape(tuple(dims)).astype(np.float64)


def parse_dims(text: str) -> tuple[int, ...]:
    """Parses a comma-separated dims field into positive integers."""
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ValueError(f"unparseable dims field {text!r}") from exc
    if not dims or any(d <= 0 for d in dims):
        raise ValueError(f"non-positive dims field {text!r}")
    return dims
