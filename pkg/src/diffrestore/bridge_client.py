"""Client for an external denoiser served over a framed stdio protocol.

A bridge is a child process that receives request frames on its standard
input and writes response frames to its standard output.  Each frame is:

    4-byte little-endian unsigned header length
    UTF-8 header: newline-separated ``key=value`` pairs
        (requests: ``op=denoise|echo|lpips``, ``t``, ``alpha``, ``dims``,
        ``dtype=f32``; responses: ``op=result|error``)
    4-byte little-endian unsigned payload length
    payload: row-major little-endian 32-bit floats

The protocol is strict request/response with one frame in flight per
connection, so a single client is serial; run several bridge processes for
parallel chains.  All reads are bounded by a configurable timeout (default
120 seconds per call), so a crashed or wedged peer surfaces as an error
rather than a deadlock.
"""

from __future__ import annotations

import os
import selectors
import shlex
import struct
import subprocess
import time
from typing import Mapping, Sequence

import numpy as np

from .denoisers import Denoiser
from .image import Domain, ImageTensor

DEFAULT_TIMEOUT_SECONDS = 120.0

_LENGTH_WORD = struct.Struct("<I")
_MAX_HEADER_BYTES = 1 << 20
_MAX_PAYLOAD_BYTES = 1 << 30


class BridgeError(RuntimeError):
    """Base class for bridge transport and protocol failures."""


class BridgeProtocolError(BridgeError):
    """The peer sent a frame that violates the wire protocol."""


class BridgeTimeoutError(BridgeError):
    """The peer did not produce a complete response within the timeout."""


class BridgePeerError(BridgeError):
    """The peer process exited, closed its pipes, or was already closed."""


class BridgeRemoteError(BridgeError):
    """The peer answered with an ``op=error`` frame; carries its message."""


def build_frame(header: Mapping[str, object], payload: bytes) -> bytes:
    """Serializes one frame (header length, header, payload length, payload)."""
    lines = []
    for key, value in header.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text:
            raise ValueError(f"header field {key!r} cannot be framed")
        lines.append(f"{key}={text}")
    head = "\n".join(lines).encode("utf-8")
    return (
        _LENGTH_WORD.pack(len(head))
        + head
        + _LENGTH_WORD.pack(len(payload))
        + payload
    )


def parse_header(raw: bytes) -> dict[str, str]:
    """Decodes a frame header into a key-value mapping."""
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BridgeProtocolError(f"header is not valid UTF-8: {exc}") from exc
    fields: dict[str, str] = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise BridgeProtocolError(f"malformed header line {line!r}")
        fields[key] = value
    if "op" not in fields:
        raise BridgeProtocolError("header is missing the 'op' field")
    return fields


def encode_tensor(values: np.ndarray) -> bytes:
    """Row-major little-endian 32-bit float payload for an array."""
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_tensor(payload: bytes, dims: Sequence[int]) -> np.ndarray:
    """Decodes a payload into a float64 array of the given dimensions."""
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise BridgeProtocolError(
            f"payload length {len(payload)} disagrees with dims "
            f"{tuple(dims)} (expected {expected} bytes)"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return flat.reshape(tuple(dims)).astype(np.float64)


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise BridgeProtocolError(f"unparseable dims field {text!r}") from exc
    if not dims or any(d <= 0 for d in dims):
        raise BridgeProtocolError(f"non-positive dims field {text!r}")
    return dims


class BridgeClient:
    """Owns one bridge child process and exchanges frames with it.

    One client is strictly serial: a single request is in flight at a time.
    Any transport failure (timeout, peer exit, malformed frame) closes the
    connection; later calls raise ``BridgePeerError``.
    """

    def __init__(
        self,
        command: str | Sequence[str],
        timeout: float = DEFAULT_TIMEOUT_SECONDS,
    ):
        if isinstance(command, str):
            command = shlex.split(command)
        command = list(command)
        if not command:
            raise ValueError("bridge command must not be empty")
        if not (timeout > 0):
            raise ValueError(f"timeout must be positive, got {timeout}")
        self._timeout = float(timeout)
        self._command = command
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=None,  # bridge logs flow through to our stderr
            bufsize=0,
        )
        self._read_selector = selectors.DefaultSelector()
        self._read_selector.register(self._proc.stdout, selectors.EVENT_READ)
        self._write_selector = selectors.DefaultSelector()
        self._write_selector.register(self._proc.stdin, selectors.EVENT_WRITE)
        os.set_blocking(self._proc.stdin.fileno(), False)
        self._buffer = bytearray()
        self._closed = False

    # -- lifecycle ----------------------------------------------------------

    def __enter__(self) -> "BridgeClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def close(self) -> None:
        """Shuts the bridge down (EOF on its stdin, then terminate/kill)."""
        if self._closed:
            return
        self._closed = True
        for selector, stream in (
            (self._read_selector, self._proc.stdout),
            (self._write_selector, self._proc.stdin),
        ):
            try:
                selector.unregister(stream)
            except (KeyError, ValueError):
                pass
            selector.close()
        for stream in (self._proc.stdin, self._proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def _abort(self, error: BridgeError) -> BridgeError:
        self.close()
        return error

    def _require_open(self) -> None:
        if self._closed:
            raise BridgePeerError(
                f"bridge connection to {self._command[0]!r} is closed"
            )

    # -- transport ----------------------------------------------------------

    def _write(self, frame: bytes, deadline: float) -> None:
        view = memoryview(frame)
        fd = self._proc.stdin.fileno()
        while view:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise self._abort(
                    BridgeTimeoutError(
                        f"bridge did not accept the request within "
                        f"{self._timeout} s"
                    )
                )
            if not self._write_selector.select(remaining):
                continue
            try:
                written = os.write(fd, view)
            except BlockingIOError:
                continue
            except (BrokenPipeError, OSError) as exc:
                code = self._proc.poll()
                raise self._abort(
                    BridgePeerError(
                        f"bridge process closed its input "
                        f"(exit code {code}): {exc}"
                    )
                ) from exc
            view = view[written:]

    def _read_exact(self, count: int, deadline: float) -> bytes:
        while len(self._buffer) < count:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise self._abort(
                    BridgeTimeoutError(
                        f"bridge did not respond within {self._timeout} s"
                    )
                )
            if not self._read_selector.select(remaining):
                continue
            chunk = os.read(self._proc.stdout.fileno(), 1 << 16)
            if chunk == b"":
                code = self._proc.poll()
                raise self._abort(
                    BridgePeerError(
                        f"bridge process ended mid-conversation "
                        f"(exit code {code})"
                    )
                )
            self._buffer.extend(chunk)
        out = bytes(self._buffer[:count])
        del self._buffer[:count]
        return out

    def _read_frame(self, deadline: float) -> tuple[dict[str, str], bytes]:
        (header_len,) = _LENGTH_WORD.unpack(self._read_exact(4, deadline))
        if header_len > _MAX_HEADER_BYTES:
            raise self._abort(
                BridgeProtocolError(f"header length {header_len} is implausible")
            )
        try:
            header = parse_header(self._read_exact(header_len, deadline))
        except BridgeProtocolError as exc:
            raise self._abort(exc)
        (payload_len,) = _LENGTH_WORD.unpack(self._read_exact(4, deadline))
        if payload_len > _MAX_PAYLOAD_BYTES:
            raise self._abort(
                BridgeProtocolError(
                    f"payload length {payload_len} is implausible"
                )
            )
        payload = self._read_exact(payload_len, deadline)
        return header, payload

    def request(
        self,
        header: Mapping[str, object],
        payload: bytes,
        timeout: float | None = None,
    ) -> tuple[dict[str, str], bytes]:
        """Sends one frame and returns the peer's (header, payload) reply."""
        self._require_open()
        budget = self._timeout if timeout is None else timeout
        deadline = time.monotonic() + budget
        self._write(build_frame(header, payload), deadline)
        return self._read_frame(deadline)

    # -- operations ---------------------------------------------------------

    def _request_tensor(
        self, header: Mapping[str, object], values: np.ndarray
    ) -> np.ndarray:
        reply, payload = self.request(header, encode_tensor(values))
        op = reply["op"]
        if op == "error":
            raise BridgeRemoteError(
                reply.get("message", "bridge reported an unspecified error")
            )
        if op != "result":
            raise self._abort(
                BridgeProtocolError(f"unexpected response op {op!r}")
            )
        if reply.get("dtype", "f32") != "f32":
            raise self._abort(
                BridgeProtocolError(f"unsupported dtype {reply.get('dtype')!r}")
            )
        if "dims" not in reply:
            raise self._abort(
                BridgeProtocolError("result frame is missing the dims field")
            )
        try:
            dims = _parse_dims(reply["dims"])
            return decode_tensor(payload, dims)
        except BridgeProtocolError as exc:
            raise self._abort(exc)

    def echo(self, values: np.ndarray) -> np.ndarray:
        """Round-trips an array through the bridge unchanged."""
        values = np.asarray(values, dtype=np.float64)
        header = {
            "op": "echo",
            "t": 0,
            "alpha": "1.0",
            "dims": ",".join(str(d) for d in values.shape),
            "dtype": "f32",
        }
        result = self._request_tensor(header, values)
        if result.shape != values.shape:
            raise self._abort(
                BridgeProtocolError(
                    f"echo shape mismatch: expected {values.shape}, "
                    f"got {result.shape}"
                )
            )
        return result

    def denoise(
        self, x_t: ImageTensor, t: int, alpha_t: float
    ) -> ImageTensor:
        """Asks the bridge for the clean-image estimate behind ``x_t``."""
        x_t.require(Domain.SIGNED11)
        header = {
            "op": "denoise",
            "t": int(t),
            "alpha": repr(float(alpha_t)),
            "dims": ",".join(str(d) for d in x_t.shape),
            "dtype": "f32",
        }
        result = self._request_tensor(header, x_t.data)
        if result.shape != x_t.shape:
            raise self._abort(
                BridgeProtocolError(
                    f"denoise shape mismatch: expected {x_t.shape}, "
                    f"got {result.shape}"
                )
            )
        if not np.all(np.isfinite(result)):
            raise self._abort(
                BridgeProtocolError("bridge returned non-finite values")
            )
        return ImageTensor(result, Domain.SIGNED11)

    def lpips(self, a: ImageTensor, b: ImageTensor) -> float:
        """Perceptual distance between two images, if the bridge offers it.

        The pair travels as one payload stacked on a new leading axis; the
        reply is a single scalar.
        """
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        stacked = np.stack([a.data, b.data])
        header = {
            "op": "lpips",
            "t": 0,
            "alpha": "1.0",
            "dims": ",".join(str(d) for d in stacked.shape),
            "dtype": "f32",
        }
        result = self._request_tensor(header, stacked)
        if result.size != 1:
            raise self._abort(
                BridgeProtocolError(
                    f"lpips reply must be a single scalar, got shape "
                    f"{result.shape}"
                )
            )
        return float(result.reshape(-1)[0])


class BridgeDenoiser(Denoiser):
    """Denoiser backed by a bridge process.

    The connection is strictly serial (one frame in flight), so this
    denoiser reports itself as not safe for concurrent calls; the sampler
    serializes around it.
    """

    concurrent_safe = False

    def __init__(self, client: BridgeClient):
        self._client = client

    @property
    def client(self) -> BridgeClient:
        return self._client

    def denoise(self, x_t: ImageTensor, t: int, alpha_t: float) -> ImageTensor:
        return self._client.denoise(x_t, t, alpha_t)
