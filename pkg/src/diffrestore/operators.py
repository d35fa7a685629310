"""Generalized measurement operators and the property-verification harness.

An operator is an encode/decode pair standing in for a (possibly non-linear)
degradation and its best-effort inverse. Two properties make such a pair
usable for posterior sampling:

1. re-encoding the decode reproduces the measurement
   (encode(decode(encode(x))) = encode(x) within a per-operator tolerance);
2. decode(encode(x)) is a least-squares style reconstruction of x.

Each operator declares the value domain its arithmetic lives in; the
``*_signed`` wrappers convert from the sampler's [-1, 1] working domain at
the boundary. Measurements serialize to a self-describing binary container
so experiments can be staged on disk.
"""

from __future__ import annotations

import abc
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .image import Domain, ImageTensor, convert_domain
from .jfif import parse_jfif
from .jpeg import (
    JpegCoefficients,
    JpegParams,
    Subsampling,
    coefficients_from_bytes,
    coefficients_to_bytes,
    jpeg_decode,
    jpeg_encode,
)


class DescriptorError(ValueError):
    """An operator descriptor string failed validation."""


@dataclass(frozen=True, eq=False)
class Measurement:
    """An operator's output: an opaque payload tagged with the descriptor."""

    descriptor: str
    payload: object = field(repr=False)


@dataclass(frozen=True)
class Property1Report:
    """Re-encode stability over a corpus: encode(decode(encode(x))) vs encode(x)."""

    images: int
    fraction_exact: float
    max_deviation: float
    tolerance: float
    min_fraction_exact: float

    @property
    def passed(self) -> bool:
        return (
            self.max_deviation <= self.tolerance
            and self.fraction_exact >= self.min_fraction_exact
        )


@dataclass(frozen=True)
class Property2Report:
    """Reconstruction residuals ||x - decode(encode(x))||_2 / ||x||_2."""

    residuals: tuple[float, ...]

    @property
    def mean_residual(self) -> float:
        return float(np.mean(self.residuals))


class GeneralizedOperator(abc.ABC):
    """Encode/decode pair with a declared native domain and serialization codec."""

    #: Domain the operator's own arithmetic expects.
    native_domain: Domain
    #: Max per-element deviation and min exact fraction for property 1.
    property1_tolerance: float = 0.0
    property1_min_exact: float = 1.0

    @property
    @abc.abstractmethod
    def descriptor(self) -> str:
        """CLI-facing descriptor string identifying this operator."""

    @abc.abstractmethod
    def encode(self, img: ImageTensor) -> Measurement:
        """Degrade an image (in the native domain) into a measurement."""

    @abc.abstractmethod
    def decode(self, measurement: Measurement) -> ImageTensor:
        """Best-effort inverse, total on the range of encode. Native domain."""

    @abc.abstractmethod
    def measurement_values(self, measurement: Measurement) -> np.ndarray:
        """Flat float view of the payload, for comparisons and entropy stats."""

    @abc.abstractmethod
    def _payload_to_bytes(self, payload) -> bytes: ...

    @abc.abstractmethod
    def _payload_from_bytes(self, data: bytes): ...

    # -- sampler-facing wrappers (the sampling loop works in Signed11) -------

    def encode_signed(self, x: ImageTensor) -> Measurement:
        x.require(Domain.SIGNED11)
        return self.encode(convert_domain(x, self.native_domain))

    def decode_signed(self, measurement: Measurement) -> ImageTensor:
        return convert_domain(self.decode(measurement), Domain.SIGNED11)

    # -- serialization --------------------------------------------------------

    _MAGIC = b"DRM1"

    def serialize_measurement(self, measurement: Measurement) -> bytes:
        desc = measurement.descriptor.encode("utf-8")
        payload = self._payload_to_bytes(measurement.payload)
        return (
            self._MAGIC
            + struct.pack("<BH", 1, len(desc))
            + desc
            + struct.pack("<Q", len(payload))
            + payload
        )

    def deserialize_measurement(self, data: bytes) -> Measurement:
        desc, payload = split_measurement_container(data)
        if desc.split(":", 1)[0] != self.descriptor.split(":", 1)[0]:
            raise ValueError(
                f"measurement was produced by {desc!r}, not by {self.descriptor!r}"
            )
        return Measurement(desc, self._payload_from_bytes(payload))

    def _check_measurement(self, measurement: Measurement) -> None:
        if measurement.descriptor.split(":", 1)[0] != self.descriptor.split(":", 1)[0]:
            raise ValueError(
                f"measurement descriptor {measurement.descriptor!r} does not "
                f"belong to operator {self.descriptor!r}"
            )


def split_measurement_container(data: bytes) -> tuple[str, bytes]:
    """Parse the outer measurement container into (descriptor, payload bytes)."""
    if data[:4] != GeneralizedOperator._MAGIC:
        raise ValueError("not a measurement container (bad magic)")
    version, desc_len = struct.unpack_from("<BH", data, 4)
    if version != 1:
        raise ValueError(f"unsupported measurement container version {version}")
    pos = 7
    desc = data[pos : pos + desc_len].decode("utf-8")
    pos += desc_len
    (payload_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    payload = data[pos : pos + payload_len]
    if len(payload) != payload_len or pos + payload_len != len(data):
        raise ValueError("measurement container length mismatch")
    return desc, payload


def _pack_dims(*dims: int) -> bytes:
    return struct.pack(f"<{len(dims)}I", *dims)


class IdentityOperator(GeneralizedOperator):
    """Pass-through operator; the degenerate case where y = x."""

    native_domain = Domain.SIGNED11

    @property
    def descriptor(self) -> str:
        return "identity"

    def encode(self, img: ImageTensor) -> Measurement:
        img.require(self.native_domain)
        return Measurement(self.descriptor, img.data.copy())

    def decode(self, measurement: Measurement) -> ImageTensor:
        self._check_measurement(measurement)
        return ImageTensor(measurement.payload, self.native_domain)

    def measurement_values(self, measurement: Measurement) -> np.ndarray:
        return np.asarray(measurement.payload, dtype=np.float64).ravel()

    def _payload_to_bytes(self, payload) -> bytes:
        arr = np.ascontiguousarray(payload, dtype=np.float64)
        return _pack_dims(*arr.shape) + arr.astype("<f8").tobytes()

    def _payload_from_bytes(self, data: bytes):
        h, w, c = struct.unpack_from("<3I", data, 0)
        arr = np.frombuffer(data, dtype="<f8", count=h * w * c, offset=12)
        return arr.astype(np.float64).reshape(h, w, c)


class BitDepthQuantizer(GeneralizedOperator):
    """Uniform quantization to 2^bits levels per channel on [0, 1].

    Encode maps v to level floor(v * 2^bits) clamped to the top level; decode
    returns bin centers (k + 0.5) / 2^bits, the least-squares reconstruction
    for a posterior that is uniform within each bin. Bin centers re-quantize
    to the same level, so re-encode stability holds bitwise.
    """

    native_domain = Domain.UNIT01

    def __init__(self, bits_per_channel: int):
        if not isinstance(bits_per_channel, (int, np.integer)) or isinstance(
            bits_per_channel, bool
        ):
            raise DescriptorError("bits_per_channel must be an integer")
        if not 1 <= bits_per_channel <= 8:
            raise DescriptorError(
                f"bits_per_channel must be in [1, 8], got {bits_per_channel}"
            )
        self.bits_per_channel = int(bits_per_channel)
        self.levels = 1 << self.bits_per_channel

    @property
    def descriptor(self) -> str:
        return f"bits:{self.bits_per_channel}"

    def encode(self, img: ImageTensor) -> Measurement:
        img.require(self.native_domain)
        levels = np.clip(
            np.floor(img.data * self.levels), 0, self.levels - 1
        ).astype(np.uint8)
        return Measurement(self.descriptor, levels)

    def decode(self, measurement: Measurement) -> ImageTensor:
        self._check_measurement(measurement)
        centers = (measurement.payload.astype(np.float64) + 0.5) / self.levels
        return ImageTensor(centers, self.native_domain)

    def measurement_values(self, measurement: Measurement) -> np.ndarray:
        return measurement.payload.astype(np.float64).ravel()

    def _payload_to_bytes(self, payload) -> bytes:
        arr = np.ascontiguousarray(payload, dtype=np.uint8)
        return _pack_dims(*arr.shape) + arr.tobytes()

    def _payload_from_bytes(self, data: bytes):
        h, w, c = struct.unpack_from("<3I", data, 0)
        arr = np.frombuffer(data, dtype=np.uint8, count=h * w * c, offset=12)
        if arr.max(initial=0) >= self.levels:
            raise ValueError("level tensor contains out-of-range levels")
        return arr.reshape(h, w, c).copy()


class LinearOperatorAdapter(GeneralizedOperator):
    """y = Hx on flattened image vectors, decoded via the Moore-Penrose inverse.

    The pseudo-inverse is computed once at construction by a direct SVD-based
    factorization (matrices here are small, n <= 512). Decode returns the
    min-norm least-squares reconstruction H+ y reshaped to the image dims
    recorded in the measurement.
    """

    native_domain = Domain.SIGNED11
    property1_tolerance = 1e-8
    property1_min_exact = 0.0

    MAX_DIM = 512

    def __init__(self, matrix: np.ndarray, descriptor: str = "linear:<memory>"):
        H = np.ascontiguousarray(matrix, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] == 0 or H.shape[1] == 0:
            raise ValueError(f"operator matrix must be 2D and non-empty, got {H.shape}")
        if max(H.shape) > self.MAX_DIM:
            raise ValueError(
                f"matrix dims {H.shape} exceed the direct-factorization limit "
                f"{self.MAX_DIM}"
            )
        if not np.all(np.isfinite(H)):
            raise ValueError("operator matrix contains NaN or Inf")
        self.matrix = H
        self.pinv = np.linalg.pinv(H)
        self._descriptor = descriptor
        norm_h = np.linalg.norm(H)
        if norm_h > 0:
            resid = np.linalg.norm(H @ self.pinv @ H - H)
            if resid >= 1e-8 * norm_h:
                raise ValueError("pseudo-inverse identity H H+ H = H failed")
            resid_p = np.linalg.norm(self.pinv @ H @ self.pinv - self.pinv)
            if resid_p >= 1e-8 * np.linalg.norm(self.pinv):
                raise ValueError("pseudo-inverse identity H+ H H+ = H+ failed")

    @property
    def descriptor(self) -> str:
        return self._descriptor

    def encode(self, img: ImageTensor) -> Measurement:
        img.require(self.native_domain)
        n = self.matrix.shape[1]
        if img.data.size != n:
            raise ValueError(
                f"image has {img.data.size} samples, operator expects {n}"
            )
        y = self.matrix @ img.data.ravel()
        return Measurement(self.descriptor, (img.shape, y))

    def decode(self, measurement: Measurement) -> ImageTensor:
        self._check_measurement(measurement)
        shape, y = measurement.payload
        x = self.pinv @ np.asarray(y, dtype=np.float64)
        return ImageTensor(x.reshape(shape), self.native_domain)

    def measurement_values(self, measurement: Measurement) -> np.ndarray:
        return np.asarray(measurement.payload[1], dtype=np.float64).ravel()

    def _payload_to_bytes(self, payload) -> bytes:
        shape, y = payload
        y = np.ascontiguousarray(y, dtype=np.float64)
        return _pack_dims(*shape, y.size) + y.astype("<f8").tobytes()

    def _payload_from_bytes(self, data: bytes):
        h, w, c, m = struct.unpack_from("<4I", data, 0)
        y = np.frombuffer(data, dtype="<f8", count=m, offset=16).astype(np.float64)
        return ((h, w, c), y)


class JpegOperator(GeneralizedOperator):
    """The JPEG lossy transform wrapped as a measurement operator."""

    native_domain = Domain.BYTE255
    property1_tolerance = 1.0
    property1_min_exact = 0.999

    def __init__(self, params: JpegParams, descriptor: str | None = None):
        self.params = params
        if descriptor is None:
            if params.quality_factor is not None:
                descriptor = (
                    f"jpeg:qf={params.quality_factor}:sub={params.subsampling.value}"
                )
            else:
                descriptor = "jpeg:custom"
        self._descriptor = descriptor

    @classmethod
    def for_quality(
        cls, qf: int, subsampling: Subsampling = Subsampling.S420
    ) -> "JpegOperator":
        return cls(JpegParams.for_quality(qf, subsampling))

    @classmethod
    def from_file(cls, path) -> "JpegOperator":
        with open(os.fspath(path), "rb") as fh:
            params = parse_jfif(fh.read())
        return cls(params, descriptor=f"jpeg:file={os.fspath(path)}")

    @property
    def descriptor(self) -> str:
        return self._descriptor

    def encode(self, img: ImageTensor) -> Measurement:
        return Measurement(self.descriptor, jpeg_encode(img, self.params))

    def decode(self, measurement: Measurement) -> ImageTensor:
        self._check_measurement(measurement)
        return jpeg_decode(measurement.payload)

    def measurement_values(self, measurement: Measurement) -> np.ndarray:
        return measurement.payload.flat_values()

    def _payload_to_bytes(self, payload) -> bytes:
        return coefficients_to_bytes(payload)

    def _payload_from_bytes(self, data: bytes):
        return coefficients_from_bytes(data)


# ---------------------------------------------------------------------------
# Property verification
# ---------------------------------------------------------------------------


def verify_property1(
    op: GeneralizedOperator,
    corpus,
    tolerance: float | None = None,
    min_fraction_exact: float | None = None,
) -> Property1Report:
    """Check encode(decode(encode(x))) against encode(x) over a corpus.

    Images are given in the sampler domain ([-1, 1]); conversion to the
    operator's native domain happens inside the encode wrappers, exactly as
    during sampling.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("property verification needs a non-empty corpus")
    tol = op.property1_tolerance if tolerance is None else tolerance
    min_exact = op.property1_min_exact if min_fraction_exact is None else min_fraction_exact
    total = exact = 0
    max_dev = 0.0
    for x in corpus:
        y = op.encode_signed(x)
        y2 = op.encode_signed(op.decode_signed(y))
        a = op.measurement_values(y)
        b = op.measurement_values(y2)
        dev = np.abs(a - b)
        total += dev.size
        exact += int((dev == 0).sum())
        max_dev = max(max_dev, float(dev.max(initial=0.0)))
    return Property1Report(
        images=len(corpus),
        fraction_exact=exact / total,
        max_deviation=max_dev,
        tolerance=tol,
        min_fraction_exact=min_exact,
    )


def verify_property2(op: GeneralizedOperator, corpus) -> Property2Report:
    """Relative reconstruction residuals of decode(encode(x)) over a corpus."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("property verification needs a non-empty corpus")
    residuals = []
    for x in corpus:
        native = convert_domain(x.require(Domain.SIGNED11), op.native_domain)
        recon = op.decode(op.encode(native))
        norm = np.linalg.norm(native.data)
        resid = np.linalg.norm(recon.data - native.data)
        residuals.append(float(resid / norm) if norm > 0 else float(resid))
    return Property2Report(residuals=tuple(residuals))


# ---------------------------------------------------------------------------
# Descriptors and matrix files
# ---------------------------------------------------------------------------


def read_matrix_file(path) -> np.ndarray:
    """Read an operator matrix: u32 rows, u32 cols, then row-major f64 (all LE)."""
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise ValueError(f"matrix file {path} too short for its dims header")
    m, n = struct.unpack_from("<2I", data, 0)
    expected = 8 + 8 * m * n
    if len(data) != expected:
        raise ValueError(
            f"matrix file {path} holds {len(data)} bytes, expected {expected} "
            f"for a {m}x{n} matrix"
        )
    return np.frombuffer(data, dtype="<f8", count=m * n, offset=8).reshape(m, n).copy()


def write_matrix_file(matrix: np.ndarray, path) -> None:
    """Inverse of :func:`read_matrix_file`."""
    H = np.ascontiguousarray(matrix, dtype=np.float64)
    if H.ndim != 2:
        raise ValueError("operator matrix must be 2D")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2I", *H.shape))
        fh.write(H.astype("<f8").tobytes())


def operator_from_descriptor(descriptor: str) -> GeneralizedOperator:
    """Construct an operator from its CLI descriptor string.

    Supported forms: ``identity``, ``bits:<b>``, ``jpeg:qf=<1..100>[:sub=<444|420>]``,
    ``jpeg:file=<path>``, ``linear:<matrix-file>``.
    """
    family, _, rest = descriptor.partition(":")
    if family == "identity":
        if rest:
            raise DescriptorError("identity operator takes no parameters")
        return IdentityOperator()
    if family == "bits":
        try:
            bits = int(rest)
        except ValueError:
            raise DescriptorError(f"bad bit depth {rest!r} in {descriptor!r}") from None
        return BitDepthQuantizer(bits)
    if family == "linear":
        if not rest:
            raise DescriptorError("linear operator needs a matrix file path")
        try:
            matrix = read_matrix_file(rest)
        except FileNotFoundError:
            raise DescriptorError(f"matrix file not found: {rest}") from None
        return LinearOperatorAdapter(matrix, descriptor=descriptor)
    if family == "jpeg":
        return _jpeg_from_descriptor(descriptor, rest)
    raise DescriptorError(f"unknown operator family in {descriptor!r}")


def _jpeg_from_descriptor(descriptor: str, rest: str) -> JpegOperator:
    if rest.startswith("file="):
        path = rest[len("file=") :]
        if not path:
            raise DescriptorError("jpeg:file= needs a path")
        try:
            return JpegOperator.from_file(path)
        except FileNotFoundError:
            raise DescriptorError(f"jpeg file not found: {path}") from None
    qf = None
    sub = Subsampling.S420
    for part in rest.split(":"):
        key, _, value = part.partition("=")
        if key == "qf":
            try:
                qf = int(value)
            except ValueError:
                raise DescriptorError(f"bad quality factor {value!r}") from None
        elif key == "sub":
            if value == "444":
                sub = Subsampling.S444
            elif value == "420":
                sub = Subsampling.S420
            else:
                raise DescriptorError(f"bad subsampling {value!r}, want 444 or 420")
        else:
            raise DescriptorError(f"unknown jpeg parameter {part!r}")
    if qf is None:
        raise DescriptorError(f"jpeg descriptor {descriptor!r} needs qf= or file=")
    if not 1 <= qf <= 100:
        raise DescriptorError(f"quality factor must be in [1, 100], got {qf}")
    return JpegOperator.for_quality(qf, sub)


def load_measurement(data: bytes) -> tuple[GeneralizedOperator, Measurement]:
    """Reconstruct (operator, measurement) from serialized container bytes.

    JPEG measurements are self-contained (tables travel in the payload).
    ``bits`` and ``identity`` rebuild from the descriptor alone; ``linear``
    needs the matrix file named in its descriptor to still exist.
    """
    desc, payload = split_measurement_container(data)
    family = desc.split(":", 1)[0]
    if family == "jpeg":
        coeffs = coefficients_from_bytes(payload)
        op: GeneralizedOperator = JpegOperator(coeffs.params, descriptor=desc)
        return op, Measurement(desc, coeffs)
    op = operator_from_descriptor(desc)
    return op, Measurement(desc, op._payload_from_bytes(payload))
