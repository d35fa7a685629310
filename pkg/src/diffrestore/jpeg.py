"""The JPEG lossy transform as an invertible-in-the-limit measurement operator.

Implements the lossy half of baseline JPEG: color transform, optional 4:2:0
chroma subsampling, 8x8 block DCT, and quantization against quality-factor
scaled tables. Entropy coding is lossless and therefore bypassed entirely;
the "measurement" is the tensor of quantized DCT coefficients.

Encode and decode are exact inverses of each other up to the information
destroyed by subsampling and quantization, which makes encode(decode(y)) == y
hold exactly for every reachable measurement y whose plane dims are multiples
of the block size (16x16 pixel alignment covers both subsampling modes).
Rounding ties are broken away from zero; chroma uses a box-average downsample
paired with pixel-replication upsample specifically because that pair keeps
the re-encode exact.

For unaligned dims the edge blocks mix real pixels with replicated padding;
decoding discards the padding region and re-encoding replicates the decoded
edge instead, so coefficients of boundary blocks can shift by a few units at
fine quantization. Interior blocks are unaffected.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .image import (
    Domain,
    ImageTensor,
    rgb_to_ycbcr,
    tile_blocks,
    untile_blocks,
    BlockGrid,
    ycbcr_to_rgb,
)

# Raster index of the i-th coefficient in zig-zag scan order.
ZIGZAG_TO_RASTER = np.array(
    [
         0,  1,  8, 16,  9,  2,  3, 10,
        17, 24, 32, 25, 18, 11,  4,  5,
        12, 19, 26, 33, 40, 48, 41, 34,
        27, 20, 13,  6,  7, 14, 21, 28,
        35, 42, 49, 56, 57, 50, 43, 36,
        29, 22, 15, 23, 30, 37, 44, 51,
        58, 59, 52, 45, 38, 31, 39, 46,
        53, 60, 61, 54, 47, 55, 62, 63,
    ]
)

# Standard base quantization tables (Annex K of the JPEG standard), raster order.
BASE_LUMA_TABLE = np.array(
    [
        16, 11, 10, 16, 24, 40, 51, 61,
        12, 12, 14, 19, 26, 58, 60, 55,
        14, 13, 16, 24, 40, 57, 69, 56,
        14, 17, 22, 29, 51, 87, 80, 62,
        18, 22, 37, 56, 68, 109, 103, 77,
        24, 35, 55, 64, 81, 104, 113, 92,
        49, 64, 78, 87, 103, 121, 120, 101,
        72, 92, 95, 98, 112, 100, 103, 99,
    ],
    dtype=np.int64,
)

BASE_CHROMA_TABLE = np.array(
    [
        17, 18, 24, 47, 99, 99, 99, 99,
        18, 21, 26, 66, 99, 99, 99, 99,
        24, 26, 56, 99, 99, 99, 99, 99,
        47, 66, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
        99, 99, 99, 99, 99, 99, 99, 99,
    ],
    dtype=np.int64,
)


def dezigzag(values: np.ndarray) -> np.ndarray:
    """Reorder 64 zig-zag-scanned entries into raster order."""
    values = np.asarray(values)
    if values.shape != (64,):
        raise ValueError("expected exactly 64 entries")
    raster = np.empty(64, dtype=values.dtype)
    raster[ZIGZAG_TO_RASTER] = values
    return raster


def zigzag(values: np.ndarray) -> np.ndarray:
    """Reorder 64 raster entries into zig-zag scan order."""
    values = np.asarray(values)
    if values.shape != (64,):
        raise ValueError("expected exactly 64 entries")
    return values[ZIGZAG_TO_RASTER].copy()


class TableOrder(enum.Enum):
    RASTER = "raster"
    ZIGZAG = "zigzag"


class Subsampling(enum.Enum):
    S444 = "444"
    S420 = "420"


@dataclass(frozen=True, eq=False)
class QuantTable:
    """64 integer quantization divisors with an explicit scan-order tag."""

    values: np.ndarray
    order: TableOrder = TableOrder.RASTER

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64).copy()
        if vals.shape != (64,):
            raise ValueError(f"quant table must have 64 entries, got {vals.shape}")
        if np.any(vals < 1) or np.any(vals > 65535):
            raise ValueError("quant table entries must lie in [1, 65535]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def in_raster(self) -> "QuantTable":
        if self.order is TableOrder.RASTER:
            return self
        return QuantTable(dezigzag(self.values), TableOrder.RASTER)

    def as_matrix(self) -> np.ndarray:
        """8x8 float divisor matrix in raster order."""
        return self.in_raster().values.reshape(8, 8).astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, QuantTable):
            return NotImplemented
        return bool(np.array_equal(self.in_raster().values, other.in_raster().values))


def quant_table_for_qf(qf: int, base: QuantTable) -> QuantTable:
    """Scale a base quantization table by a quality factor, libjpeg-style.

    Scaling uses integer arithmetic throughout:
    s = 5000 // qf for qf < 50, else 200 - 2*qf, and each entry becomes
    clamp((entry*s + 50) // 100, 1, 255).

    Args:
        qf: quality factor in [1, 100]; 1 is coarsest, 100 keeps all entries 1.
        base: base table (any scan order).
    """
    if not isinstance(qf, (int, np.integer)) or isinstance(qf, bool):
        raise ValueError(f"quality factor must be an integer, got {qf!r}")
    if not 1 <= qf <= 100:
        raise ValueError(f"quality factor must be in [1, 100], got {qf}")
    s = 5000 // qf if qf < 50 else 200 - 2 * qf
    scaled = np.clip((base.in_raster().values * s + 50) // 100, 1, 255)
    return QuantTable(scaled, TableOrder.RASTER)


def tables_for_qf(qf: int) -> tuple[QuantTable, QuantTable]:
    """Luma and chroma tables for a quality factor, from the standard bases."""
    return (
        quant_table_for_qf(qf, QuantTable(BASE_LUMA_TABLE)),
        quant_table_for_qf(qf, QuantTable(BASE_CHROMA_TABLE)),
    )


@dataclass(frozen=True)
class JpegParams:
    """The known degradation description: tables, subsampling, optional QF."""

    luma_table: QuantTable
    chroma_table: QuantTable
    subsampling: Subsampling = Subsampling.S420
    quality_factor: int | None = None

    def __post_init__(self):
        if self.quality_factor is not None:
            luma, chroma = tables_for_qf(self.quality_factor)
            if self.luma_table != luma or self.chroma_table != chroma:
                raise ValueError(
                    "tables do not match the declared quality factor "
                    f"{self.quality_factor}"
                )

    @classmethod
    def for_quality(
        cls, qf: int, subsampling: Subsampling = Subsampling.S420
    ) -> "JpegParams":
        luma, chroma = tables_for_qf(qf)
        return cls(luma, chroma, subsampling, quality_factor=qf)


def dct8x8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2D DCT-II of an 8x8 block (1/sqrt(2) scaling on index 0)."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (8, 8):
        raise ValueError(f"expected an 8x8 block, got {block.shape}")
    return scipy.fft.dctn(block, type=2, norm="ortho")


def idct8x8(coeffs: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dct8x8`."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (8, 8):
        raise ValueError(f"expected an 8x8 block, got {coeffs.shape}")
    return scipy.fft.idctn(coeffs, type=2, norm="ortho")


def _dct_blocks(blocks: np.ndarray) -> np.ndarray:
    return scipy.fft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))


def _idct_blocks(blocks: np.ndarray) -> np.ndarray:
    return scipy.fft.idctn(blocks, type=2, norm="ortho", axes=(-2, -1))


def subsample_420(plane: np.ndarray) -> np.ndarray:
    """2x2 box-average downsample. Requires even dims (pad by replication first)."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    if h % 2 or w % 2:
        raise ValueError(f"plane dims must be even for 4:2:0 subsampling, got {h}x{w}")
    # Summation order chosen so four identical samples average back exactly.
    a = plane[0::2, 0::2]
    b = plane[0::2, 1::2]
    c = plane[1::2, 0::2]
    d = plane[1::2, 1::2]
    return ((a + b) + (c + d)) * 0.25


def upsample_420(plane: np.ndarray) -> np.ndarray:
    """Pixel-replication upsample, the exact right inverse of subsample_420."""
    plane = np.asarray(plane, dtype=np.float64)
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)


def _pad_to_even(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    if h % 2 == 0 and w % 2 == 0:
        return plane
    return np.pad(plane, ((0, h % 2), (0, w % 2)), mode="edge")


def _round_half_away(values: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Round to nearest integer, ties away from zero, with robust tie detection.

    Values within tie_tol of an exact half-integer are snapped onto it first,
    so float noise from the transform pipeline cannot flip a tie either way.
    """
    doubled = values * 2.0
    nearest_half = np.rint(doubled)
    snapped = np.where(np.abs(doubled - nearest_half) <= tie_tol,
                       nearest_half * 0.5, values)
    return np.copysign(np.floor(np.abs(snapped) + 0.5), snapped) + 0.0


@dataclass(frozen=True, eq=False)
class JpegCoefficients:
    """Quantized DCT coefficient planes: the measurement y for the JPEG problem.

    Planes are stored in block layout (each 8x8 tile holds that block's
    coefficients) as integer-valued float arrays. Plane 0 is luma; planes 1-2
    are chroma at half resolution when 4:2:0 subsampling is active.
    """

    planes: tuple[np.ndarray, ...] = field(repr=False)
    params: JpegParams
    orig_height: int = 0
    orig_width: int = 0

    def __post_init__(self):
        if len(self.planes) != 3:
            raise ValueError(f"expected 3 coefficient planes, got {len(self.planes)}")
        if self.orig_height < 1 or self.orig_width < 1:
            raise ValueError("original dims must be positive")
        frozen = []
        expected = _plane_dims(self.orig_height, self.orig_width, self.params.subsampling)
        for i, plane in enumerate(self.planes):
            arr = np.ascontiguousarray(plane, dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"plane {i} must be 2D, got shape {arr.shape}")
            if arr.shape != expected[i]:
                raise ValueError(
                    f"plane {i} has shape {arr.shape}, expected {expected[i]} for "
                    f"{self.orig_height}x{self.orig_width} at "
                    f"{self.params.subsampling.value}"
                )
            if not np.all(np.isfinite(arr)) or np.any(arr != np.trunc(arr)):
                raise ValueError(f"plane {i} coefficients must be integer-valued")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "planes", tuple(frozen))

    def flat_values(self) -> np.ndarray:
        """All coefficients as one flat vector (plane order Y, Cb, Cr)."""
        return np.concatenate([p.ravel() for p in self.planes])


def _ceil_to(n: int, m: int) -> int:
    return -(-n // m) * m


def _plane_dims(
    height: int, width: int, subsampling: Subsampling
) -> tuple[tuple[int, int], ...]:
    luma = (_ceil_to(height, 8), _ceil_to(width, 8))
    if subsampling is Subsampling.S444:
        return (luma, luma, luma)
    ch = -(-_pad_even(height) // 2)
    cw = -(-_pad_even(width) // 2)
    chroma = (_ceil_to(ch, 8), _ceil_to(cw, 8))
    return (luma, chroma, chroma)


def _pad_even(n: int) -> int:
    return n + (n % 2)


def _encode_plane(plane: np.ndarray, table: QuantTable) -> np.ndarray:
    grid = tile_blocks(plane)
    coeffs = _dct_blocks(grid.blocks) / table.as_matrix()
    quantized = _round_half_away(coeffs)
    rows, cols = quantized.shape[:2]
    return quantized.swapaxes(1, 2).reshape(rows * 8, cols * 8)


def _decode_plane(plane: np.ndarray, table: QuantTable, out_h: int, out_w: int) -> np.ndarray:
    rows, cols = plane.shape[0] // 8, plane.shape[1] // 8
    blocks = plane.reshape(rows, 8, cols, 8).swapaxes(1, 2)
    pixels = _idct_blocks(blocks * table.as_matrix())
    return untile_blocks(BlockGrid(pixels, out_h, out_w))


def jpeg_encode(img: ImageTensor, params: JpegParams) -> JpegCoefficients:
    """Run the lossy JPEG encode pipeline down to quantized DCT coefficients.

    Pipeline: RGB -> YCbCr, level shift -128, optional 4:2:0 chroma
    subsampling, 8x8 tiling with edge-replicated padding, orthonormal DCT,
    division by the quantization table, round half away from zero.

    Args:
        img: Byte255 RGB image.
        params: quantization tables and subsampling mode.
    """
    img.require(Domain.BYTE255, channels=3)
    ycc = rgb_to_ycbcr(img).data - 128.0
    channels = [ycc[:, :, 0], ycc[:, :, 1], ycc[:, :, 2]]
    if params.subsampling is Subsampling.S420:
        channels[1] = subsample_420(_pad_to_even(channels[1]))
        channels[2] = subsample_420(_pad_to_even(channels[2]))
    tables = (params.luma_table, params.chroma_table, params.chroma_table)
    planes = tuple(_encode_plane(ch, t) for ch, t in zip(channels, tables))
    return JpegCoefficients(planes, params, img.height, img.width)


def jpeg_decode(coeffs: JpegCoefficients) -> ImageTensor:
    """Invert the encode pipeline into a float RGB image (no clamp, no round).

    Output dims equal the original dims recorded in the coefficients; values
    may stray slightly outside [0, 255] and are left untouched so downstream
    re-encoding reproduces the measurement exactly.
    """
    params = coeffs.params
    h, w = coeffs.orig_height, coeffs.orig_width
    if params.subsampling is Subsampling.S420:
        ch, cw = -(-_pad_even(h) // 2), -(-_pad_even(w) // 2)
        dims = [(h, w), (ch, cw), (ch, cw)]
    else:
        dims = [(h, w)] * 3
    tables = (params.luma_table, params.chroma_table, params.chroma_table)
    channels = [
        _decode_plane(p, t, dh, dw)
        for p, t, (dh, dw) in zip(coeffs.planes, tables, dims)
    ]
    if params.subsampling is Subsampling.S420:
        channels[1] = upsample_420(channels[1])[:h, :w]
        channels[2] = upsample_420(channels[2])[:h, :w]
    ycc = np.stack(channels, axis=2) + 128.0
    return ycbcr_to_rgb(ImageTensor(ycc, Domain.BYTE255))


_CONTAINER_MAGIC = b"JCF1"


def coefficients_to_bytes(coeffs: JpegCoefficients) -> bytes:
    """Serialize coefficients to the fixture container format.

    Layout (all integers little-endian):
      magic "JCF1" | u32 height | u32 width | u8 subsampling (0=444, 1=420)
      | i16 quality factor (-1 if absent) | 64 x u16 luma table (raster)
      | 64 x u16 chroma table (raster) | u8 plane count
      | per plane: u32 rows, u32 cols, rows*cols f32 coefficients (row-major)
    """
    p = coeffs.params
    out = bytearray()
    out += _CONTAINER_MAGIC
    out += struct.pack("<IIBh", coeffs.orig_height, coeffs.orig_width,
                       0 if p.subsampling is Subsampling.S444 else 1,
                       -1 if p.quality_factor is None else p.quality_factor)
    out += p.luma_table.in_raster().values.astype("<u2").tobytes()
    out += p.chroma_table.in_raster().values.astype("<u2").tobytes()
    out += struct.pack("<B", len(coeffs.planes))
    for plane in coeffs.planes:
        out += struct.pack("<II", plane.shape[0], plane.shape[1])
        out += plane.astype("<f4").tobytes()
    return bytes(out)


def coefficients_from_bytes(data: bytes) -> JpegCoefficients:
    """Inverse of :func:`coefficients_to_bytes`."""
    view = memoryview(data)
    if bytes(view[:4]) != _CONTAINER_MAGIC:
        raise ValueError("not a coefficient container (bad magic)")
    h, w, sub, qf = struct.unpack_from("<IIBh", view, 4)
    pos = 4 + struct.calcsize("<IIBh")
    luma = np.frombuffer(view, dtype="<u2", count=64, offset=pos).astype(np.int64)
    pos += 128
    chroma = np.frombuffer(view, dtype="<u2", count=64, offset=pos).astype(np.int64)
    pos += 128
    (nplanes,) = struct.unpack_from("<B", view, pos)
    pos += 1
    params = JpegParams(
        QuantTable(luma),
        QuantTable(chroma),
        Subsampling.S444 if sub == 0 else Subsampling.S420,
        quality_factor=None if qf < 0 else qf,
    )
    planes = []
    for _ in range(nplanes):
        rows, cols = struct.unpack_from("<II", view, pos)
        pos += 8
        plane = np.frombuffer(view, dtype="<f4", count=rows * cols, offset=pos)
        pos += rows * cols * 4
        planes.append(plane.astype(np.float64).reshape(rows, cols))
    if pos != len(data):
        raise ValueError("trailing bytes after coefficient planes")
    return JpegCoefficients(tuple(planes), params, h, w)
