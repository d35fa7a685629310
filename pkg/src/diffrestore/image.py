"""Image tensors, value-domain conversions, color transforms, and 8x8 tiling.

All pixel data is carried as float64 numpy arrays of shape (H, W, C) wrapped
in an :class:`ImageTensor` together with a value-domain tag. The tag is
metadata: operations declare which domain they require and reject mismatches,
but values are never clamped to the domain bounds except at PNG export.
"""

from __future__ import annotations

import enum
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np


class DomainMismatchError(ValueError):
    """An operation received an image in the wrong value domain."""


class Domain(enum.Enum):
    """Declared value range of an image tensor."""

    UNIT01 = "unit01"      # [0, 1]
    SIGNED11 = "signed11"  # [-1, 1]
    BYTE255 = "byte255"    # [0, 255]

    @property
    def bounds(self) -> tuple[float, float]:
        return _DOMAIN_BOUNDS[self]


_DOMAIN_BOUNDS = {
    Domain.UNIT01: (0.0, 1.0),
    Domain.SIGNED11: (-1.0, 1.0),
    Domain.BYTE255: (0.0, 255.0),
}


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C float image with a declared value domain.

    The underlying array is stored read-only; operations return new tensors.
    Values may exceed the nominal domain bounds (no clamping happens inside
    the processing pipeline), but NaN/Inf are rejected.
    """

    data: np.ndarray
    domain: Domain

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise ValueError(f"image data must be HxWxC, got shape {self.data.shape}")
        if arr.shape[2] not in (1, 3):
            raise ValueError(f"channel count must be 1 or 3, got {arr.shape[2]}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains NaN or Inf samples")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def require(self, domain: Domain, channels: int | None = None) -> "ImageTensor":
        """Assert domain (and optionally channel count); return self."""
        if self.domain is not domain:
            raise DomainMismatchError(
                f"expected {domain.value} image, got {self.domain.value}"
            )
        if channels is not None and self.channels != channels:
            raise DomainMismatchError(
                f"expected {channels}-channel image, got {self.channels}"
            )
        return self


def convert_domain(img: ImageTensor, target: Domain) -> ImageTensor:
    """Affinely remap an image between value domains.

    The map sends the source bounds onto the target bounds; it is monotone,
    affine, and any round trip composes to the identity to ~1e-16 relative.
    """
    if img.domain is target:
        return img
    lo_s, hi_s = img.domain.bounds
    lo_t, hi_t = target.bounds
    scale = (hi_t - lo_t) / (hi_s - lo_s)
    return ImageTensor((img.data - lo_s) * scale + lo_t, target)


# JFIF full-range BT.601 color transform. Rows: Y, Cb, Cr; Cb/Cr offset 128.
_RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)


def rgb_to_ycbcr(img: ImageTensor) -> ImageTensor:
    """Convert a Byte255 RGB image to full-range YCbCr (unclamped).

    Chroma channels carry a +128 offset; outputs may slightly exceed
    [0, 255] and are intentionally left unclamped so that the transform
    stays exactly invertible.
    """
    img.require(Domain.BYTE255, channels=3)
    ycc = img.data @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET
    return ImageTensor(ycc, Domain.BYTE255)


def ycbcr_to_rgb(img: ImageTensor) -> ImageTensor:
    """Exact inverse of :func:`rgb_to_ycbcr` (unclamped)."""
    img.require(Domain.BYTE255, channels=3)
    rgb = (img.data - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T
    return ImageTensor(rgb, Domain.BYTE255)


@dataclass(frozen=True)
class BlockGrid:
    """A single-channel plane split into 8x8 blocks with edge-replicated padding."""

    blocks: np.ndarray = field(repr=False)  # (rows, cols, 8, 8)
    orig_height: int = 0
    orig_width: int = 0

    @property
    def padded_height(self) -> int:
        return self.blocks.shape[0] * 8

    @property
    def padded_width(self) -> int:
        return self.blocks.shape[1] * 8


def tile_blocks(plane: np.ndarray) -> BlockGrid:
    """Split a 2D plane into 8x8 blocks, replicating edge rows/columns to pad.

    Args:
        plane: 2D array; both dimensions must be positive.

    Returns:
        BlockGrid whose padded dims are the dims rounded up to multiples of 8.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError(f"expected a 2D plane, got shape {plane.shape}")
    h, w = plane.shape
    if h == 0 or w == 0:
        raise ValueError("cannot tile a zero-sized plane")
    rows = -(-h // 8)
    cols = -(-w // 8)
    padded = np.pad(plane, ((0, rows * 8 - h), (0, cols * 8 - w)), mode="edge")
    blocks = padded.reshape(rows, 8, cols, 8).swapaxes(1, 2)
    return BlockGrid(np.ascontiguousarray(blocks), h, w)


def untile_blocks(grid: BlockGrid) -> np.ndarray:
    """Reassemble a BlockGrid into a plane cropped to the original dims."""
    rows, cols = grid.blocks.shape[:2]
    padded = grid.blocks.swapaxes(1, 2).reshape(rows * 8, cols * 8)
    return padded[: grid.orig_height, : grid.orig_width].copy()


def read_png(path) -> ImageTensor:
    """Read an 8-bit image file as a Byte255 RGB tensor."""
    from PIL import Image

    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.float64)
    return ImageTensor(arr, Domain.BYTE255)


def write_png(img: ImageTensor, path) -> None:
    """Export to 8-bit RGB PNG: convert to Byte255, clamp, round to nearest.

    The file is written atomically (temp file + rename) so concurrent readers
    never observe a partial image.
    """
    from PIL import Image

    byte = convert_domain(img, Domain.BYTE255)
    arr = np.rint(np.clip(byte.data, 0.0, 255.0)).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".png.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(arr, mode="RGB").save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
