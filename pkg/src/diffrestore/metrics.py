"""Image quality metrics (PSNR, SSIM) and a bits-per-pixel rate proxy.

Metrics are computed on 8-bit RGB content: inputs are converted to the
[0, 255] domain, clamped, and rounded before comparison, matching how
restorations are evaluated against 8-bit ground truth. The rate proxy is
the zero-order empirical entropy of the quantized coefficient stream; it
tracks the ordering of real compressed sizes without implementing an
entropy coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .image import Domain, ImageTensor, convert_domain
from .jpeg import JpegCoefficients


def _as_uint8_array(img: ImageTensor) -> np.ndarray:
    byte = convert_domain(img, Domain.BYTE255)
    return np.rint(np.clip(byte.data, 0.0, 255.0))


def psnr(a: ImageTensor, b: ImageTensor, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB over all samples and channels.

    Identical inputs give math.inf (serialized as "inf" in reports).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    x = _as_uint8_array(a)
    y = _as_uint8_array(b)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2
    w = np.exp(-(offsets**2) / (2 * sigma * sigma))
    return w / w.sum()


_SSIM_WINDOW = _gaussian_window()


def _windowed_mean(plane: np.ndarray) -> np.ndarray:
    # Separable Gaussian filter, valid region only (no padded windows).
    half = len(_SSIM_WINDOW) // 2
    out = convolve1d(plane, _SSIM_WINDOW, axis=0)
    out = convolve1d(out, _SSIM_WINDOW, axis=1)
    return out[half:-half, half:-half]


def ssim(a: ImageTensor, b: ImageTensor, peak: float = 255.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window, sigma 1.5.

    Stabilizers use K1 = 0.01 and K2 = 0.03 against the dynamic range;
    channels are scored independently and averaged.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.height, a.width) < 11:
        raise ValueError("image must be at least 11x11 for the SSIM window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    x = _as_uint8_array(a)
    y = _as_uint8_array(b)
    scores = []
    for ch in range(a.channels):
        xp, yp = x[:, :, ch], y[:, :, ch]
        mu_x = _windowed_mean(xp)
        mu_y = _windowed_mean(yp)
        var_x = _windowed_mean(xp * xp) - mu_x * mu_x
        var_y = _windowed_mean(yp * yp) - mu_y * mu_y
        cov = _windowed_mean(xp * yp) - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        scores.append(float(score.mean()))
    return float(np.mean(scores))


def bpp(coeffs: JpegCoefficients) -> float:
    """Zero-order entropy of the coefficient stream per source pixel.

    A rate proxy, not a file size: each plane's symbol distribution is
    entropy-coded ideally and the totals are divided by the pixel count.
    """
    total_bits = 0.0
    for plane in coeffs.planes:
        symbols = plane.ravel()
        _, counts = np.unique(symbols, return_counts=True)
        p = counts / symbols.size
        entropy = float(-(p * np.log2(p)).sum())
        total_bits += entropy * symbols.size
    return total_bits / (coeffs.orig_height * coeffs.orig_width)


@dataclass(frozen=True)
class MetricReport:
    """Per-image metric rows plus their corpus means."""

    image_ids: tuple[str, ...]
    psnr_values: tuple[float, ...]
    ssim_values: tuple[float, ...]
    bpp_values: tuple[float | None, ...]

    def __post_init__(self):
        n = len(self.image_ids)
        if not (len(self.psnr_values) == len(self.ssim_values) == len(self.bpp_values) == n):
            raise ValueError("metric report columns must have equal lengths")
        if n == 0:
            raise ValueError("metric report needs at least one image")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def mean_bpp(self) -> float | None:
        present = [v for v in self.bpp_values if v is not None]
        return float(np.mean(present)) if present else None

    def to_csv(self) -> str:
        """Line-oriented CSV: image id, psnr, ssim, bpp (blank when absent)."""
        lines = ["image_id,psnr,ssim,bpp"]
        for img_id, p, s, r in zip(
            self.image_ids, self.psnr_values, self.ssim_values, self.bpp_values
        ):
            rate = "" if r is None else format_metric(r)
            lines.append(f"{img_id},{format_metric(p)},{format_metric(s)},{rate}")
        return "\n".join(lines) + "\n"


def format_metric(value: float) -> str:
    """Serialize a metric value; infinities become the 'inf' sentinel."""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6f}"


def report_for_pairs(
    pairs, image_ids=None, bpp_values=None
) -> MetricReport:
    """Score (restored, reference) image pairs into a MetricReport."""
    pairs = list(pairs)
    if image_ids is None:
        image_ids = [str(i) for i in range(len(pairs))]
    if bpp_values is None:
        bpp_values = [None] * len(pairs)
    return MetricReport(
        image_ids=tuple(image_ids),
        psnr_values=tuple(psnr(a, b) for a, b in pairs),
        ssim_values=tuple(ssim(a, b) for a, b in pairs),
        bpp_values=tuple(bpp_values),
    )
