"""Denoiser backends and the noise-to-clean conversion served by the bridge.

A backend is a callable ``predict(x, t, alpha) -> prediction`` where ``x``
is a float64 array shaped (height, width, channels) and the prediction has
the same shape.  What the prediction *means* is declared by the configured
flavor:

``x0``
    the model outputs its clean-image estimate directly;
``eps``
    the model outputs the noise it believes was mixed into ``x``, and the
    server converts that to a clean-image estimate with :func:`eps_to_x0`
    using the ``alpha`` carried by each request.

Either way the bridge always *answers* with the clean-image estimate, so
the sampler on the other end never depends on model flavor.

Backends come in two kinds:

* ``builtin:`` analytic models (no weights needed) used for conformance and
  determinism testing.  Built-ins are natively clean-image estimators; when
  declared with the ``eps`` flavor they emit the algebraically equivalent
  noise prediction, which exercises the conversion path end to end.
* A filesystem path to a TorchScript archive.  The module is called as
  ``module(x, t)`` — or ``module(x, t, label)`` when a class label is
  configured — with ``x`` a float32 tensor shaped (1, channels, height,
  width) and ``t`` (and ``label``) int64 tensors shaped (1,).  Its output,
  same shape as ``x``, is taken verbatim as the declared flavor.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

FLAVORS = ("x0", "eps")

BUILTIN_PREFIX = "builtin:"

Predictor = Callable[[np.ndarray, int, float], np.ndarray]
PairScorer = Callable[[np.ndarray, np.ndarray], float]


class BridgeStartupError(RuntimeError):
    """The bridge cannot start: bad configuration or unloadable checkpoint."""


@dataclass(frozen=True)
class BridgeConfig:
    """Everything the bridge needs to serve one model.

    ``flavor`` must always be stated explicitly — there is no safe default
    for what a checkpoint's output means.  ``class_label`` defaults to
    ``None`` (unconditional); when set, it is forwarded to TorchScript
    checkpoints as a third argument.
    """

    checkpoint: str
    flavor: str
    device: str = "cpu"
    image_size: int | None = None
    class_label: int | None = None
    lpips_checkpoint: str | None = None

    def __post_init__(self) -> None:
        if not self.checkpoint:
            raise ValueError("checkpoint must not be empty")
        if self.flavor not in FLAVORS:
            raise ValueError(
                f"flavor must be one of {FLAVORS}, got {self.flavor!r}"
            )
        if not self.device:
            raise ValueError("device must not be empty")
        if self.image_size is not None and self.image_size <= 0:
            raise ValueError(
                f"image size must be positive, got {self.image_size}"
            )
        if self.class_label is not None and self.class_label < 0:
            raise ValueError(
                f"class label must be non-negative, got {self.class_label}"
            )


def eps_to_x0(x_t: np.ndarray, eps: np.ndarray, alpha: float) -> np.ndarray:
    """Clean-image estimate implied by a noise prediction.

    Inverts the noising mix ``x_t = sqrt(alpha) * x_0 + sqrt(1 - alpha) * eps``:

        x_0 = (x_t - sqrt(1 - alpha) * eps) / sqrt(alpha)

    At ``alpha == 1`` the noise term vanishes and the result is ``x_t``
    itself, whatever ``eps`` says.
    """
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {eps.shape}")
    return (x_t - math.sqrt(1.0 - alpha) * eps) / math.sqrt(alpha)


def _as_eps_flavor(clean_fn: Predictor) -> Predictor:
    """Expresses a clean-image estimator as a noise predictor.

    Solves the noising mix for eps given the estimator's x_0; converting the
    result back through :func:`eps_to_x0` recovers the estimate exactly, so
    a built-in served under both flavors must answer identically.  At
    ``alpha == 1`` any finite prediction is ignored by the conversion, so
    zero noise is reported.
    """

    def predict(x: np.ndarray, t: int, alpha: float) -> np.ndarray:
        if alpha >= 1.0:
            return np.zeros_like(x)
        clean = clean_fn(x, t, alpha)
        return (x - math.sqrt(alpha) * clean) / math.sqrt(1.0 - alpha)

    return predict


def _builtin_clean_fn(name: str) -> Predictor:
    parts = name.split(":")
    if parts[0] == "identity" and len(parts) == 1:
        return lambda x, t, alpha: x
    if parts[0] == "gauss":
        if len(parts) == 1:
            sigma = 1.0
        elif len(parts) == 2:
            try:
                sigma = float(parts[1])
            except ValueError:
                sigma = math.nan
            if not sigma > 0 or not math.isfinite(sigma):
                raise BridgeStartupError(
                    f"builtin:gauss needs a positive blur width, got {parts[1]!r}"
                )
        else:
            raise BridgeStartupError(f"unrecognized builtin model {name!r}")
        from scipy.ndimage import gaussian_filter

        def blur(x: np.ndarray, t: int, alpha: float) -> np.ndarray:
            return gaussian_filter(x, sigma=(sigma, sigma, 0), mode="nearest")

        return blur
    raise BridgeStartupError(
        f"unrecognized builtin model {name!r} "
        "(known: builtin:identity, builtin:gauss[:<width>])"
    )


def _load_torch(device: str):
    """Imports torch, pins determinism knobs, and resolves the device."""
    try:
        import torch
    except ImportError as exc:  # pragma: no cover - torch is a declared dep
        raise BridgeStartupError(f"torch is not importable: {exc}") from exc
    torch.manual_seed(0)
    torch.set_num_threads(1)
    try:
        resolved = torch.device(device)
    except RuntimeError as exc:
        raise BridgeStartupError(f"invalid device {device!r}: {exc}") from exc
    return torch, resolved


def _load_torchscript_module(path: str, device: str):
    torch, resolved = _load_torch(device)
    if not os.path.exists(path):
        raise BridgeStartupError(f"checkpoint {path!r} does not exist")
    try:
        module = torch.jit.load(path, map_location=resolved)
    except (RuntimeError, ValueError, OSError) as exc:
        raise BridgeStartupError(
            f"cannot load checkpoint {path!r}: {exc}"
        ) from exc
    module.eval()
    return torch, resolved, module


def _torchscript_predictor(config: BridgeConfig) -> Predictor:
    torch, device, module = _load_torchscript_module(
        config.checkpoint, config.device
    )
    label = config.class_label

    def predict(x: np.ndarray, t: int, alpha: float) -> np.ndarray:
        height, width, channels = x.shape
        planes = np.ascontiguousarray(np.moveaxis(x, 2, 0), dtype=np.float32)
        batch = torch.from_numpy(planes).unsqueeze(0).to(device)
        step = torch.tensor([int(t)], dtype=torch.int64, device=device)
        with torch.no_grad():
            if label is None:
                out = module(batch, step)
            else:
                out = module(
                    batch,
                    step,
                    torch.tensor([label], dtype=torch.int64, device=device),
                )
        if not torch.is_tensor(out):
            raise ValueError(
                f"checkpoint returned {type(out).__name__}, expected a tensor"
            )
        array = out.detach().cpu().numpy().astype(np.float64)
        if array.shape != (1, channels, height, width):
            raise ValueError(
                f"checkpoint returned shape {array.shape}, expected "
                f"{(1, channels, height, width)}"
            )
        return np.moveaxis(array[0], 0, 2)

    return predict


def load_denoiser(config: BridgeConfig) -> Predictor:
    """Builds the predictor named by ``config.checkpoint`` in the declared flavor."""
    if config.checkpoint.startswith(BUILTIN_PREFIX):
        if config.class_label is not None:
            raise BridgeStartupError(
                "builtin models are unconditional; drop the class label"
            )
        clean = _builtin_clean_fn(config.checkpoint[len(BUILTIN_PREFIX):])
        if config.flavor == "x0":
            return clean
        return _as_eps_flavor(clean)
    return _torchscript_predictor(config)


def load_scorer(config: BridgeConfig) -> PairScorer | None:
    """Loads the optional perceptual pair scorer, if one is configured.

    The TorchScript module is called as ``module(a, b)`` with two float32
    tensors shaped (1, channels, height, width) and must return a scalar.
    """
    if config.lpips_checkpoint is None:
        return None
    torch, device, module = _load_torchscript_module(
        config.lpips_checkpoint, config.device
    )

    def score(a: np.ndarray, b: np.ndarray) -> float:
        def to_batch(image: np.ndarray):
            planes = np.ascontiguousarray(
                np.moveaxis(image, 2, 0), dtype=np.float32
            )
            return torch.from_numpy(planes).unsqueeze(0).to(device)

        with torch.no_grad():
            out = module(to_batch(a), to_batch(b))
        if not torch.is_tensor(out) or out.numel() != 1:
            raise ValueError("pair scorer must return a single scalar")
        return float(out.detach().cpu().reshape(-1)[0])

    return score
