"""Child process serving diffusion denoiser predictions over framed stdio.

The package has three layers: :mod:`denoiser_bridge.protocol` implements the
wire format, :mod:`denoiser_bridge.models` loads the prediction backends
(builtin analytic models or TorchScript checkpoints) and converts noise
predictions to clean-image estimates, and :mod:`denoiser_bridge.server`
runs the frame loop behind the ``denoiser-bridge`` command.
"""

from .models import (
    FLAVORS,
    BridgeConfig,
    BridgeStartupError,
    eps_to_x0,
    load_denoiser,
    load_scorer,
)
from .protocol import MalformedFrame, read_frame, write_frame
from .server import main, serve

__all__ = [
    "FLAVORS",
    "BridgeConfig",
    "BridgeStartupError",
    "MalformedFrame",
    "eps_to_x0",
    "load_denoiser",
    "load_scorer",
    "main",
    "read_frame",
    "serve",
    "write_frame",
]

__version__ = "0.1.0"
