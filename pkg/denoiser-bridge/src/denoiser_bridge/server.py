"""Frame loop and command line for the denoiser bridge.

The bridge is a child process: requests arrive as frames on standard input,
responses leave as frames on standard output, and *nothing else* is ever
written to standard output — logs go to standard error.  The loop is
single-threaded and strictly serial; run several bridge processes when you
want parallelism.

Error handling has two tiers, mirroring the protocol module's distinction:

* a malformed frame (broken structure) gets a best-effort ``op=error``
  response and then the process exits nonzero — the stream can no longer
  be trusted;
* a well-formed request that cannot be served (unknown op, bad dims, model
  failure) gets an ``op=error`` response and the loop continues.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import BinaryIO

import numpy as np

from .models import (
    FLAVORS,
    BridgeConfig,
    BridgeStartupError,
    eps_to_x0,
    load_denoiser,
    load_scorer,
)
from .protocol import (
    MalformedFrame,
    decode_tensor,
    encode_tensor,
    parse_dims,
    read_frame,
    write_frame,
)

EXIT_OK = 0
EXIT_MALFORMED = 1
EXIT_STARTUP = 2

log = logging.getLogger("denoiser_bridge")


class RequestError(ValueError):
    """A well-formed request that cannot be served; answered with op=error."""


def _require_tensor_fields(fields: dict[str, str]) -> tuple[int, ...]:
    if fields.get("dtype", "f32") != "f32":
        raise RequestError(f"unsupported dtype {fields['dtype']!r}")
    if "dims" not in fields:
        raise RequestError("request is missing the dims field")
    try:
        return parse_dims(fields["dims"])
    except ValueError as exc:
        raise RequestError(str(exc)) from exc


def _decode_payload(payload: bytes, dims: tuple[int, ...]) -> np.ndarray:
    try:
        return decode_tensor(payload, dims)
    except ValueError as exc:
        raise RequestError(str(exc)) from exc


def _parse_step_and_alpha(fields: dict[str, str]) -> tuple[int, float]:
    try:
        t = int(fields["t"])
    except KeyError:
        raise RequestError("request is missing the t field") from None
    except ValueError as exc:
        raise RequestError(f"unparseable t field {fields['t']!r}") from exc
    try:
        alpha = float(fields["alpha"])
    except KeyError:
        raise RequestError("request is missing the alpha field") from None
    except ValueError as exc:
        raise RequestError(
            f"unparseable alpha field {fields['alpha']!r}"
        ) from exc
    if not 0.0 < alpha <= 1.0:
        raise RequestError(f"alpha must be in (0, 1], got {alpha}")
    return t, alpha


class _Session:
    """One served connection: a loaded model plus the two pipe streams."""

    def __init__(
        self, config: BridgeConfig, stdin: BinaryIO, stdout: BinaryIO
    ):
        self.config = config
        self.stdin = stdin
        self.stdout = stdout
        self.denoiser = load_denoiser(config)
        self.scorer = load_scorer(config)

    # -- responses ------------------------------------------------------

    def _send_error(self, message: str) -> None:
        write_frame(self.stdout, {"op": "error", "message": message})

    def _send_tensor(self, values: np.ndarray) -> None:
        write_frame(
            self.stdout,
            {
                "op": "result",
                "dims": ",".join(str(d) for d in values.shape),
                "dtype": "f32",
            },
            encode_tensor(values),
        )

    # -- request handlers -------------------------------------------------

    def _handle_echo(self, fields: dict[str, str], payload: bytes) -> None:
        reply = dict(fields)
        reply["op"] = "result"
        write_frame(self.stdout, reply, payload)

    def _handle_denoise(self, fields: dict[str, str], payload: bytes) -> None:
        dims = _require_tensor_fields(fields)
        t, alpha = _parse_step_and_alpha(fields)
        if len(dims) != 3:
            raise RequestError(
                f"denoise expects height,width,channels dims, got {dims}"
            )
        x_t = _decode_payload(payload, dims)
        size = self.config.image_size
        if size is not None and (dims[0] != size or dims[1] != size):
            raise RequestError(
                f"model is configured for {size}x{size} images, "
                f"got {dims[0]}x{dims[1]}"
            )
        prediction = self.denoiser(x_t, t, alpha)
        prediction = np.asarray(prediction, dtype=np.float64)
        if prediction.shape != x_t.shape:
            raise RequestError(
                f"model returned shape {prediction.shape}, "
                f"expected {x_t.shape}"
            )
        if self.config.flavor == "eps":
            prediction = eps_to_x0(x_t, prediction, alpha)
        if not np.all(np.isfinite(prediction)):
            raise RequestError("model returned non-finite values")
        self._send_tensor(prediction)

    def _handle_lpips(self, fields: dict[str, str], payload: bytes) -> None:
        if self.scorer is None:
            raise RequestError("no perceptual scorer is configured")
        dims = _require_tensor_fields(fields)
        if len(dims) != 4 or dims[0] != 2:
            raise RequestError(
                "lpips expects a pair stacked on a new leading axis "
                f"(2,height,width,channels), got {dims}"
            )
        pair = _decode_payload(payload, dims)
        value = float(self.scorer(pair[0], pair[1]))
        if not np.isfinite(value):
            raise RequestError("scorer returned a non-finite value")
        self._send_tensor(np.asarray([value], dtype=np.float64))

    # -- frame loop ---------------------------------------------------------

    def run(self) -> int:
        handlers = {
            "echo": self._handle_echo,
            "denoise": self._handle_denoise,
            "lpips": self._handle_lpips,
        }
        while True:
            try:
                frame = read_frame(self.stdin)
            except MalformedFrame as exc:
                log.error("malformed frame: %s", exc)
                try:
                    self._send_error(f"malformed frame: {exc}")
                except OSError:
                    pass
                return EXIT_MALFORMED
            if frame is None:
                log.info("end of stream; shutting down")
                return EXIT_OK
            fields, payload = frame
            op = fields["op"]
            handler = handlers.get(op)
            try:
                if handler is None:
                    raise RequestError(f"unsupported op {op!r}")
                handler(fields, payload)
            except RequestError as exc:
                log.warning("request failed: %s", exc)
                self._send_error(str(exc))
            except Exception as exc:  # keep serving after a model blow-up
                log.exception("unexpected failure handling op=%s", op)
                self._send_error(f"internal failure: {exc}")


def serve(
    config: BridgeConfig,
    stdin: BinaryIO | None = None,
    stdout: BinaryIO | None = None,
) -> int:
    """Loads the configured model and serves frames until end of stream.

    Returns the process exit code: 0 after a clean end of stream, nonzero
    after a malformed frame.
    """
    if stdin is None:
        stdin = sys.stdin.buffer
    if stdout is None:
        stdout = sys.stdout.buffer
    session = _Session(config, stdin, stdout)
    log.info(
        "serving checkpoint=%s flavor=%s device=%s image_size=%s",
        config.checkpoint,
        config.flavor,
        config.device,
        config.image_size,
    )
    return session.run()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="denoiser-bridge",
        description=(
            "Serve a diffusion denoiser over the framed stdio protocol. "
            "The checkpoint is a TorchScript archive path or a builtin "
            "analytic model (builtin:identity, builtin:gauss[:<width>])."
        ),
    )
    parser.add_argument(
        "--checkpoint",
        required=True,
        help="TorchScript archive path or builtin:<name> analytic model",
    )
    parser.add_argument(
        "--flavor",
        required=True,
        choices=FLAVORS,
        help=(
            "what the model outputs: its clean-image estimate (x0) or the "
            "noise it believes was mixed in (eps)"
        ),
    )
    parser.add_argument(
        "--device",
        default="cpu",
        help="torch device for checkpoint inference (default: cpu)",
    )
    parser.add_argument(
        "--image-size",
        type=int,
        default=None,
        help="if set, reject denoise requests that are not this size square",
    )
    parser.add_argument(
        "--class-label",
        type=int,
        default=None,
        help=(
            "class label forwarded to conditional checkpoints "
            "(default: unconditional)"
        ),
    )
    parser.add_argument(
        "--lpips",
        default=None,
        metavar="PATH",
        help="optional TorchScript pair scorer enabling the lpips op",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        help="stderr log level (default: WARNING)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=args.log_level.upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    # Frames own the real standard output; reroute accidental prints from
    # loaded checkpoint code to standard error so they cannot corrupt frames.
    out = sys.stdout.buffer
    sys.stdout = sys.stderr
    try:
        config = BridgeConfig(
            checkpoint=args.checkpoint,
            flavor=args.flavor,
            device=args.device,
            image_size=args.image_size,
            class_label=args.class_label,
            lpips_checkpoint=args.lpips,
        )
    except ValueError as exc:
        print(f"denoiser-bridge: {exc}", file=sys.stderr)
        return EXIT_STARTUP
    try:
        return serve(config, stdout=out)
    except BridgeStartupError as exc:
        print(f"denoiser-bridge: {exc}", file=sys.stderr)
        return EXIT_STARTUP


if __name__ == "__main__":  # pragma: no cover - exercised via subprocess
    raise SystemExit(main())
