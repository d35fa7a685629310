"""Command-line entry point wiring operators, denoisers, sampler, and metrics.

Subcommands:

    encode     apply a measurement operator to an image, write the measurement
    restore    sample restorations of a measurement (or run the synthetic
               mixture experiment with ``--synthetic gmm16``)
    verify-op  check an operator's re-measurement stability over a corpus
    rd-curve   rate-distortion sweep over JPEG quality factors
    metrics    batch PSNR/SSIM between two directories of images

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.  All
randomness flows from ``--seed``; re-running a command with the same inputs
and seed reproduces its outputs bitwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bridge_client import BridgeClient, BridgeDenoiser
from .denoisers import Denoiser, GmmDenoiser, LoopbackDenoiser, gmm_prior_from_json
from .image import Domain, ImageTensor, convert_domain, read_png, write_png
from .jfif import parse_jfif
from .metrics import format_metric, bpp, psnr, report_for_pairs, ssim
from .operators import (
    DescriptorError,
    GeneralizedOperator,
    JpegOperator,
    Measurement,
    load_measurement,
    operator_from_descriptor,
    verify_property1,
    verify_property2,
)
from .sampler import SamplerConfig, parse_config_file, restore
from .synthetic import canonical_gmm16_prior, run_gmm16_experiment

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

BRIDGE_ENV_VAR = "DIFFRESTORE_BRIDGE"

_SSIM_MIN_SIDE = 11


class UsageError(ValueError):
    """Invalid flags, descriptors, or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Atomic output helpers
# ---------------------------------------------------------------------------


def _write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text_atomic(path, text: str) -> None:
    _write_atomic(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Record of one run: enough to audit it and reproduce it bitwise."""

    command: str
    operator: str
    seed: int
    config: dict
    inputs: dict
    outputs: dict
    metrics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path) -> None:
        _write_text_atomic(path, self.to_json() + "\n")


# ---------------------------------------------------------------------------
# Shared argument plumbing
# ---------------------------------------------------------------------------


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, help="master random seed")
    parser.add_argument("--eta", type=float, help="noise mixing weight in [0, 1]")
    parser.add_argument(
        "--eta-b", type=float, dest="eta_b",
        help="measurement consistency weight in [0, 1]",
    )
    parser.add_argument("--steps", type=int, help="number of sampling steps")
    parser.add_argument(
        "--t-init", type=int, dest="t_init", help="starting timestep"
    )
    parser.add_argument(
        "--num-samples", type=int, dest="num_samples",
        help="independent chains to average",
    )


def _config_from_args(args) -> SamplerConfig:
    values: dict = {}
    if getattr(args, "config", None):
        try:
            values.update(parse_config_file(args.config))
        except (OSError, ValueError) as exc:
            raise UsageError(f"config file: {exc}") from exc
    overrides = {
        "seed": args.seed,
        "eta": args.eta,
        "eta_b": args.eta_b,
        "num_steps": args.steps,
        "t_init": args.t_init,
        "num_samples": args.num_samples,
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    try:
        return SamplerConfig.from_mapping(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _denoiser_from_spec(spec: str):
    """Returns (denoiser, cleanup callable or None) for a --denoiser value."""
    kind, _, rest = spec.partition(":")
    if kind == "loopback":
        if rest:
            raise UsageError("loopback denoiser takes no argument")
        return LoopbackDenoiser(), None
    if kind == "gmm":
        if not rest:
            raise UsageError("gmm denoiser needs 'gmm:canonical16' or 'gmm:<json>'")
        if rest == "canonical16":
            return GmmDenoiser(canonical_gmm16_prior()), None
        try:
            prior = gmm_prior_from_json(rest)
        except (OSError, KeyError, ValueError) as exc:
            raise UsageError(f"gmm prior {rest!r}: {exc}") from exc
        return GmmDenoiser(prior), None
    if kind == "bridge":
        command = os.environ.get(BRIDGE_ENV_VAR) or rest
        if not command:
            raise UsageError(
                f"bridge denoiser needs a command ('bridge:<cmd>' or "
                f"the {BRIDGE_ENV_VAR} environment variable)"
            )
        client = BridgeClient(command)
        return BridgeDenoiser(client), client.close
    raise UsageError(
        f"unknown denoiser {spec!r}; expected gmm:<spec>, bridge:<cmd>, "
        f"or loopback"
    )


def _parse_descriptor(text: str) -> GeneralizedOperator:
    try:
        return operator_from_descriptor(text)
    except DescriptorError as exc:
        raise UsageError(str(exc)) from exc


def _corpus_paths(directory) -> list[Path]:
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"not a directory: {directory}")
    paths = sorted(root.glob("*.png"))
    if not paths:
        raise UsageError(f"no .png images in {directory}")
    return paths


def _to_byte_image(image: ImageTensor) -> ImageTensor:
    return convert_domain(image, Domain.BYTE255)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def cmd_encode(args) -> int:
    operator = _parse_descriptor(args.operator)
    image = read_png(args.input)
    signed = convert_domain(image, Domain.SIGNED11)
    measurement = operator.encode_signed(signed)
    data = operator.serialize_measurement(measurement)
    _write_atomic(args.output, data)
    print(f"wrote {args.output} ({len(data)} bytes, operator {operator.descriptor})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# restore
# ---------------------------------------------------------------------------


def _load_restore_input(args) -> tuple[GeneralizedOperator, Measurement, bool]:
    """Returns (operator, measurement, is_reencoded_jpg)."""
    path = Path(args.input)
    raw = path.read_bytes()
    if path.suffix.lower() in (".jpg", ".jpeg"):
        params = parse_jfif(raw)
        operator = JpegOperator(params, descriptor=f"jpeg:file={path}")
        pixels = read_png(path)  # entropy-decoded pixels via the image reader
        return operator, operator.encode(pixels), True
    if args.operator:
        operator = _parse_descriptor(args.operator)
        return operator, operator.deserialize_measurement(raw), False
    operator, measurement = load_measurement(raw)
    return operator, measurement, False


def _restore_synthetic(args) -> int:
    if args.input is not None:
        raise UsageError("--synthetic runs need no input file")
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    config = _config_from_args(args)
    started = time.monotonic()
    result = run_gmm16_experiment(
        trials=args.trials, seed=config.seed, config=config
    )
    elapsed = time.monotonic() - started
    print(f"synthetic gmm16: {result.summary()}")
    print(
        f"uplift: {result.mean_uplift_db:.2f} dB over the dequantized "
        f"baseline in {result.wins}/{result.trials} trials"
    )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        manifest = RunManifest(
            command="restore --synthetic gmm16",
            operator="bits:4",
            seed=config.seed,
            config=asdict(config),
            inputs={},
            outputs={"manifest": str(Path(args.out) / "manifest.json")},
            metrics={
                "trials": result.trials,
                "wins": result.wins,
                "mean_uplift_db": result.mean_uplift_db,
                "baseline_psnr": list(result.baseline_psnr),
                "restored_psnr": list(result.restored_psnr),
            },
            timings={"total_seconds": elapsed},
        )
        manifest.write(Path(args.out) / "manifest.json")
        print(f"wrote {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _restoration_metrics(
    average: ImageTensor,
    decoded_signed: ImageTensor,
    residuals,
) -> dict:
    average_byte = _to_byte_image(average)
    decoded_byte = _to_byte_image(decoded_signed)
    metrics = {
        "psnr_vs_decoded": format_metric(psnr(average_byte, decoded_byte)),
        "chain_residuals": [float(r) for r in residuals],
    }
    height, width = average.shape[0], average.shape[1]
    if min(height, width) >= _SSIM_MIN_SIDE:
        metrics["ssim_vs_decoded"] = format_metric(
            ssim(average_byte, decoded_byte)
        )
    return metrics


def cmd_restore(args) -> int:
    if args.synthetic:
        return _restore_synthetic(args)
    if args.input is None or not args.out:
        raise UsageError("restore needs an input file and --out <dir>")
    config = _config_from_args(args)
    denoiser, cleanup = _denoiser_from_spec(args.denoiser)
    try:
        total_started = time.monotonic()
        operator, measurement, reencoded = _load_restore_input(args)
        out_dir = Path(args.out)
        os.makedirs(out_dir, exist_ok=True)
        workers = max(1, min(config.num_samples, os.cpu_count() or 1))
        restore_started = time.monotonic()
        result = restore(
            measurement, operator, denoiser, config, max_workers=workers
        )
        restore_seconds = time.monotonic() - restore_started
        sample_paths = []
        for index, sample in enumerate(result.samples):
            sample_path = out_dir / f"sample_{index}.png"
            write_png(sample, sample_path)
            sample_paths.append(str(sample_path))
        average_path = out_dir / "average.png"
        write_png(result.average, average_path)
        decoded = operator.decode_signed(measurement)
        manifest = RunManifest(
            command="restore",
            operator=operator.descriptor,
            seed=config.seed,
            config=asdict(config),
            inputs={"measurement": str(args.input)},
            outputs={
                "samples": sample_paths,
                "average": str(average_path),
            },
            metrics=_restoration_metrics(
                result.average, decoded, result.residuals
            ),
            timings={
                "restore_seconds": restore_seconds,
                "total_seconds": time.monotonic() - total_started,
            },
            notes={
                "denoiser": args.denoiser,
                "jpg_reencode_approximation": reencoded,
            },
        )
        manifest.write(out_dir / "manifest.json")
        print(
            f"restored {args.input} -> {out_dir} "
            f"({config.num_samples} samples, seed {config.seed})"
        )
        return EXIT_OK
    finally:
        if cleanup is not None:
            cleanup()


# ---------------------------------------------------------------------------
# verify-op
# ---------------------------------------------------------------------------


def cmd_verify_op(args) -> int:
    operator = _parse_descriptor(args.operator)
    paths = _corpus_paths(args.corpus)
    corpus = [convert_domain(read_png(p), Domain.SIGNED11) for p in paths]
    report1 = verify_property1(operator, corpus)
    report2 = verify_property2(operator, corpus)
    verdict = "PASS" if report1.passed else "FAIL"
    print(f"operator: {operator.descriptor}")
    print(f"images: {report1.images}")
    print(
        f"re-measurement stability: fraction_exact={report1.fraction_exact:.6f} "
        f"(needs >= {report1.min_fraction_exact}) "
        f"max_deviation={report1.max_deviation:.6g} "
        f"(tolerance {report1.tolerance:.6g}) -> {verdict}"
    )
    print(f"reconstruction residual: mean={report2.mean_residual:.6f}")
    return EXIT_OK if report1.passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# rd-curve
# ---------------------------------------------------------------------------


def _parse_qf_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --qf list {text!r}: {exc}") from exc
    if not values:
        raise UsageError("--qf list is empty")
    for qf in values:
        if not 1 <= qf <= 100:
            raise UsageError(f"quality factor {qf} outside 1..100")
    return values


def cmd_rd_curve(args) -> int:
    qf_values = _parse_qf_list(args.qf)
    paths = _corpus_paths(args.corpus)
    images = [read_png(p) for p in paths]
    denoiser = cleanup = None
    if args.denoiser:
        denoiser, cleanup = _denoiser_from_spec(args.denoiser)
    try:
        config = _config_from_args(args) if args.denoiser else None
        header = "qf,bpp,psnr_jpeg"
        if denoiser is not None:
            header += ",psnr_restored"
        lines = [header]
        for qf in qf_values:
            operator = JpegOperator.for_quality(qf)
            bits_per_pixel = []
            jpeg_scores = []
            restored_scores = []
            for image in images:
                measurement = operator.encode(image)
                bits_per_pixel.append(bpp(measurement.payload))
                decoded_byte = _to_byte_image(operator.decode(measurement))
                jpeg_scores.append(psnr(image, decoded_byte))
                if denoiser is not None:
                    workers = max(1, min(config.num_samples, os.cpu_count() or 1))
                    result = restore(
                        measurement, operator, denoiser, config,
                        max_workers=workers,
                    )
                    restored_scores.append(
                        psnr(image, _to_byte_image(result.average))
                    )
            row = (
                f"{qf},{np.mean(bits_per_pixel):.6f},"
                f"{format_metric(float(np.mean(jpeg_scores)))}"
            )
            if denoiser is not None:
                row += f",{format_metric(float(np.mean(restored_scores)))}"
            lines.append(row)
        _write_text_atomic(args.out, "\n".join(lines) + "\n")
        print(f"wrote {args.out} ({len(qf_values)} rows, {len(images)} images)")
        return EXIT_OK
    finally:
        if cleanup is not None:
            cleanup()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def cmd_metrics(args) -> int:
    restored_paths = _corpus_paths(args.restored)
    reference_paths = _corpus_paths(args.reference)
    if len(restored_paths) != len(reference_paths):
        raise UsageError(
            f"image count mismatch: {len(restored_paths)} restored vs "
            f"{len(reference_paths)} reference"
        )
    pairs = [
        (read_png(restored), read_png(reference))
        for restored, reference in zip(restored_paths, reference_paths)
    ]
    report = report_for_pairs(
        pairs, image_ids=tuple(p.name for p in restored_paths)
    )
    _write_text_atomic(args.out, report.to_csv())
    print(
        f"wrote {args.out}: mean_psnr={format_metric(report.mean_psnr)} "
        f"mean_ssim={format_metric(report.mean_ssim)}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser & dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffrestore",
        description=(
            "Posterior-sampling restoration for lossy measurement operators"
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser(
        "encode", help="apply a measurement operator to an image"
    )
    enc.add_argument("input", help="input image (PNG)")
    enc.add_argument("operator", help="operator descriptor, e.g. jpeg:qf=10")
    enc.add_argument("output", help="output measurement file")
    enc.set_defaults(func=cmd_encode)

    res = sub.add_parser(
        "restore", help="sample restorations of a measurement"
    )
    res.add_argument(
        "input", nargs="?",
        help="measurement file from 'encode', or a raw .jpg",
    )
    res.add_argument("--out", help="output directory")
    res.add_argument(
        "--denoiser", default="loopback",
        help="gmm:<spec> | bridge:<cmd> | loopback",
    )
    res.add_argument(
        "--operator",
        help="operator descriptor override for the measurement file",
    )
    res.add_argument(
        "--synthetic", choices=["gmm16"],
        help="run the synthetic mixture experiment instead of a file",
    )
    res.add_argument(
        "--trials", type=int, default=100,
        help="trial count for --synthetic (default 100)",
    )
    _add_sampler_flags(res)
    res.set_defaults(func=cmd_restore)

    ver = sub.add_parser(
        "verify-op", help="check operator re-measurement stability"
    )
    ver.add_argument("operator", help="operator descriptor")
    ver.add_argument("corpus", help="directory of .png images")
    ver.set_defaults(func=cmd_verify_op)

    rd = sub.add_parser(
        "rd-curve", help="rate-distortion sweep over JPEG quality factors"
    )
    rd.add_argument("corpus", help="directory of .png images")
    rd.add_argument(
        "--qf", required=True, help="comma-separated quality factors"
    )
    rd.add_argument(
        "--denoiser",
        help="optional restorer: adds a psnr_restored column",
    )
    rd.add_argument("--out", required=True, help="output CSV path")
    _add_sampler_flags(rd)
    rd.set_defaults(func=cmd_rd_curve)

    met = sub.add_parser(
        "metrics", help="batch PSNR/SSIM between two image directories"
    )
    met.add_argument("restored", help="directory of restored images")
    met.add_argument("reference", help="directory of reference images")
    met.add_argument("--out", required=True, help="output CSV path")
    met.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
