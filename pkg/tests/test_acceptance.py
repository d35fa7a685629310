"""End-to-end acceptance gate.

Each test exercises one published behavioural guarantee at its stated
tolerance and time budget, and prints a single PASS/FAIL line so the whole
gate can be read at a glance from the test log.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import quad

from diffrestore.cli import main
from diffrestore.denoisers import GmmPrior, gmm_mmse_denoise
from diffrestore.image import Domain, ImageTensor, write_png
from diffrestore.jfif import JfifError, parse_jfif
from diffrestore.jpeg import (
    BASE_CHROMA_TABLE,
    BASE_LUMA_TABLE,
    QuantTable,
    dct8x8,
    idct8x8,
    quant_table_for_qf,
    tables_for_qf,
)
from diffrestore.operators import (
    JpegOperator,
    LinearOperatorAdapter,
    verify_property1,
)
from diffrestore.sampler import SamplerConfig, ddrm_step
from diffrestore.synthetic import run_gmm16_experiment

FIXTURES = Path(__file__).parent / "fixtures"


def report(capsys, number, passed, detail):
    verdict = "PASS" if passed else "FAIL"
    with capsys.disabled():
        print(f"[acceptance] criterion {number}: {verdict} — {detail}", flush=True)
    assert passed, f"criterion {number}: {detail}"


def test_criterion_1_dct_round_trip(capsys):
    budget = 5.0
    rng = np.random.default_rng(100)
    started = time.monotonic()
    worst_rt = 0.0
    worst_energy = 0.0
    for _ in range(10_000):
        block = rng.uniform(-128.0, 127.0, (8, 8))
        coeffs = dct8x8(block)
        worst_rt = max(worst_rt, np.abs(idct8x8(coeffs) - block).max())
        energy_in = float(np.sum(block * block))
        energy_out = float(np.sum(coeffs * coeffs))
        worst_energy = max(
            worst_energy, abs(energy_out - energy_in) / energy_in
        )
    elapsed = time.monotonic() - started
    passed = worst_rt < 1e-10 and worst_energy < 1e-9 and elapsed < budget
    report(
        capsys, 1, passed,
        f"10^4 blocks, max round-trip error {worst_rt:.3e} (< 1e-10), "
        f"max energy drift {worst_energy:.3e} (< 1e-9), {elapsed:.1f}s "
        f"(< {budget:.0f}s)",
    )


def test_criterion_2_jpeg_remeasurement_stability(capsys):
    budget = 120.0
    rng = np.random.default_rng(200)
    corpus = [
        ImageTensor(
            rng.uniform(-1.0, 1.0, (64, 64, 3)), Domain.SIGNED11
        )
        for _ in range(200)
    ]
    started = time.monotonic()
    min_fraction = 1.0
    max_deviation = 0.0
    for qf in (5, 10, 30, 50, 80, 95):
        result = verify_property1(JpegOperator.for_quality(qf), corpus)
        min_fraction = min(min_fraction, result.fraction_exact)
        max_deviation = max(max_deviation, result.max_deviation)
    elapsed = time.monotonic() - started
    passed = min_fraction >= 0.999 and max_deviation <= 1.0 and elapsed < budget
    report(
        capsys, 2, passed,
        f"200 images x 6 QFs: min fraction exact {min_fraction:.6f} "
        f"(>= 0.999), max deviation {max_deviation:.3g} (<= 1), "
        f"{elapsed:.1f}s (< {budget:.0f}s)",
    )


def test_criterion_3_linear_equivalence(capsys):
    budget = 10.0

    def matrix_step(x_next, f, y, H, alpha_t, alpha_next, eta, eta_b, noise):
        H_pinv = np.linalg.pinv(H)
        x_prime = f - H_pinv @ (H @ f) + H_pinv @ y
        mean = eta_b * x_prime + (1.0 - eta_b) * f
        if eta != 1.0:
            eps = (x_next - math.sqrt(alpha_next) * f) / math.sqrt(
                1.0 - alpha_next
            )
            direction = eta * noise + (1.0 - eta) * eps
        else:
            direction = noise
        return math.sqrt(alpha_t) * mean + math.sqrt(1.0 - alpha_t) * direction

    def vec(values):
        return ImageTensor(
            np.asarray(values, dtype=np.float64).reshape(-1, 1, 1),
            Domain.SIGNED11,
        )

    rng = np.random.default_rng(300)
    started = time.monotonic()
    worst = 0.0
    for _ in range(100):
        H = rng.standard_normal((6, 10))
        op = LinearOperatorAdapter(H)
        x_true = rng.uniform(-1, 1, 10)
        y = op.encode_signed(vec(x_true))
        f = rng.uniform(-1, 1, 10)
        x_next = rng.uniform(-1, 1, 10)
        noise = rng.standard_normal(10)
        alpha_t, alpha_next = rng.uniform(0.05, 0.95, 2)
        for eta in (0.0, 0.4, 1.0):
            for eta_b in (0.0, 0.4, 1.0):
                cfg = SamplerConfig(eta=eta, eta_b=eta_b)
                got = ddrm_step(
                    vec(x_next), vec(f), y, op, alpha_t, alpha_next, cfg,
                    vec(noise),
                ).data.ravel()
                want = matrix_step(
                    x_next, f, H @ x_true, H, alpha_t, alpha_next, eta,
                    eta_b, noise,
                )
                worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.monotonic() - started
    passed = worst < 1e-10 and elapsed < budget
    report(
        capsys, 3, passed,
        f"100 instances x 9 weight combos: max |generalized - matrix| "
        f"{worst:.3e} (< 1e-10), {elapsed:.1f}s (< {budget:.0f}s)",
    )


def test_criterion_4_quality_factor_table_law(capsys):
    budget = 1.0
    started = time.monotonic()
    luma50, chroma50 = tables_for_qf(50)
    base_ok = np.array_equal(
        luma50.in_raster().values, np.asarray(BASE_LUMA_TABLE, dtype=np.int64)
    ) and np.array_equal(
        chroma50.in_raster().values,
        np.asarray(BASE_CHROMA_TABLE, dtype=np.int64),
    )
    luma100, chroma100 = tables_for_qf(100)
    ones_ok = np.all(luma100.in_raster().values == 1) and np.all(
        chroma100.in_raster().values == 1
    )
    monotone_ok = True
    for base in (BASE_LUMA_TABLE, BASE_CHROMA_TABLE):
        ladder = np.stack(
            [
                quant_table_for_qf(qf, QuantTable(base)).in_raster().values
                for qf in range(1, 101)
            ]
        )
        if np.any(np.diff(ladder, axis=0) > 0):
            monotone_ok = False
    elapsed = time.monotonic() - started
    passed = base_ok and ones_ok and monotone_ok and elapsed < budget
    report(
        capsys, 4, passed,
        f"QF=50 base tables exact: {base_ok}, QF=100 all ones: {ones_ok}, "
        f"monotone non-increasing over QF 1..100: {monotone_ok}, "
        f"{elapsed:.2f}s (< {budget:.0f}s)",
    )


def test_criterion_5_mixture_denoiser_vs_quadrature(capsys):
    budget = 10.0

    def quadrature_mean(weights, means, variances, x_t, alpha):
        a = math.sqrt(alpha)
        v = 1.0 - alpha

        def prior_density(x0):
            total = 0.0
            for w, mu, var in zip(weights, means, variances):
                total += (
                    w
                    * math.exp(-((x0 - mu) ** 2) / (2 * var))
                    / math.sqrt(2 * math.pi * var)
                )
            return total

        def likelihood(x0):
            if v == 0.0:
                return 1.0
            return math.exp(-((x_t - a * x0) ** 2) / (2 * v))

        lo = min(means) - 12 * math.sqrt(max(variances))
        hi = max(means) + 12 * math.sqrt(max(variances))
        num = quad(
            lambda x0: x0 * prior_density(x0) * likelihood(x0), lo, hi,
            epsabs=1e-14, limit=200,
        )[0]
        den = quad(
            lambda x0: prior_density(x0) * likelihood(x0), lo, hi,
            epsabs=1e-14, limit=200,
        )[0]
        return num / den

    rng = np.random.default_rng(500)
    started = time.monotonic()
    worst = 0.0
    for _ in range(50):
        w0 = rng.uniform(0.1, 0.9)
        weights = np.array([w0, 1.0 - w0])
        means = rng.uniform(-1.5, 1.5, 2)
        variances = rng.uniform(5e-3, 0.3, 2)
        alpha = rng.uniform(0.05, 0.99)
        component = rng.integers(2)
        x_candidate = math.sqrt(alpha) * rng.normal(
            means[component], math.sqrt(variances[component])
        ) + math.sqrt(1 - alpha) * rng.standard_normal()
        prior = GmmPrior(
            weights=weights,
            means=means.reshape(2, 1),
            variances=variances,
        )
        got = gmm_mmse_denoise(prior, np.array([x_candidate]), alpha)[0]
        want = quadrature_mean(weights, means, variances, x_candidate, alpha)
        worst = max(worst, abs(got - want))
    elapsed = time.monotonic() - started
    passed = worst < 1e-8 and elapsed < budget
    report(
        capsys, 5, passed,
        f"50 two-component configurations: max |closed form - quadrature| "
        f"{worst:.3e} (< 1e-8), {elapsed:.1f}s (< {budget:.0f}s)",
    )


def test_criterion_6_synthetic_restoration_uplift(capsys):
    budget = 120.0
    started = time.monotonic()
    result = run_gmm16_experiment(trials=100, seed=0)
    elapsed = time.monotonic() - started
    passed = (
        result.wins >= 90
        and result.mean_uplift_db >= 1.0
        and elapsed < budget
    )
    report(
        capsys, 6, passed,
        f"restoration beat the dequantized baseline in "
        f"{result.wins}/100 trials (>= 90) with mean uplift "
        f"{result.mean_uplift_db:.2f} dB (>= 1), {elapsed:.1f}s "
        f"(< {budget:.0f}s)",
    )


def test_criterion_7_jfif_fixture_and_fuzz(capsys):
    budget = 30.0
    started = time.monotonic()
    params = parse_jfif((FIXTURES / "reference_qf50.jpg").read_bytes())
    luma, chroma = tables_for_qf(50)
    fixture_ok = (
        params.luma_table == luma and params.chroma_table == chroma
    )
    rng = np.random.default_rng(700)
    failures = 0
    for i in range(100_000):
        length = int(rng.integers(0, 200))
        blob = rng.integers(0, 256, length, dtype=np.uint8).tobytes()
        if i % 2:
            blob = b"\xff\xd8" + blob
        try:
            parse_jfif(blob)
        except JfifError:
            pass
        except Exception:
            failures += 1
    elapsed = time.monotonic() - started
    passed = fixture_ok and failures == 0 and elapsed < budget
    report(
        capsys, 7, passed,
        f"reference QF=50 file parses to base tables: {fixture_ok}; "
        f"10^5 fuzz inputs, {failures} unstructured failures, "
        f"{elapsed:.1f}s (< {budget:.0f}s)",
    )


def test_criterion_8_restore_determinism(capsys, tmp_path):
    image = ImageTensor(
        np.random.default_rng(800).uniform(0, 255, (24, 24, 3)),
        Domain.BYTE255,
    )
    png = tmp_path / "input.png"
    write_png(image, png)
    meas = tmp_path / "y.meas"
    assert main(["encode", str(png), "jpeg:qf=30:sub=420", str(meas)]) == 0
    outputs = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        code = main(["restore", str(meas), "--out", str(out), "--seed", "42"])
        assert code == 0
        names = sorted(p.name for p in out.glob("*.png"))
        outputs.append({name: (out / name).read_bytes() for name in names})
    passed = outputs[0] == outputs[1] and len(outputs[0]) == 9
    report(
        capsys, 8, passed,
        f"two restore runs with seed 42: {len(outputs[0])} output images "
        f"byte-identical: {outputs[0] == outputs[1]}",
    )


def test_criterion_9_imagenet_table_requires_gpu(capsys):
    with capsys.disabled():
        print(
            "[acceptance] criterion 9: SKIP — needs the pretrained 256x256 "
            "class-conditional diffusion checkpoint, a 100-image ImageNet "
            "validation subset, and GPU hours; none are available here.",
            flush=True,
        )
    pytest.skip("pretrained checkpoint + ImageNet subset + GPU not available")


def test_criterion_10_bridge_conformance(capsys):
    """Echo, malformed-frame shutdown, and determinism against the live bridge."""
    import importlib.util
    import struct
    import subprocess
    import sys

    from diffrestore.bridge_client import BridgeClient, parse_header

    if importlib.util.find_spec("denoiser_bridge") is None:
        with capsys.disabled():
            print(
                "[acceptance] criterion 10: SKIP — the denoiser-bridge "
                "package is not installed; its own suite also covers this.",
                flush=True,
            )
        pytest.skip("denoiser-bridge is not installed")
    command = [
        sys.executable, "-m", "denoiser_bridge",
        "--checkpoint", "builtin:gauss:1.5", "--flavor", "x0",
    ]

    rng = np.random.default_rng(0)
    sent = rng.standard_normal((6, 5, 3))
    x = ImageTensor(rng.uniform(-1, 1, (8, 8, 3)), Domain.SIGNED11)
    with BridgeClient(command, timeout=60.0) as client:
        echo_ok = np.array_equal(
            client.echo(sent), sent.astype("<f4").astype(np.float64)
        )
        first = client.denoise(x, 120, 0.35)
        second = client.denoise(x, 120, 0.35)
    with BridgeClient(command, timeout=60.0) as client:
        third = client.denoise(x, 120, 0.35)
    deterministic = np.array_equal(first.data, second.data) and np.array_equal(
        first.data, third.data
    )

    proc = subprocess.Popen(
        command,
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
    )
    try:
        proc.stdin.write(struct.pack("<I", 2) + b"\xff\xfe" + struct.pack("<I", 0))
        proc.stdin.flush()
        (header_len,) = struct.unpack("<I", proc.stdout.read(4))
        reply = parse_header(proc.stdout.read(header_len))
        exit_code = proc.wait(timeout=30)
    finally:
        proc.kill()
        proc.stdin.close()
        proc.stdout.close()
        proc.wait()
    malformed_ok = reply["op"] == "error" and exit_code != 0

    report(
        capsys,
        10,
        echo_ok and deterministic and malformed_ok,
        f"echo bitwise={echo_ok}, deterministic across calls and "
        f"processes={deterministic}, malformed frame -> op=error + "
        f"exit {exit_code}",
    )
