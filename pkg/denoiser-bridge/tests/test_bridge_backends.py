"""Backend loading, flavor conversion, and the in-memory frame loop."""

import io
import math

import numpy as np
import pytest

from denoiser_bridge.models import (
    BridgeConfig,
    BridgeStartupError,
    eps_to_x0,
    load_denoiser,
    load_scorer,
)
from denoiser_bridge.protocol import (
    encode_tensor,
    read_frame,
    write_frame,
)
from denoiser_bridge.server import EXIT_MALFORMED, EXIT_OK, serve


def rng_image(shape=(6, 4, 3), seed=0):
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=shape)


class TestBridgeConfig:
    def test_flavor_must_be_declared_and_valid(self):
        with pytest.raises(TypeError):
            BridgeConfig(checkpoint="builtin:identity")
        with pytest.raises(ValueError, match="flavor"):
            BridgeConfig(checkpoint="builtin:identity", flavor="noise")

    def test_field_validation(self):
        with pytest.raises(ValueError, match="checkpoint"):
            BridgeConfig(checkpoint="", flavor="x0")
        with pytest.raises(ValueError, match="device"):
            BridgeConfig(checkpoint="builtin:identity", flavor="x0", device="")
        with pytest.raises(ValueError, match="image size"):
            BridgeConfig(checkpoint="builtin:identity", flavor="x0", image_size=0)
        with pytest.raises(ValueError, match="class label"):
            BridgeConfig(checkpoint="builtin:identity", flavor="x0", class_label=-1)

    def test_unconditional_is_the_default(self):
        config = BridgeConfig(checkpoint="builtin:identity", flavor="x0")
        assert config.class_label is None
        assert config.device == "cpu"


class TestEpsToX0:
    def test_zero_noise_prediction_rescales_only(self):
        x = rng_image(seed=1)
        out = eps_to_x0(x, np.zeros_like(x), 0.25)
        np.testing.assert_allclose(out, x / math.sqrt(0.25), rtol=0, atol=1e-15)

    def test_alpha_one_returns_input_bitwise(self):
        x = rng_image(seed=2)
        eps = rng_image(seed=3)
        out = eps_to_x0(x, eps, 1.0)
        np.testing.assert_array_equal(out, x)

    def test_inverts_the_noising_mix(self):
        rng = np.random.default_rng(4)
        for alpha in (0.999, 0.5, 0.05, 1e-4):
            x0 = rng.uniform(-1.0, 1.0, size=(5, 5, 3))
            eps = rng.standard_normal((5, 5, 3))
            x_t = math.sqrt(alpha) * x0 + math.sqrt(1.0 - alpha) * eps
            np.testing.assert_allclose(
                eps_to_x0(x_t, eps, alpha), x0, rtol=0, atol=1e-11
            )

    def test_validation(self):
        x = rng_image(seed=5)
        for alpha in (0.0, -0.1, 1.5, math.nan):
            with pytest.raises(ValueError):
                eps_to_x0(x, x, alpha)
        with pytest.raises(ValueError, match="shape"):
            eps_to_x0(x, x[:2], 0.5)


class TestBuiltinBackends:
    def test_identity_clean_flavor(self):
        predict = load_denoiser(
            BridgeConfig(checkpoint="builtin:identity", flavor="x0")
        )
        x = rng_image(seed=6)
        np.testing.assert_array_equal(predict(x, 100, 0.5), x)

    def test_identity_noise_flavor_round_trips_exactly(self):
        predict = load_denoiser(
            BridgeConfig(checkpoint="builtin:identity", flavor="eps")
        )
        x = rng_image(seed=7)
        for alpha in (0.9, 0.3, 1e-3):
            eps = predict(x, 50, alpha)
            np.testing.assert_allclose(
                eps_to_x0(x, eps, alpha), x, rtol=0, atol=1e-12
            )

    def test_noise_flavor_at_alpha_one_reports_zero_noise(self):
        predict = load_denoiser(
            BridgeConfig(checkpoint="builtin:gauss", flavor="eps")
        )
        x = rng_image(seed=8)
        np.testing.assert_array_equal(predict(x, 0, 1.0), np.zeros_like(x))

    def test_gauss_matches_reference_filter(self):
        from scipy.ndimage import gaussian_filter

        predict = load_denoiser(
            BridgeConfig(checkpoint="builtin:gauss:2.5", flavor="x0")
        )
        x = rng_image(shape=(12, 10, 3), seed=9)
        expected = gaussian_filter(x, sigma=(2.5, 2.5, 0), mode="nearest")
        np.testing.assert_allclose(predict(x, 10, 0.8), expected, atol=1e-14)

    def test_bad_builtin_specs(self):
        for checkpoint in (
            "builtin:nope",
            "builtin:gauss:-1",
            "builtin:gauss:abc",
            "builtin:gauss:1:2",
            "builtin:identity:extra",
        ):
            with pytest.raises(BridgeStartupError):
                load_denoiser(BridgeConfig(checkpoint=checkpoint, flavor="x0"))

    def test_builtins_reject_class_labels(self):
        config = BridgeConfig(
            checkpoint="builtin:identity", flavor="x0", class_label=2
        )
        with pytest.raises(BridgeStartupError, match="unconditional"):
            load_denoiser(config)


@pytest.fixture(scope="module")
def scripted_dir(tmp_path_factory):
    """Tiny TorchScript archives exercising the checkpoint contract."""
    import torch

    root = tmp_path_factory.mktemp("scripted")

    class HalfFlip(torch.nn.Module):
        def forward(self, x, t):
            return torch.flip(x, [2]) * 0.5

    class TimesStep(torch.nn.Module):
        def forward(self, x, t):
            return x * t.to(x.dtype)

    class Conditional(torch.nn.Module):
        def forward(self, x, t, y):
            return x * y.to(x.dtype)

    class WrongShape(torch.nn.Module):
        def forward(self, x, t):
            return x[:, :, :2]

    class PairScore(torch.nn.Module):
        def forward(self, a, b):
            return torch.mean((a - b) ** 2)

    paths = {}
    for name, module in (
        ("half_flip", HalfFlip()),
        ("times_step", TimesStep()),
        ("conditional", Conditional()),
        ("wrong_shape", WrongShape()),
        ("pair_score", PairScore()),
    ):
        path = root / f"{name}.pt"
        torch.jit.script(module).save(str(path))
        paths[name] = str(path)
    return paths


class TestTorchscriptBackend:
    def test_channel_plane_marshalling(self, scripted_dir):
        predict = load_denoiser(
            BridgeConfig(checkpoint=scripted_dir["half_flip"], flavor="x0")
        )
        x = rng_image(shape=(6, 4, 3), seed=10)
        expected = np.flip(x, axis=0) * 0.5
        np.testing.assert_allclose(predict(x, 3, 0.5), expected, atol=1e-7)

    def test_step_is_forwarded(self, scripted_dir):
        predict = load_denoiser(
            BridgeConfig(checkpoint=scripted_dir["times_step"], flavor="x0")
        )
        x = rng_image(seed=11)
        np.testing.assert_allclose(predict(x, 3, 0.5), 3.0 * x, atol=1e-7)

    def test_class_label_is_forwarded(self, scripted_dir):
        predict = load_denoiser(
            BridgeConfig(
                checkpoint=scripted_dir["conditional"],
                flavor="x0",
                class_label=4,
            )
        )
        x = rng_image(seed=12)
        np.testing.assert_allclose(predict(x, 0, 0.5), 4.0 * x, atol=1e-7)

    def test_wrong_output_shape_is_reported(self, scripted_dir):
        predict = load_denoiser(
            BridgeConfig(checkpoint=scripted_dir["wrong_shape"], flavor="x0")
        )
        with pytest.raises(ValueError, match="shape"):
            predict(rng_image(seed=13), 0, 0.5)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(BridgeStartupError, match="does not exist"):
            load_denoiser(
                BridgeConfig(checkpoint=str(tmp_path / "nope.pt"), flavor="x0")
            )

    def test_unloadable_checkpoint(self, tmp_path):
        path = tmp_path / "garbage.pt"
        path.write_bytes(b"this is not a torchscript archive")
        with pytest.raises(BridgeStartupError, match="cannot load"):
            load_denoiser(BridgeConfig(checkpoint=str(path), flavor="x0"))

    def test_pair_scorer(self, scripted_dir):
        config = BridgeConfig(
            checkpoint="builtin:identity",
            flavor="x0",
            lpips_checkpoint=scripted_dir["pair_score"],
        )
        score = load_scorer(config)
        a = rng_image(seed=14)
        b = rng_image(seed=15)
        expected = np.mean(
            (a.astype(np.float32) - b.astype(np.float32)) ** 2
        )
        assert score(a, b) == pytest.approx(expected, abs=1e-6)

    def test_no_scorer_configured(self):
        assert (
            load_scorer(BridgeConfig(checkpoint="builtin:identity", flavor="x0"))
            is None
        )


def run_serve(request_bytes, **config_kwargs):
    config_kwargs.setdefault("checkpoint", "builtin:identity")
    config_kwargs.setdefault("flavor", "x0")
    stdout = io.BytesIO()
    code = serve(
        BridgeConfig(**config_kwargs),
        stdin=io.BytesIO(request_bytes),
        stdout=stdout,
    )
    stdout.seek(0)
    replies = []
    while True:
        frame = read_frame(stdout)
        if frame is None:
            return code, replies
        replies.append(frame)


def request_frame(fields, payload=b""):
    stream = io.BytesIO()
    write_frame(stream, fields, payload)
    return stream.getvalue()


def denoise_frame(values, t=40, alpha=0.5):
    values = np.asarray(values)
    return request_frame(
        {
            "op": "denoise",
            "t": t,
            "alpha": repr(float(alpha)),
            "dims": ",".join(str(d) for d in values.shape),
            "dtype": "f32",
        },
        encode_tensor(values),
    )


class TestServeLoop:
    def test_echo_mirrors_fields_and_payload(self):
        payload = encode_tensor(rng_image(seed=16))
        code, replies = run_serve(
            request_frame(
                {"op": "echo", "dims": "6,4,3", "dtype": "f32", "t": "0"},
                payload,
            )
        )
        assert code == EXIT_OK
        (reply,) = replies
        assert reply[0]["op"] == "result"
        assert reply[0]["dims"] == "6,4,3"
        assert reply[0]["dtype"] == "f32"
        assert reply[1] == payload

    def test_denoise_identity_round_trip(self):
        x = rng_image(seed=17)
        code, replies = run_serve(denoise_frame(x))
        assert code == EXIT_OK
        (reply,) = replies
        assert reply[0]["op"] == "result"
        assert reply[0]["dims"] == "6,4,3"
        assert reply[1] == encode_tensor(x)

    def test_noise_flavor_answers_with_clean_estimate(self):
        x = rng_image(seed=18)
        code, replies = run_serve(denoise_frame(x, alpha=0.3), flavor="eps")
        assert code == EXIT_OK
        (reply,) = replies
        got = np.frombuffer(reply[1], dtype="<f4").reshape(6, 4, 3)
        np.testing.assert_allclose(got, x.astype(np.float32), atol=1e-6)

    def test_request_errors_keep_the_loop_alive(self):
        x = rng_image(seed=19)
        bad_then_good = (
            request_frame({"op": "transmogrify"})
            + request_frame({"op": "denoise", "t": "1", "alpha": "2.0",
                             "dims": "6,4,3", "dtype": "f32"},
                            encode_tensor(x))
            + request_frame({"op": "denoise", "t": "1", "alpha": "0.5",
                             "dims": "2,2", "dtype": "f32"},
                            b"\x00" * 16)
            + request_frame({"op": "denoise", "t": "1", "alpha": "0.5",
                             "dims": "6,4,3", "dtype": "f32"},
                            b"\x00" * 8)
            + request_frame({"op": "lpips", "dims": "2,6,4,3", "dtype": "f32"},
                            encode_tensor(np.stack([x, x])))
            + denoise_frame(x)
        )
        code, replies = run_serve(bad_then_good)
        assert code == EXIT_OK
        assert [r[0]["op"] for r in replies] == [
            "error", "error", "error", "error", "error", "result",
        ]
        assert "transmogrify" in replies[0][0]["message"]
        assert "alpha" in replies[1][0]["message"]
        assert "height,width,channels" in replies[2][0]["message"]
        assert "disagrees" in replies[3][0]["message"]
        assert "scorer" in replies[4][0]["message"]
        assert replies[5][1] == encode_tensor(x)

    def test_configured_size_is_enforced(self):
        x = rng_image(shape=(4, 4, 3), seed=20)
        code, replies = run_serve(denoise_frame(x), image_size=8)
        assert code == EXIT_OK
        assert replies[0][0]["op"] == "error"
        assert "8x8" in replies[0][0]["message"]

    def test_malformed_header_stops_with_error_frame(self):
        import struct as _struct

        garbage = _struct.pack("<I", 2) + b"\xff\xfe" + _struct.pack("<I", 0)
        code, replies = run_serve(garbage + denoise_frame(rng_image(seed=21)))
        assert code == EXIT_MALFORMED
        (reply,) = replies  # the frame after the malformed one is never read
        assert reply[0]["op"] == "error"
        assert "malformed frame" in reply[0]["message"]

    def test_truncated_stream_is_malformed(self):
        blob = denoise_frame(rng_image(seed=22))[:-5]
        code, replies = run_serve(blob)
        assert code == EXIT_MALFORMED
        assert replies[0][0]["op"] == "error"
