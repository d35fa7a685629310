"""Diffusion schedule and the measurement-guided posterior sampling loop.

The restoration loop runs a truncated reverse diffusion: initialize by
noising the decoded measurement at an intermediate timestep, then walk a
descending timestep ladder. Each step asks the denoiser for an x_0 estimate
f, projects it toward measurement consistency through the operator's
encode/decode pair, and renoises to the next level:

    x' = f - decode(encode(f)) + decode(y)
    x  = sqrt(a_t) * (eta_b * x' + (1 - eta_b) * f)
         + sqrt(1 - a_t) * (eta * e + (1 - eta) * e_pred)

with e a fresh standard normal draw and e_pred the noise implied by the
current state and f. Multiple chains run on independent noise substreams
and their final estimates are averaged.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .denoisers import Denoiser
from .image import Domain, ImageTensor, convert_domain
from .operators import GeneralizedOperator, Measurement


class SingularityError(ValueError):
    """Noise prediction is undefined at alpha = 1 (zero noise scale)."""


class DenoiserFailure(RuntimeError):
    """A denoiser call raised; carries chain and timestep context."""

    def __init__(self, chain: int, t: int, cause: BaseException):
        super().__init__(f"denoiser failed on chain {chain} at t={t}: {cause}")
        self.chain = chain
        self.t = t


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances and their cumulative noise-retention products.

    ``alpha_bar[t]`` is the product of (1 - beta_s) for s <= t, with
    ``alpha_bar[0] = 1``; the marginal of the forward process is
    x_t ~ N(sqrt(alpha_bar[t]) x_0, (1 - alpha_bar[t]) I).
    """

    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if ab.shape != (beta.size + 1,):
            raise ValueError("alpha_bar must have T + 1 entries")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        for arr in (beta, ab):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def T(self) -> int:
        return self.beta.size

    def alpha(self, t: int) -> float:
        """Cumulative product at timestep t, for t in [0, T]."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])


def make_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> DiffusionSchedule:
    """Linear variance schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError(f"schedule length must be at least 1, got {T}")
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return DiffusionSchedule(beta, alpha_bar)


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling hyperparameters; defaults follow the restoration protocol."""

    eta: float = 1.0
    eta_b: float = 0.4
    num_steps: int = 20
    t_init: int = 300
    num_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not 0.0 <= self.eta_b <= 1.0:
            raise ValueError(f"eta_b must be in [0, 1], got {self.eta_b}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be at least 1, got {self.num_steps}")
        if self.t_init < 1:
            raise ValueError(f"t_init must be positive, got {self.t_init}")
        if self.num_samples < 1:
            raise ValueError(f"num_samples must be at least 1, got {self.num_samples}")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "SamplerConfig":
        """Build a config from string-or-number values (config files, CLI)."""
        kwargs = {}
        casts = {
            "eta": float,
            "eta_b": float,
            "num_steps": int,
            "t_init": int,
            "num_samples": int,
            "seed": int,
        }
        for key, raw in mapping.items():
            if key not in casts:
                raise ValueError(f"unknown sampler config key {key!r}")
            try:
                kwargs[key] = casts[key](raw)
            except (TypeError, ValueError):
                raise ValueError(f"bad value {raw!r} for sampler config key {key!r}")
        return cls(**kwargs)


def parse_config_file(path) -> dict:
    """Read a `key = value` config file; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
    return values


@dataclass(frozen=True)
class RestorationResult:
    """Per-chain outputs plus their average, all in the [0, 1] domain."""

    samples: tuple[ImageTensor, ...]
    average: ImageTensor
    residuals: tuple[float, ...]  # ||encode(final estimate) - y||_2 per chain


def timestep_ladder(cfg: SamplerConfig, schedule: DiffusionSchedule) -> list[int]:
    """Uniformly spaced descending timesteps from t_init to 0 inclusive.

    A single-step ladder degenerates to [t_init] (one terminal denoise).
    Rounding to integers must not create duplicate steps, so num_steps may
    not exceed t_init + 1.
    """
    if cfg.t_init > schedule.T:
        raise ValueError(f"t_init {cfg.t_init} exceeds schedule length {schedule.T}")
    if cfg.num_steps == 1:
        return [cfg.t_init]
    raw = np.linspace(cfg.t_init, 0.0, cfg.num_steps)
    ladder = [int(round(v)) for v in raw]
    if any(a <= b for a, b in zip(ladder, ladder[1:])):
        raise ValueError(
            f"num_steps {cfg.num_steps} does not fit strictly decreasing steps "
            f"below t_init {cfg.t_init}"
        )
    return ladder


def predicted_noise(
    x_next: ImageTensor, x0_hat: ImageTensor, alpha_next: float
) -> ImageTensor:
    """Noise implied by a state and its clean estimate under the marginal.

    Solves x_next = sqrt(a) x0 + sqrt(1-a) e for e. Undefined at a = 1.
    """
    if alpha_next >= 1.0:
        raise SingularityError(
            f"noise prediction undefined at alpha = {alpha_next} (no noise to solve for)"
        )
    if alpha_next <= 0.0:
        raise ValueError(f"alpha must be positive, got {alpha_next}")
    eps = (x_next.data - math.sqrt(alpha_next) * x0_hat.data) / math.sqrt(
        1.0 - alpha_next
    )
    return ImageTensor(eps, x_next.domain)


def ddrm_step(
    x_next: ImageTensor,
    x0_hat: ImageTensor,
    y: Measurement,
    op: GeneralizedOperator,
    alpha_t: float,
    alpha_next: float,
    cfg: SamplerConfig,
    noise: ImageTensor,
) -> ImageTensor:
    """One reverse step from the state at the higher timestep down to alpha_t.

    All tensors are in the [-1, 1] working domain; the operator converts to
    its native domain internally. ``noise`` is the caller's standard normal
    draw, making the step a pure function.
    """
    for tensor in (x_next, x0_hat, noise):
        tensor.require(Domain.SIGNED11)
    if x0_hat.shape != x_next.shape or noise.shape != x_next.shape:
        raise ValueError("state, estimate, and noise shapes must agree")
    f = x0_hat.data
    if cfg.eta_b != 0.0:
        consistent = f - op.decode_signed(op.encode_signed(x0_hat)).data
        consistent += op.decode_signed(y).data
        mean = cfg.eta_b * consistent + (1.0 - cfg.eta_b) * f
    else:
        mean = f
    if cfg.eta != 1.0:
        eps_pred = predicted_noise(x_next, x0_hat, alpha_next).data
        direction = cfg.eta * noise.data + (1.0 - cfg.eta) * eps_pred
    else:
        direction = noise.data
    x_t = math.sqrt(alpha_t) * mean + math.sqrt(1.0 - alpha_t) * direction
    return ImageTensor(x_t, Domain.SIGNED11)


def init_from_measurement(
    y: Measurement,
    op: GeneralizedOperator,
    schedule: DiffusionSchedule,
    t_init: int,
    noise: ImageTensor,
) -> ImageTensor:
    """Noise the decoded measurement up to the ladder's starting level."""
    alpha = schedule.alpha(t_init)
    decoded = op.decode_signed(y)
    if noise.shape != decoded.shape:
        raise ValueError("noise shape must match the decoded measurement")
    x = math.sqrt(alpha) * decoded.data + math.sqrt(1.0 - alpha) * noise.data
    return ImageTensor(x, Domain.SIGNED11)


def _run_chain(
    chain: int,
    y: Measurement,
    op: GeneralizedOperator,
    denoiser: Denoiser,
    cfg: SamplerConfig,
    schedule: DiffusionSchedule,
    ladder: list[int],
    denoise_lock: threading.Lock | None,
) -> tuple[ImageTensor, float]:
    rng = np.random.default_rng((cfg.seed, chain))
    decoded_shape = op.decode_signed(y).shape
    noise = ImageTensor(rng.standard_normal(decoded_shape), Domain.SIGNED11)
    x = init_from_measurement(y, op, schedule, ladder[0], noise)
    x0_hat = None
    for i, t in enumerate(ladder):
        try:
            if denoise_lock is not None:
                with denoise_lock:
                    x0_hat = denoiser.denoise(x, t, schedule.alpha(t))
            else:
                x0_hat = denoiser.denoise(x, t, schedule.alpha(t))
        except Exception as exc:
            raise DenoiserFailure(chain, t, exc) from exc
        if x0_hat.shape != x.shape:
            raise DenoiserFailure(
                chain, t, ValueError(
                    f"denoiser returned shape {x0_hat.shape}, expected {x.shape}"
                ),
            )
        if i + 1 < len(ladder):
            noise = ImageTensor(rng.standard_normal(decoded_shape), Domain.SIGNED11)
            x = ddrm_step(
                x_next=x,
                x0_hat=x0_hat,
                y=y,
                op=op,
                alpha_t=schedule.alpha(ladder[i + 1]),
                alpha_next=schedule.alpha(t),
                cfg=cfg,
                noise=noise,
            )
    residual = float(
        np.linalg.norm(
            op.measurement_values(op.encode_signed(x0_hat)) - op.measurement_values(y)
        )
    )
    return convert_domain(x0_hat, Domain.UNIT01), residual


def restore(
    y: Measurement,
    op: GeneralizedOperator,
    denoiser: Denoiser,
    cfg: SamplerConfig,
    schedule: DiffusionSchedule | None = None,
    max_workers: int = 1,
) -> RestorationResult:
    """Run independent sampling chains and average their final estimates.

    Chain c draws all noise from substream (seed, c), so results are bitwise
    deterministic given (cfg, inputs) and unchanged by num_samples or by the
    degree of parallelism. Denoisers that declare themselves serial are
    called under a lock when chains run on threads.
    """
    if schedule is None:
        schedule = make_schedule(1000)
    ladder = timestep_ladder(cfg, schedule)
    lock = None
    workers = max(1, min(max_workers, cfg.num_samples))
    if workers > 1 and not denoiser.concurrent_safe:
        lock = threading.Lock()

    def run(chain: int) -> tuple[ImageTensor, float]:
        return _run_chain(chain, y, op, denoiser, cfg, schedule, ladder, lock)

    if workers == 1:
        outcomes = [run(c) for c in range(cfg.num_samples)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, range(cfg.num_samples)))

    samples = tuple(sample for sample, _ in outcomes)
    residuals = tuple(resid for _, resid in outcomes)
    stacked = np.stack([s.data for s in samples])
    average = ImageTensor(stacked.mean(axis=0), Domain.UNIT01)
    return RestorationResult(samples=samples, average=average, residuals=residuals)
