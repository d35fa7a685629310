"""Denoiser interface and the analytic Gaussian-mixture MMSE denoiser.

A denoiser maps a noised tensor x_t (plus the noise level alpha_t) to an
estimate of the clean signal x_0. Sampling quality rests on that estimate
approximating the posterior mean E[x_0 | x_t]; for a Gaussian-mixture prior
that mean has a closed form, which gives the test suite an exactly verifiable
denoiser at desk scale. Neural denoisers plug in through the same interface
via the external bridge client.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass

import numpy as np

from .image import Domain, ImageTensor


class Denoiser(abc.ABC):
    """Maps (x_t, t, alpha_t) to an estimate of x_0.

    ``concurrent_safe`` declares whether denoise() may be invoked from
    several chains at once; serial denoisers are locked by the sampler.
    """

    concurrent_safe: bool = True

    @abc.abstractmethod
    def denoise(self, x_t: ImageTensor, t: int, alpha_t: float) -> ImageTensor:
        """Return the x_0 estimate; shape must equal the input shape."""


class LoopbackDenoiser(Denoiser):
    """Returns x_t unchanged; useful for plumbing and determinism tests."""

    def denoise(self, x_t: ImageTensor, t: int, alpha_t: float) -> ImageTensor:
        return x_t


@dataclass(frozen=True)
class GmmPrior:
    """Isotropic Gaussian mixture over R^n: sum_k w_k N(mu_k, sigma_k^2 I)."""

    weights: np.ndarray    # (K,)
    means: np.ndarray      # (K, n)
    variances: np.ndarray  # (K,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64).ravel()
        if w.size == 0:
            raise ValueError("mixture needs at least one component")
        if mu.shape[0] != w.size or var.size != w.size:
            raise ValueError(
                f"component count mismatch: {w.size} weights, "
                f"{mu.shape[0]} means, {var.size} variances"
            )
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, expected 1")
        if np.any(var <= 0):
            raise ValueError("component variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.weights.size

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` vectors from the mixture, shape (size, n)."""
        comp = rng.choice(self.num_components, size=size, p=self.weights)
        eps = rng.standard_normal((size, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * eps


def gmm_mmse_denoise(
    prior: GmmPrior, x_t: np.ndarray, alpha_t: float
) -> np.ndarray:
    """Exact posterior mean E[x_0 | x_t] under the mixture prior.

    The noised marginal is x_t ~ N(sqrt(alpha_t) x_0, (1 - alpha_t) I), so
    per component, with a = sqrt(alpha_t) and v = 1 - alpha_t:

      responsibility  r_k ∝ w_k N(x_t; a mu_k, (a^2 sigma_k^2 + v) I)
      posterior mean  m_k = mu_k + a sigma_k^2 / (a^2 sigma_k^2 + v) (x_t - a mu_k)

    and the estimate is sum_k r_k m_k. Responsibilities are computed in
    log space with max subtraction so far-from-mean inputs cannot underflow.

    Args:
        prior: mixture over R^n.
        x_t: vector (n,) or batch (B, n).
        alpha_t: cumulative noise-retention product, in (0, 1].
    """
    if not 0.0 < alpha_t <= 1.0:
        raise ValueError(f"alpha_t must be in (0, 1], got {alpha_t}")
    x = np.asarray(x_t, dtype=np.float64)
    squeeze = x.ndim == 1
    x2d = np.atleast_2d(x)
    if x2d.shape[1] != prior.dim:
        raise ValueError(f"x_t has dim {x2d.shape[1]}, prior lives in R^{prior.dim}")

    a = np.sqrt(alpha_t)
    v = 1.0 - alpha_t
    s = alpha_t * prior.variances + v  # (K,) per-component marginal variances
    diff = x2d[:, None, :] - a * prior.means[None, :, :]  # (B, K, n)
    sq = np.sum(diff * diff, axis=2)  # (B, K)
    log_r = (
        np.log(prior.weights)[None, :]
        - 0.5 * prior.dim * np.log(2.0 * np.pi * s)[None, :]
        - 0.5 * sq / s[None, :]
    )
    log_r -= log_r.max(axis=1, keepdims=True)
    r = np.exp(log_r)
    r /= r.sum(axis=1, keepdims=True)

    gain = a * prior.variances / s  # (K,)
    m = prior.means[None, :, :] + gain[None, :, None] * diff  # (B, K, n)
    out = np.sum(r[:, :, None] * m, axis=1)
    return out[0] if squeeze else out


def gmm_prior_from_json(path) -> GmmPrior:
    """Load a mixture description: {"weights": [...], "means": [[...]], "variances": [...]}."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return GmmPrior(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            means=np.asarray(doc["means"], dtype=np.float64),
            variances=np.asarray(doc["variances"], dtype=np.float64),
        )
    except KeyError as exc:
        raise ValueError(f"mixture file {path} is missing key {exc}") from None


class GmmDenoiser(Denoiser):
    """Denoiser interface adapter around the closed-form mixture estimate.

    Flattens the image tensor to the prior's vector space and restores the
    shape afterwards; the tensor's sample count must equal the prior dim.
    """

    def __init__(self, prior: GmmPrior):
        self.prior = prior

    def denoise(self, x_t: ImageTensor, t: int, alpha_t: float) -> ImageTensor:
        x_t.require(Domain.SIGNED11)
        flat = x_t.data.ravel()
        if flat.size != self.prior.dim:
            raise ValueError(
                f"image has {flat.size} samples, prior lives in R^{self.prior.dim}"
            )
        out = gmm_mmse_denoise(self.prior, flat, alpha_t)
        return ImageTensor(out.reshape(x_t.shape), Domain.SIGNED11)
