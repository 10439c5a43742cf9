"""Gaussian encoder ``q(z | x)``, decoder ``p(x | z)`` and latent standardization."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, no_grad
from .errors import DegenerateLatent, NonFiniteLoss, ShapeMismatch
from .nn import Module, init_linear, linear

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class Encoder(Module):
    """MLP from flattened ``[0, 1]`` images to a diagonal Gaussian over ``k`` latents."""

    def __init__(self, image_shape: tuple[int, ...], k: int = 32, hidden: tuple[int, ...] = (512, 256), seed: int = 0):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.k = k
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        widths = [int(np.prod(image_shape)), *hidden]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            init_linear(self, f"fc{i}", a, b, rng)
        init_linear(self, "mean", widths[-1], k, rng)
        init_linear(self, "logvar", widths[-1], k, rng, scale=0.01)
        # start with a nearly deterministic posterior
        self.params["logvar.b"].value[:] = -6.0

    def _flatten(self, x) -> Tensor:
        x = as_tensor(x)
        if tuple(x.shape[1:]) != self.image_shape:
            raise ShapeMismatch(f"expected images of shape {self.image_shape}, got {x.shape[1:]}")
        return x.reshape(x.shape[0], -1)

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = self._flatten(x) - 0.5
        for i in range(len(self.hidden)):
            h = linear(self, f"fc{i}", h).silu()
        return linear(self, "mean", h), linear(self, "logvar", h).clip(LOGVAR_MIN, LOGVAR_MAX)


class Decoder(Module):
    """MLP from ``k`` latents to an image of ``image_shape`` (unconstrained values)."""

    def __init__(self, image_shape: tuple[int, ...], k: int = 32, hidden: tuple[int, ...] = (256, 512), seed: int = 1):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.k = k
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        widths = [k, *hidden]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            init_linear(self, f"fc{i}", a, b, rng)
        init_linear(self, "out", widths[-1], int(np.prod(image_shape)), rng, scale=0.1)

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.k:
            raise ShapeMismatch(f"expected (n, {self.k}) latents, got {z.shape}")
        h = z
        for i in range(len(self.hidden)):
            h = linear(self, f"fc{i}", h).silu()
        out = linear(self, "out", h) + 0.5
        return out.reshape(z.shape[0], *self.image_shape)


def reparameterize(mean: Tensor, logvar: Tensor, eps: np.ndarray) -> Tensor:
    return mean + (logvar * 0.5).exp() * eps


def encode(enc: Encoder, x, rng: np.random.Generator | None = None, deterministic: bool = False) -> np.ndarray:
    """Draw ``z ~ q(z | x)``; ``deterministic=True`` returns the posterior mean."""
    with no_grad():
        mean, logvar = enc(x)
    if deterministic:
        return mean.value
    if rng is None:
        raise ValueError("stochastic encode needs an rng")
    return mean.value + np.exp(0.5 * logvar.value) * rng.standard_normal(mean.shape)


def decode(dec: Decoder, z, rng: np.random.Generator | None = None, sigma_pix: float = 0.0) -> np.ndarray:
    """Mean decode; with ``sigma_pix > 0`` and an rng, add Gaussian pixel noise."""
    with no_grad():
        out = dec(z).value
    if sigma_pix > 0:
        if rng is None:
            raise ValueError("noisy decode needs an rng")
        out = out + sigma_pix * rng.standard_normal(out.shape)
    return out


def reconstruction_loss(dec: Decoder, x, z, sigma_pix: float = 0.1, include_constant: bool = False) -> Tensor:
    """Negative Gaussian log-likelihood summed over pixels, averaged over the batch.

    Without ``include_constant`` the ``0.5 D log(2 pi sigma^2)`` term is dropped,
    so a perfect reconstruction scores exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    recon = dec(z)
    if recon.shape != x.shape:
        raise ShapeMismatch(f"reconstruction {recon.shape} vs target {x.shape}")
    per_image = (recon - x).square().reshape(x.shape[0], -1).sum(axis=1) * (0.5 / sigma_pix**2)
    loss = per_image.mean()
    if include_constant:
        loss = loss + 0.5 * x[0].size * math.log(2 * math.pi * sigma_pix**2)
    if not np.isfinite(loss.value):
        raise NonFiniteLoss("reconstruction loss is not finite", component="autoencoder")
    return loss


@dataclass(frozen=True)
class LatentStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(~(self.std > 0)):
            raise DegenerateLatent("latent standard deviations must be positive")


def fit_latent_stats(latents) -> LatentStats:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ShapeMismatch("need a (n >= 2, k) batch of latents")
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    if np.any(std <= 1e-12 * (1.0 + np.abs(mean))):
        bad = np.flatnonzero(std <= 1e-12 * (1.0 + np.abs(mean)))
        raise DegenerateLatent(f"zero-variance latent components {bad.tolist()}")
    return LatentStats(mean, std)


def normalize(z, stats: LatentStats):
    return (z - stats.mean) / stats.std


def denormalize(z, stats: LatentStats):
    return z * stats.std + stats.mean
