"""Noise-prediction network, its training loss, and DDPM/DDIM samplers.

Any callable ``model(z, alpha) -> Tensor`` with ``z`` of shape ``(n, dim)`` and
``alpha`` a scalar or length-``n`` array can stand in for the network; the
samplers only rely on that signature and on ``model.dim`` when they have to
draw the initial noise themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, no_grad
from .errors import InvalidParameter, NonFiniteLoss, NonFiniteOutput, ShapeMismatch
from .nn import Module, init_linear, linear
from .schedule import AlphaSchedule, WeightFunction, posterior_params, subsample

# the network sees alpha = 1 during inversion; clip the log-SNR to keep the embedding finite
LOGSNR_CLIP = 14.0


class _DiffusionError(InvalidParameter):
    component = "diffusion"


def alpha_embedding(alpha, n: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the clipped log signal-to-noise ratio of ``alpha``."""
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,))
    with np.errstate(divide="ignore"):
        logsnr = np.log(a) - np.log1p(-a)
    logsnr = np.clip(logsnr, -LOGSNR_CLIP, LOGSNR_CLIP)
    freqs = np.exp(np.linspace(math.log(1.0 / 16), math.log(4.0), dim // 2))
    arg = logsnr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class NoisePredictor(Module):
    """Residual MLP ``eps_theta(z, alpha)`` over flat latents.

    Each residual block adds ``W2 silu(W1 silu(h) + E(alpha))`` to the hidden
    state, where ``E`` projects the shared alpha embedding.
    """

    def __init__(self, dim: int, width: int = 256, n_blocks: int = 2, emb_dim: int = 32, seed: int = 0):
        super().__init__()
        self.dim, self.width, self.n_blocks, self.emb_dim = dim, width, n_blocks, emb_dim
        rng = np.random.default_rng(seed)
        init_linear(self, "emb", emb_dim, width, rng)
        init_linear(self, "inp", dim, width, rng)
        for i in range(n_blocks):
            init_linear(self, f"block{i}.fc1", width, width, rng)
            init_linear(self, f"block{i}.emb", width, width, rng)
            init_linear(self, f"block{i}.fc2", width, width, rng, scale=0.1)
        init_linear(self, "out", width, dim, rng, scale=0.1)

    @property
    def architecture(self) -> dict:
        return {"dim": self.dim, "width": self.width, "n_blocks": self.n_blocks, "emb_dim": self.emb_dim}

    def __call__(self, z, alpha) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ShapeMismatch(f"expected (n, {self.dim}) latents, got {z.shape}")
        e = linear(self, "emb", alpha_embedding(alpha, z.shape[0], self.emb_dim)).silu()
        h = linear(self, "inp", z)
        for i in range(self.n_blocks):
            u = linear(self, f"block{i}.fc1", h.silu()) + linear(self, f"block{i}.emb", e)
            h = h + linear(self, f"block{i}.fc2", u.silu())
        return linear(self, "out", h.silu())

    def predict(self, z: np.ndarray, alpha) -> np.ndarray:
        with no_grad():
            return self(z, alpha).value


def _eval(model, x: np.ndarray, alpha) -> np.ndarray:
    with no_grad():
        out = model(x, alpha)
    return out.value if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def diffusion_loss(model, x0_batch, schedule: AlphaSchedule, weights: WeightFunction, rng: np.random.Generator) -> Tensor:
    """Single-step Monte Carlo estimate of the weighted noise-regression loss.

    Each item gets its own ``t ~ Uniform{1..T}`` and ``eps ~ N(0, I)``; the
    result is ``mean_i w(alpha_t_i) ||eps_i - eps_theta(x_t_i, alpha_t_i)||^2``.
    Gradients flow to the model parameters and to ``x0_batch`` if it is a
    tracked tensor.
    """
    x0 = as_tensor(x0_batch)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ShapeMismatch(f"expected a nonempty (n, dim) batch, got {x0.shape}")
    if len(weights) != schedule.T:
        raise ShapeMismatch(f"{len(weights)} weights for a {schedule.T}-step schedule")
    n = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    a = schedule.alphas[t]
    x_t = x0 * np.sqrt(a)[:, None] + np.sqrt(1.0 - a)[:, None] * eps
    err = (as_tensor(model(x_t, a)) - eps).square().sum(axis=1)
    loss = (err * weights(t)).mean()
    if not np.isfinite(loss.value):
        raise NonFiniteLoss("diffusion loss is not finite", component="diffusion")
    return loss


def ddim_step(model, x_t, alpha_t: float, alpha_prev: float) -> np.ndarray:
    """One deterministic update from level ``alpha_t`` to ``alpha_prev``.

    ``x_prev / sqrt(a_p) = x_t / sqrt(a_t) + (sqrt((1-a_p)/a_p) - sqrt((1-a_t)/a_t)) eps``.
    Works in both directions, so inversion is the same call with the levels swapped.
    """
    if not (0 < alpha_t <= 1 and 0 < alpha_prev <= 1):
        raise _DiffusionError("levels must lie in (0, 1]")
    x_t = np.asarray(x_t, dtype=np.float64)
    if alpha_prev == alpha_t:
        return x_t.copy()
    eps = _eval(model, x_t, alpha_t)
    coef = math.sqrt((1 - alpha_prev) / alpha_prev) - math.sqrt((1 - alpha_t) / alpha_t)
    return math.sqrt(alpha_prev) * (x_t / math.sqrt(alpha_t) + coef * eps)


def ddpm_step(model, x_t, alpha_t: float, alpha_prev: float, rng: np.random.Generator) -> np.ndarray:
    """Ancestral step: draw from the Gaussian posterior at the predicted clean point.

    The clean point is ``x0 = (x_t - sqrt(1 - a_t) eps) / sqrt(a_t)``; its
    posterior mean reduces to ``sqrt(a_p/a_t) (x_t - (a_p - a_t) / (a_p sqrt(1 - a_t)) eps)``.
    """
    if not (0 < alpha_t <= 1 and 0 < alpha_prev <= 1):
        raise _DiffusionError("levels must lie in (0, 1]")
    if alpha_prev < alpha_t:
        raise _DiffusionError("ddpm_step only runs in the denoising direction")
    x_t = np.asarray(x_t, dtype=np.float64)
    if alpha_prev == alpha_t:
        return x_t.copy()
    eps = _eval(model, x_t, alpha_t)
    x0 = (x_t - math.sqrt(1 - alpha_t) * eps) / math.sqrt(alpha_t)
    mean, var = posterior_params(x_t, x0, alpha_t, alpha_prev)
    return mean + math.sqrt(var) * rng.standard_normal(x_t.shape)


@dataclass(frozen=True)
class SamplerSpec:
    kind: str
    schedule: AlphaSchedule
    steps: int

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise _DiffusionError(f"unknown sampler {self.kind!r}")
        if self.steps < 1:
            raise _DiffusionError("step count must be >= 1")

    @property
    def levels(self) -> AlphaSchedule:
        return subsample(self.schedule, self.steps)


def _run(model, levels: np.ndarray, x: np.ndarray, kind: str, rng) -> np.ndarray:
    # levels are visited in the given order; each consecutive pair is one step
    for a_t, a_p in zip(levels[:-1], levels[1:]):
        if kind == "ddim":
            x = ddim_step(model, x, float(a_t), float(a_p))
        else:
            x = ddpm_step(model, x, float(a_t), float(a_p), rng)
    if not np.all(np.isfinite(x)):
        raise NonFiniteOutput("sampler produced non-finite values")
    return x


def sample(model, spec: SamplerSpec, n: int, rng: np.random.Generator, noise: np.ndarray | None = None) -> np.ndarray:
    """Draw ``n`` samples at ``alpha_0`` starting from ``x(alpha_T) ~ N(0, I)``.

    ``noise`` overrides the starting point (used for paired comparisons
    across step counts).
    """
    if n < 1:
        raise _DiffusionError("n must be >= 1")
    x = rng.standard_normal((n, model.dim)) if noise is None else np.array(noise, dtype=np.float64)
    if x.shape[0] != n:
        raise ShapeMismatch(f"noise has {x.shape[0]} rows, expected {n}")
    return _run(model, spec.levels.alphas[::-1], x, spec.kind, rng)


def ddim_invert(model, schedule: AlphaSchedule, x_clean) -> np.ndarray:
    """Run the DDIM update with the level sequence reversed: clean -> ``x(alpha_T)``."""
    return _run(model, schedule.alphas, np.asarray(x_clean, dtype=np.float64), "ddim", None)


def partial_diffuse(
    model,
    schedule: AlphaSchedule,
    x,
    alpha_from: float,
    alpha_to: float,
    kind: str = "ddim",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Denoise ``x`` from level ``alpha_from`` up to ``alpha_to``.

    Steps through every schedule level strictly between the two endpoints.
    """
    if not (0 < alpha_from <= alpha_to <= 1):
        raise _DiffusionError(f"invalid range alpha_from={alpha_from}, alpha_to={alpha_to}")
    x = np.asarray(x, dtype=np.float64)
    if alpha_from == alpha_to:
        return x.copy()
    a = schedule.alphas
    inner = a[(a > alpha_from) & (a < alpha_to)]
    levels = np.concatenate([[alpha_from], np.sort(inner), [alpha_to]])
    return _run(model, levels, x, kind, rng)


def manipulation_schedule(alpha: float, steps: int = 5) -> AlphaSchedule:
    """Evenly spaced levels from 1 down to ``alpha`` for short diffuse-denoise passes."""
    if not 0 < alpha < 1:
        raise _DiffusionError("alpha must lie in (0, 1)")
    return AlphaSchedule(np.linspace(1.0, alpha, steps + 1))


def zero_predictor(dim: int):
    """``eps_theta = 0``: the closed-form reference model."""

    def model(z, alpha):
        return Tensor(np.zeros(np.shape(as_tensor(z).value)))

    model.dim = dim
    return model


__all__ = [
    "NoisePredictor",
    "SamplerSpec",
    "alpha_embedding",
    "ddim_invert",
    "ddim_step",
    "ddpm_step",
    "diffusion_loss",
    "manipulation_schedule",
    "partial_diffuse",
    "sample",
    "zero_predictor",
]
