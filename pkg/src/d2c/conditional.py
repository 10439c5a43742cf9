"""Few-shot conditioning over latents: linear classifiers, rejection sampling, manipulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, as_tensor
from .errors import AcceptanceStarvation, EmptySplit, InvalidParameter, NonFiniteOutput, ShapeMismatch, SingleClassInput
from .nn import Module

ALPHA_BAND = (0.65, 0.9)


class LatentClassifier(Module):
    """Logistic head ``r(c = 1 | z) = sigmoid(w . z + b)``.

    In PU mode the output is divided by the calibration constant ``c_pu`` and
    clamped to 1.
    """

    def __init__(self, k: int, weight=None, bias: float = 0.0, c_pu: float = 1.0):
        super().__init__()
        if not 0 < c_pu <= 1:
            raise InvalidParameter("c_pu must lie in (0, 1]")
        self.k = k
        self.c_pu = float(c_pu)
        self.add_param("w", np.zeros(k) if weight is None else np.asarray(weight, dtype=np.float64))
        self.add_param("b", np.array([float(bias)]))

    @property
    def weight(self) -> np.ndarray:
        return self.params["w"].value

    @property
    def bias(self) -> float:
        return float(self.params["b"].value[0])

    def logit(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-1] != self.k:
            raise ShapeMismatch(f"expected latents of width {self.k}, got {z.shape}")
        return z @ self.params["w"] + self.params["b"]

    def prob(self, z, target: int = 1) -> np.ndarray:
        """Calibrated ``r(c = target | z)``."""
        p = self.logit(z).sigmoid().value
        p = np.minimum(p / self.c_pu, 1.0)
        return p if target == 1 else 1.0 - p


def logistic_loss(clf: LatentClassifier, z, y, l2: float = 0.0) -> Tensor:
    """Mean binary cross-entropy plus ``l2 * ||w||^2 / 2``."""
    y = np.asarray(y, dtype=np.float64)
    s = clf.logit(z)
    # log(1 + exp(s)) - y s, written with softplus for stability
    sv = s.value
    sp_val = np.maximum(sv, 0) + np.log1p(np.exp(-np.abs(sv)))
    softplus = Tensor._make(sp_val, (s,), lambda g: (g * (1.0 / (1.0 + np.exp(-sv))),))
    loss = (softplus - s * y).mean()
    if l2:
        loss = loss + clf.params["w"].square().sum() * (0.5 * l2)
    return loss


def fit_classifier(
    latents,
    labels,
    l2: float = 1e-3,
    tol: float = 1e-6,
    max_iter: int = 20000,
) -> LatentClassifier:
    """Regularized logistic regression by accelerated gradient descent.

    Inputs are standardized internally and the scaling is folded back into
    the returned weights. Stops when the gradient norm drops below ``tol``.
    """
    z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    if z.ndim != 2 or len(z) != len(y):
        raise ShapeMismatch("latents must be (n, k) with one label per row")
    if len(z) < 2 or y.min() == y.max():
        raise SingleClassInput("need both classes to fit a classifier")
    mu = z.mean(axis=0)
    sd = z.std(axis=0)
    sd[sd == 0] = 1.0
    zs = (z - mu) / sd
    k = z.shape[1]
    clf = LatentClassifier(k)
    w_param, b_param = clf.params["w"], clf.params["b"]

    # Lipschitz constant of the gradient: sigma_max(X'X/n)/4 + l2 (bias column included)
    xb = np.hstack([zs, np.ones((len(zs), 1))])
    lip = np.linalg.norm(xb, ord=2) ** 2 / (4 * len(zs)) + l2
    step = 1.0 / lip
    theta = np.zeros(k + 1)
    prev = theta.copy()
    for it in range(max_iter):
        look = theta + (it / (it + 3.0)) * (theta - prev)
        w_param.value, b_param.value = look[:k].copy(), look[k:].copy()
        clf.zero_grad()
        logistic_loss(clf, zs, y, l2).backward()
        grad = np.concatenate([w_param.grad, b_param.grad])
        if np.linalg.norm(grad) < tol:
            theta = look
            break
        prev, theta = theta, look - step * grad
    w, b = theta[:k], theta[k]
    return LatentClassifier(k, weight=w / sd, bias=float(b - (w * mu / sd).sum()))


def classifier_gradient_norm(clf: LatentClassifier, latents, labels, l2: float = 1e-3) -> float:
    """Gradient norm of the fitting objective in the classifier's own (standardized) coordinates."""
    z = np.asarray(latents, dtype=np.float64)
    mu, sd = z.mean(axis=0), z.std(axis=0)
    sd[sd == 0] = 1.0
    probe = LatentClassifier(clf.k, weight=clf.weight * sd, bias=clf.bias + float((clf.weight * mu).sum()))
    logistic_loss(probe, (z - mu) / sd, labels, l2).backward()
    return float(np.linalg.norm(np.concatenate([probe.params["w"].grad, probe.params["b"].grad])))


def fit_pu_classifier(
    positives,
    unlabeled,
    holdout_frac: float = 0.2,
    rng: np.random.Generator | None = None,
    **fit_kw,
) -> LatentClassifier:
    """Positive-unlabeled classifier with Elkan-Noto calibration.

    A classifier separating labeled positives from unlabeled points estimates
    ``p(s = 1 | z) = c p(y = 1 | z)``; ``c`` is the mean score on held-out
    positives, and the returned classifier divides by it.
    """
    pos = np.asarray(positives, dtype=np.float64)
    unl = np.asarray(unlabeled, dtype=np.float64)
    if len(pos) < 10 or len(unl) < 10:
        raise EmptySplit(f"need >= 10 positives and >= 10 unlabeled, got {len(pos)} and {len(unl)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    perm = rng.permutation(len(pos))
    n_hold = max(1, int(round(holdout_frac * len(pos))))
    held, train = pos[perm[:n_hold]], pos[perm[n_hold:]]
    z = np.vstack([train, unl])
    s = np.concatenate([np.ones(len(train)), np.zeros(len(unl))])
    clf = fit_classifier(z, s, **fit_kw)
    c = estimate_c(clf.prob(held))
    return LatentClassifier(clf.k, weight=clf.weight, bias=clf.bias, c_pu=c)


def estimate_c(scores_on_positives) -> float:
    c = float(np.mean(scores_on_positives))
    return min(max(c, 1e-6), 1.0)


# -- rejection sampling ----------------------------------------------------------------


@dataclass
class RejectionStats:
    candidates: int = 0
    accepted: int = 0
    history: list[tuple[int, int]] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.accepted / self.candidates if self.candidates else 0.0


def rejection_sample(
    draw: Callable[[int, np.random.Generator], np.ndarray],
    score: Callable[[np.ndarray], np.ndarray],
    n: int,
    rng: np.random.Generator,
    mode: str = "bernoulli",
    batch: int = 256,
    threshold: float = 0.5,
    window: int = 2000,
    min_rate: float = 1e-3,
) -> tuple[np.ndarray, RejectionStats]:
    """Draw from ``score(z) * p(z)`` by accept/reject against prior draws.

    ``bernoulli`` accepts when ``u < score(z)``; ``threshold`` accepts when
    ``score(z) >= threshold``. Accepted draws keep candidate order. Raises
    :class:`AcceptanceStarvation` once ``window`` candidates have produced an
    acceptance rate below ``min_rate``.
    """
    if mode not in ("bernoulli", "threshold"):
        raise InvalidParameter(f"unknown rejection mode {mode!r}")
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    stats = RejectionStats()
    kept: list[np.ndarray] = []
    got = 0
    while got < n:
        z = draw(batch, rng)
        r = np.asarray(score(z), dtype=np.float64)
        u = rng.uniform(size=len(z))
        ok = (u < r) if mode == "bernoulli" else (r >= threshold)
        stats.candidates += len(z)
        stats.accepted += int(ok.sum())
        stats.history.append((len(z), int(ok.sum())))
        kept.append(z[ok])
        got += int(ok.sum())
        if stats.candidates >= window and stats.rate < min_rate:
            raise AcceptanceStarvation(
                f"acceptance rate {stats.rate:.2e} over {stats.candidates} candidates is below {min_rate:g}"
            )
    return np.concatenate(kept)[:n], stats


# -- manipulation -------------------------------------------------------------------------


@dataclass(frozen=True)
class ManipulationSpec:
    target: int = 1
    eta: float = 1.0
    alpha: float = 0.9
    steps: int = 5
    allow_any_alpha: bool = False

    def __post_init__(self):
        if self.target not in (0, 1):
            raise InvalidParameter("target must be 0 or 1")
        if self.eta < 0:
            raise InvalidParameter("eta must be >= 0")
        if not 0 < self.alpha <= 1:
            raise InvalidParameter("alpha must lie in (0, 1]")
        if not self.allow_any_alpha and not ALPHA_BAND[0] <= self.alpha <= ALPHA_BAND[1]:
            raise InvalidParameter(f"alpha {self.alpha} outside {ALPHA_BAND}; pass allow_any_alpha to override")
        if self.steps < 1:
            raise InvalidParameter("steps must be >= 1")

    @staticmethod
    def default_eta(k: int) -> float:
        return 0.5 * math.sqrt(k)


def logit_ascent(clf: LatentClassifier, z: np.ndarray, eta: float, target: int = 1) -> np.ndarray:
    """``z + eta * grad_z logit(c = target | z)`` for each row of ``z``."""
    zt = Tensor(np.array(z, dtype=np.float64), requires_grad=True)
    logit = clf.logit(zt)
    (logit if target == 1 else -logit).sum().backward()
    g = zt.grad
    if g is None or not np.all(np.isfinite(g)):
        raise NonFiniteOutput("classifier gradient is not finite")
    return zt.value + eta * g


# -- generation against a trained model --------------------------------------------------


def conditional_sample(
    state,
    clf: LatentClassifier,
    target: int,
    n: int,
    rng: np.random.Generator,
    mode: str = "bernoulli",
    steps: int = 100,
    batch: int = 256,
) -> tuple[np.ndarray, np.ndarray, RejectionStats]:
    """Rejection-sample latents from the diffusion prior and decode them.

    ``state`` provides ``prior_sample(n, rng, steps)`` (latents in encoder
    space) and ``decode(z)``. Returns ``(images, latents, stats)``.
    """
    z, stats = rejection_sample(
        lambda m, g: state.prior_sample(m, g, steps=steps),
        lambda zz: clf.prob(zz, target),
        n,
        rng,
        mode=mode,
        batch=batch,
    )
    return state.decode(z), z, stats


@dataclass
class ManipulationResult:
    image: np.ndarray
    latent: np.ndarray
    score_before: np.ndarray
    score_after: np.ndarray
    displacement: np.ndarray


def manipulate(
    state,
    clf: LatentClassifier,
    spec: ManipulationSpec,
    x: np.ndarray,
    rng: np.random.Generator,
    deterministic_encode: bool = True,
) -> ManipulationResult:
    """Edit images toward ``spec.target`` while staying close to the originals.

    Encode, take one ascent step on the classifier logit, noise the edited
    latent to level ``spec.alpha``, denoise back to level 1 with DDIM in
    ``spec.steps`` steps, and decode. ``x`` is a batch of images.
    """
    from .diffusion import manipulation_schedule, partial_diffuse
    from .schedule import forward_noise

    z = state.encode(x, rng=None if deterministic_encode else rng, deterministic=deterministic_encode)
    z_bar = logit_ascent(clf, z, spec.eta, spec.target)
    zn = state.normalize(z_bar)
    if spec.alpha < 1:
        noisy = forward_noise(zn, spec.alpha, rng.standard_normal(zn.shape))
        sched = manipulation_schedule(spec.alpha, spec.steps)
        zn = partial_diffuse(state.predictor, sched, noisy, spec.alpha, 1.0)
    z_hat = state.denormalize(zn)
    return ManipulationResult(
        image=state.decode(z_hat),
        latent=z_hat,
        score_before=clf.prob(z, spec.target),
        score_after=clf.prob(z_hat, spec.target),
        displacement=np.linalg.norm(z_hat - z, axis=1),
    )


__all__ = [
    "ALPHA_BAND",
    "LatentClassifier",
    "ManipulationResult",
    "ManipulationSpec",
    "RejectionStats",
    "classifier_gradient_norm",
    "conditional_sample",
    "estimate_c",
    "fit_classifier",
    "fit_pu_classifier",
    "logistic_loss",
    "logit_ascent",
    "manipulate",
    "rejection_sample",
]
