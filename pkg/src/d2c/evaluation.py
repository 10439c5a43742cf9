"""Toy-scale metrics: Frechet distance on learned features, MSE, linear probes, purity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, as_tensor, logsumexp, no_grad
from .errors import InvalidParameter, ShapeMismatch, SingleClassInput
from .nn import AdamW, Module, init_linear, linear


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        if sigma.shape != (mu.size, mu.size):
            raise ShapeMismatch(f"covariance {sigma.shape} does not match mean of length {mu.size}")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-10 * max(1.0, np.abs(sigma).max()):
            raise InvalidParameter("covariance is not symmetric")
        if np.linalg.eigvalsh(sigma).min(initial=0.0) < -1e-8 * max(1.0, np.abs(sigma).max()):
            raise InvalidParameter("covariance is indefinite")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianStats":
        f = np.asarray(feats, dtype=np.float64)
        cov = np.cov(f, rowvar=False)
        return cls(f.mean(axis=0), (cov + cov.T) / 2)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is computed from the eigenvalues of
    ``S_a^(1/2) S_b S_a^(1/2)``, which share the spectrum of ``S_a S_b``.
    """
    if a.mu.shape != b.mu.shape:
        raise ShapeMismatch(f"dimension mismatch {a.mu.size} vs {b.mu.size}")
    ra = _psd_sqrt(a.sigma)
    m = ra @ b.sigma @ ra
    vals = np.linalg.eigvalsh((m + m.T) / 2)
    if vals.min(initial=0.0) < -1e-6 * max(1.0, np.abs(vals).max(initial=0.0)):
        raise InvalidParameter("cross covariance product is indefinite")
    cross = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mu - b.mu
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    return max(d, 0.0)


class FeatureExtractor(Module):
    """Small supervised MLP; features are the penultimate activations.

    Heads predict each categorical attribute of the dataset, which forces the
    features to encode what the oracle measures.
    """

    def __init__(self, image_shape, heads: dict[str, int], hidden: int = 128, feat_dim: int = 32, seed: int = 3):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.heads = dict(heads)
        self.feat_dim = feat_dim
        rng = np.random.default_rng(seed)
        init_linear(self, "fc0", int(np.prod(image_shape)), hidden, rng)
        init_linear(self, "fc1", hidden, feat_dim, rng)
        for name, n_cls in self.heads.items():
            init_linear(self, f"head.{name}", feat_dim, n_cls, rng)

    def features_tensor(self, x) -> Tensor:
        x = as_tensor(x)
        h = linear(self, "fc0", x.reshape(x.shape[0], -1) - 0.5).tanh()
        return linear(self, "fc1", h).tanh()

    def features(self, x, batch: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        with no_grad():
            return np.concatenate([self.features_tensor(x[i : i + batch]).value for i in range(0, len(x), batch)])

    def loss(self, x, targets: dict[str, np.ndarray]) -> Tensor:
        f = self.features_tensor(x)
        total = Tensor(0.0)
        for name, y in targets.items():
            logits = linear(self, f"head.{name}", f)
            onehot = np.eye(self.heads[name])[y]
            total = total + (logsumexp(logits, axis=1) - (logits * onehot).sum(axis=1)).mean()
        return total


def fit_feature_extractor(
    images: np.ndarray,
    targets: dict[str, np.ndarray],
    epochs: int = 5,
    batch: int = 128,
    lr: float = 2e-3,
    seed: int = 3,
) -> FeatureExtractor:
    heads = {k: int(v.max()) + 1 for k, v in targets.items()}
    fx = FeatureExtractor(images.shape[1:], heads, seed=seed)
    opt = AdamW(fx.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    images = np.asarray(images, dtype=np.float64)
    for _ in range(epochs):
        perm = rng.permutation(len(images))
        for i in range(0, len(perm), batch):
            idx = perm[i : i + batch]
            opt.zero_grad()
            fx.loss(images[idx], {k: v[idx] for k, v in targets.items()}).backward()
            opt.step()
    return fx


def toy_fid(extractor: FeatureExtractor, real: np.ndarray, generated: np.ndarray) -> float:
    if len(real) < 100 or len(generated) < 100:
        raise InvalidParameter("toy FID needs at least 100 images per set")
    return frechet_distance(
        GaussianStats.from_features(extractor.features(real)),
        GaussianStats.from_features(extractor.features(generated)),
    )


def reconstruction_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Per-image squared error summed over pixels, averaged over images."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"{x.shape} vs {x_hat.shape}")
    return float(((x - x_hat) ** 2).reshape(len(x), -1).sum(axis=1).mean())


def linear_probe(latents, labels, split) -> float:
    """Held-out accuracy of a logistic probe.

    ``split`` is either a fraction of rows used for training (taken from the
    front) or a boolean training mask.
    """
    from .conditional import fit_classifier

    z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if np.ndim(split) == 0:
        n_train = int(round(float(split) * len(z)))
        train = np.zeros(len(z), dtype=bool)
        train[:n_train] = True
    else:
        train = np.asarray(split, dtype=bool)
    if len(np.unique(y[train])) < 2:
        raise SingleClassInput("training split has a single class")
    test = ~train
    if not test.any():
        raise InvalidParameter("empty evaluation split")
    clf = fit_classifier(z[train], y[train])
    pred = (clf.prob(z[test]) >= 0.5).astype(int)
    return float((pred == y[test]).mean())


def purity(images, oracle: Callable[[np.ndarray], dict], attribute: str, value: str) -> float:
    """Fraction of images whose oracle reading of ``attribute`` equals ``value``."""
    images = list(images)
    if not images:
        return float("nan")
    return float(np.mean([oracle(img)[attribute] == value for img in images]))
