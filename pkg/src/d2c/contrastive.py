"""Augmentations, the cosine critic, and the CPC (InfoNCE) objective."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, concat, logsumexp
from .errors import InvalidParameter, ShapeMismatch
from .nn import Module, init_linear, linear


@dataclass(frozen=True)
class AugmentationPolicy:
    """Random resized crop, horizontal flip, color jitter and grayscale, in ``[0, 1]`` space."""

    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.3
    contrast: float = 0.3
    saturation: float = 0.3
    grayscale_prob: float = 0.1

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise InvalidParameter(f"crop scale range {self.crop_scale} not within (0, 1]")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise InvalidParameter(f"bad crop ratio range {self.crop_ratio}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidParameter(f"{name} must be a probability")
        for name in ("brightness", "contrast", "saturation"):
            if not 0 <= getattr(self, name) < 1:
                raise InvalidParameter(f"{name} strength must lie in [0, 1)")

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls((1.0, 1.0), (1.0, 1.0), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _resize_bilinear(img: np.ndarray, top: float, left: float, h: float, w: float, out_h: int, out_w: int) -> np.ndarray:
    # pixel-center sampling, so a full-size crop maps every pixel onto itself
    rows = top + (np.arange(out_h) + 0.5) * h / out_h - 0.5
    cols = left + (np.arange(out_w) + 0.5) * w / out_w - 0.5
    rows = np.clip(rows, 0, img.shape[0] - 1)
    cols = np.clip(cols, 0, img.shape[1] - 1)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, img.shape[0] - 1)
    c1 = np.minimum(c0 + 1, img.shape[1] - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    top_row = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot_row = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top_row * (1 - fr) + bot_row * fr


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img.mean(axis=-1)


def augment(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply one random draw of ``policy`` to a single ``(H, W, C)`` image."""
    img = np.asarray(x, dtype=np.float64)
    H, W = img.shape[:2]

    scale = rng.uniform(*policy.crop_scale)
    log_ratio = rng.uniform(math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    ratio = math.exp(log_ratio)
    w = min(float(W), math.sqrt(scale * H * W * ratio))
    h = min(float(H), math.sqrt(scale * H * W / ratio))
    top = rng.uniform(0, H - h)
    left = rng.uniform(0, W - w)
    if h < H or w < W:
        img = _resize_bilinear(img, top, left, h, w, H, W)

    if rng.uniform() < policy.flip_prob:
        img = img[:, ::-1]

    if rng.uniform() < policy.jitter_prob:
        b = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        img = np.clip(img * b, 0, 1)
        m = _gray(img).mean()
        img = np.clip((img - m) * c + m, 0, 1)
        g = _gray(img)[..., None]
        img = np.clip(g + (img - g) * s, 0, 1)

    if rng.uniform() < policy.grayscale_prob:
        img = np.repeat(_gray(img)[..., None], img.shape[-1], axis=-1)

    return np.clip(img, 0.0, 1.0)


def augment_batch(x: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment every image with its own stream derived from ``rng``."""
    seeds = rng.integers(0, 2**63 - 1, size=len(x))
    return np.stack([augment(img, policy, np.random.default_rng(s)) for img, s in zip(x, seeds)])


class Critic(Module):
    """``g(y, w) = exp(cos(P y, P w) / tau)`` with a learned linear projection ``P``."""

    def __init__(self, k: int, proj_dim: int = 16, tau: float = 0.1, seed: int = 2):
        super().__init__()
        if tau <= 0:
            raise InvalidParameter("temperature must be positive")
        self.k, self.proj_dim, self.tau = k, proj_dim, tau
        init_linear(self, "proj", k, proj_dim, np.random.default_rng(seed))

    def project(self, z) -> Tensor:
        p = linear(self, "proj", as_tensor(z))
        return p / ((p.square().sum(axis=-1, keepdims=True) + 1e-12).sqrt())

    def log_score(self, y, w) -> Tensor:
        """``log g`` for anchors ``y`` of shape ``(n, k)`` against candidates ``(n, M, k)``."""
        py = self.project(y)
        pw = self.project(w)
        n, M = pw.shape[0], pw.shape[1]
        return (pw * py.reshape(n, 1, self.proj_dim)).sum(axis=-1) * (1.0 / self.tau)


class ConstantCritic:
    """``g = c`` everywhere."""

    def __init__(self, c: float = 1.0):
        self.c = c

    def log_score(self, y, w) -> Tensor:
        w = as_tensor(w)
        return Tensor(np.full(w.shape[:2], math.log(self.c)))


def cpc_from_scores(pos, neg) -> Tensor:
    """``-L_CPC`` from log critic values: ``pos`` is ``(n,)``, ``neg`` is ``(n, m - 1)``.

    ``L_CPC = mean_i log(m g_i+ / (g_i+ + sum_j g_ij-))``; the return value is its
    negation (the quantity to minimize).
    """
    pos, neg = as_tensor(pos), as_tensor(neg)
    n = pos.shape[0]
    m = neg.shape[1] + 1
    logits = concat([pos.reshape(n, 1), neg], axis=1)
    # shifting by the (untracked) row max leaves value and gradient unchanged
    # and makes equal scores cancel exactly
    shift = logits.value.max(axis=1)
    l_cpc = ((pos - shift) - logsumexp(logits - shift[:, None], axis=1)).mean() + math.log(m)
    return -l_cpc


def cpc_loss(critic, positives: tuple, negatives) -> Tensor:
    """Contrastive loss for ``n`` positive pairs ``(y_i, w_i)`` and ``n x (m-1)`` negatives."""
    y, w = (as_tensor(t) for t in positives)
    negatives = as_tensor(negatives)
    if y.shape != w.shape or y.ndim != 2:
        raise ShapeMismatch(f"positive pair shapes {y.shape} vs {w.shape}")
    if negatives.ndim != 3 or negatives.shape[0] != y.shape[0] or negatives.shape[2] != y.shape[1]:
        raise ShapeMismatch(f"negatives must be (n, m-1, k), got {negatives.shape}")
    if negatives.shape[1] < 1:
        raise ShapeMismatch("need m >= 2")
    n, k = y.shape
    cands = concat([w.reshape(n, 1, k), negatives], axis=1)
    scores = critic.log_score(y, cands)
    return cpc_from_scores(scores[:, 0], scores[:, 1:])


def momentum_update(key_params: dict[str, Tensor], query_params: dict[str, Tensor], m_coef: float) -> None:
    """In place: ``key <- m * key + (1 - m) * query``."""
    if not 0 <= m_coef < 1:
        raise InvalidParameter("momentum coefficient must lie in [0, 1)")
    if set(key_params) != set(query_params):
        raise ShapeMismatch("key and query parameter tables differ")
    for name, kp in key_params.items():
        qp = query_params[name]
        if kp.shape != qp.shape:
            raise ShapeMismatch(f"shape mismatch for {name}")
        # the increment form leaves an already-synced key bit-identical
        kp.value = qp.value.copy() if m_coef == 0 else kp.value + (1.0 - m_coef) * (qp.value - kp.value)


class NegativeStore:
    """FIFO ring of past key latents."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise InvalidParameter("capacity must be >= 1")
        self.capacity = capacity
        self._buf: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, keys: np.ndarray) -> None:
        for row in np.atleast_2d(keys):
            self._buf.append(np.array(row, dtype=np.float64))

    def items(self) -> np.ndarray:
        return np.array(self._buf)
