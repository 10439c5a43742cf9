"""Ring construction of a latent distribution with a large prior hole but small KL/W2.

The prior is ``p = N(0, I_d)`` with ``d in {1, 2}``. ``f(R)`` is the prior mass
of the ball of radius ``R``. Radii ``0 = r_0 < ... < r_2n`` split the ball of
mass ``2 delta`` into ``2n`` shells of equal mass ``delta / n``; ``q`` equals
``2p`` on even shells ``[r_2k, r_2k+1)``, ``0`` on odd shells, and ``p`` outside.
The odd shells form the hole: prior mass ``delta``, ``q``-mass zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .errors import InvalidParameter, QuadratureNonconvergence

LN2 = math.log(2.0)


def gaussian_ball_mass(R, d: int = 1):
    """Standard-normal mass of the centered ball of radius ``R`` in ``d`` dimensions."""
    R = np.asarray(R, dtype=np.float64)
    if np.any(R < 0):
        raise InvalidParameter("radius must be >= 0")
    if d == 1:
        out = special.erf(R / math.sqrt(2.0))
    elif d == 2:
        out = -np.expm1(-0.5 * R * R)
    else:
        raise InvalidParameter("only d in {1, 2} is supported")
    return float(out) if out.ndim == 0 else out


def invert_mass(m: float, d: int = 1, tol: float = 1e-12) -> float:
    """Radius whose ball mass is ``m``, by bisection."""
    if not 0 <= m < 1:
        raise InvalidParameter("mass must lie in [0, 1)")
    if m == 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while gaussian_ball_mass(hi, d) < m:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gaussian_ball_mass(mid, d) < m:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class RingConstruction:
    delta: float
    n: int
    d: int
    radii: np.ndarray

    def density_ratio(self, r) -> np.ndarray:
        """``q / p`` as a function of the radius ``|z|``: 2, 0, or 1."""
        r = np.asarray(r, dtype=np.float64)
        shell = np.searchsorted(self.radii, r, side="right") - 1
        out = np.ones_like(r)
        inside = r < self.radii[-1]
        out[inside & (shell % 2 == 0)] = 2.0
        out[inside & (shell % 2 == 1)] = 0.0
        return out

    def intervals(self) -> list[tuple[float, float, float]]:
        """Radial pieces ``(r_lo, r_hi, q/p)`` covering ``[0, inf)``."""
        r = self.radii
        pieces = [(float(r[i]), float(r[i + 1]), 2.0 if i % 2 == 0 else 0.0) for i in range(2 * self.n)]
        pieces.append((float(r[-1]), math.inf, 1.0))
        return pieces

    def hole_intervals(self) -> list[tuple[float, float]]:
        r = self.radii
        return [(float(r[2 * k + 1]), float(r[2 * k + 2])) for k in range(self.n)]


def build_rings(delta: float, n: int, d: int = 1) -> RingConstruction:
    if not 0 <= delta < 0.5:
        raise InvalidParameter("delta must lie in [0, 0.5)")
    if n < 1:
        raise InvalidParameter("n must be >= 1")
    if d not in (1, 2):
        raise InvalidParameter("only d in {1, 2} is supported")
    masses = np.arange(2 * n + 1) * (delta / n)
    radii = np.array([invert_mass(float(m), d) for m in masses])
    return RingConstruction(delta, n, d, radii)


# -- masses and KL ---------------------------------------------------------------------


def _radial_density(r, d: int):
    """Density of ``|z|`` under the prior."""
    r = np.asarray(r, dtype=np.float64)
    if d == 1:
        return 2.0 * np.exp(-0.5 * r * r) / math.sqrt(2.0 * math.pi)
    return r * np.exp(-0.5 * r * r)


def _quad(fn, lo, hi, what: str, **kw) -> float:
    val, err = integrate.quad(fn, lo, hi, limit=200, epsabs=1e-13, epsrel=1e-11, **kw)
    if not np.isfinite(val) or err > 1e-8:
        raise QuadratureNonconvergence(f"{what}: estimate {val}, error {err}")
    return val


def q_total_mass(c: RingConstruction) -> float:
    """Total mass of ``q``, integrated numerically piece by piece."""
    return sum(ratio * _quad(lambda r: _radial_density(r, c.d), lo, hi, "q mass") for lo, hi, ratio in c.intervals())


def hole_masses(c: RingConstruction) -> tuple[float, float]:
    """``(p(S), q(S))`` for the hole set ``S``, by quadrature."""
    p = sum(_quad(lambda r: _radial_density(r, c.d), lo, hi, "hole mass") for lo, hi in c.hole_intervals())
    q = sum(_quad(lambda r: c.density_ratio(r) * _radial_density(r, c.d), lo, hi, "hole mass")
            for lo, hi in c.hole_intervals())
    return p, q


def kl_divergence(c: RingConstruction) -> float:
    """``KL(q || p) = E_q[log(q/p)]``, by quadrature over the radial pieces."""
    total = 0.0
    for lo, hi, ratio in c.intervals():
        if ratio == 0.0:
            continue
        total += ratio * math.log(ratio) * _quad(lambda r: _radial_density(r, c.d), lo, hi, "kl")
    return total


def kl_analytic(c: RingConstruction) -> float:
    return 2.0 * c.delta * LN2


# -- transport -------------------------------------------------------------------------


def _q_cdf_1d(c: RingConstruction, x):
    """CDF of ``q`` on the real line (``d = 1``)."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    # q-mass of [0, |x|): sum over pieces of ratio * prior mass, halved for one side
    inner = np.zeros_like(ax)
    for lo, hi, ratio in c.intervals():
        top = np.minimum(ax, hi)
        seg = np.where(top > lo, special.erf(top / math.sqrt(2)) - special.erf(lo / math.sqrt(2)), 0.0)
        inner += ratio * 0.5 * seg
    return np.where(x >= 0, 0.5 + inner, 0.5 - inner)


def q_quantile_1d(c: RingConstruction, u) -> np.ndarray:
    """Quantile function of ``q`` in ``d = 1``: the smallest ``x`` with ``F_q(x) >= u``."""
    u = np.asarray(u, dtype=np.float64)
    # invert piecewise: on a piece with ratio rho, F_q is rho * Phi plus a constant
    out = np.empty_like(u)
    v = np.abs(u - 0.5)  # one-sided q-mass needed beyond the origin
    sign = np.where(u >= 0.5, 1.0, -1.0)
    acc = 0.0
    done = np.zeros(u.shape, dtype=bool)
    for lo, hi, ratio in c.intervals():
        if ratio == 0.0:
            continue
        if math.isinf(hi):
            # beyond the rings q = p and both have equal inner mass, so the quantiles agree
            sel = ~done
            out[sel] = special.ndtri(0.5 + v[sel])
            done |= sel
            break
        mass = ratio * 0.5 * (special.erf(hi / math.sqrt(2)) - special.erf(lo / math.sqrt(2)))
        sel = ~done & (v <= acc + mass)
        if np.any(sel):
            # solve acc + ratio/2 * (erf(x/√2) - erf(lo/√2)) = v for x
            target = special.erf(lo / math.sqrt(2)) + 2.0 * (v[sel] - acc) / ratio
            out[sel] = math.sqrt(2) * special.erfinv(np.minimum(target, 1.0))
            done |= sel
        acc += mass
    out[~done] = np.inf
    return sign * out


def wasserstein2_exact_1d(c: RingConstruction, nodes: int = 200_001) -> float:
    """Exact ``W2(q, p)`` in 1-D via ``int_0^1 (F_q^-1(u) - F_p^-1(u))^2 du``.

    The integrand is piecewise smooth with jumps where ``F_q^-1`` skips a
    hole; adaptive quadrature runs between those breakpoints and the sum is
    cross-checked against a midpoint rule on ``nodes`` points.
    """
    if c.d != 1:
        raise InvalidParameter("exact W2 is only available in d = 1")
    breaks = {0.0, 1.0}
    for lo, hi, _ in c.intervals():
        for r in (lo, hi):
            if math.isfinite(r):
                fq = float(_q_cdf_1d(c, r))
                breaks.update({fq, 1.0 - fq})
    breaks = sorted(b for b in breaks if 0 <= b <= 1)

    def integrand(u):
        return (q_quantile_1d(c, u) - special.ndtri(u)) ** 2

    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b - a <= 0:
            continue
        val, err = integrate.quad(integrand, a, b, limit=200, epsabs=1e-14, epsrel=1e-10)
        if not np.isfinite(val):
            raise QuadratureNonconvergence(f"W2 quadrature failed on [{a}, {b}]")
        total += val
    # midpoint cross-check on a fine grid
    u = (np.arange(nodes) + 0.5) / nodes
    mid = float(np.mean(integrand(u)))
    if abs(mid - total) > 1e-4 * max(total, 1e-6) + 1e-8:
        raise QuadratureNonconvergence(f"W2^2 quadrature {total} disagrees with midpoint rule {mid}")
    return math.sqrt(max(total, 0.0))


def w2_bound(c: RingConstruction) -> float:
    """Largest transport displacement squared: ``max_k (r_2k+2 - r_2k)^2``."""
    r = c.radii
    return float(np.max((r[2:: 2] - r[:-1:2]) ** 2))


def w2_density_bound(c: RingConstruction) -> float:
    """The coarser ``2 delta / (pi n min p)`` bound, with ``min p`` taken on the sphere of radius ``r_2n``."""
    p_min = math.exp(-0.5 * c.radii[-1] ** 2) / (2 * math.pi) ** (c.d / 2)
    return 2 * c.delta / (math.pi * c.n * p_min)


# -- noising ---------------------------------------------------------------------------


def noised_ratio_1d(c: RingConstruction, y, alpha: float) -> np.ndarray:
    """``q_alpha(y) / N(y; 0, 1)`` where ``q_alpha`` is the law of ``sqrt(alpha) Z + sqrt(1 - alpha) E``.

    Given ``Y = y`` under the prior, ``Z ~ N(sqrt(alpha) y, 1 - alpha)``, so the
    ratio is ``E[(q/p)(Z) | Y = y]``.
    """
    y = np.asarray(y, dtype=np.float64)
    s = math.sqrt(1.0 - alpha)
    m = math.sqrt(alpha) * y
    out = np.zeros_like(y)
    for lo, hi, ratio in c.intervals():
        if ratio == 0.0:
            continue
        for a, b in ((lo, hi), (-hi, -lo)):
            out += ratio * (special.ndtr((b - m) / s) - special.ndtr((a - m) / s))
    return out


def noised_hole_kl(c: RingConstruction, alpha: float) -> float:
    """``KL(q_alpha || N(0, 1))`` for the noised 1-D construction."""
    if c.d != 1:
        raise InvalidParameter("noised KL is implemented for d = 1")
    if not 0 < alpha <= 1:
        raise InvalidParameter("alpha must lie in (0, 1]")
    if alpha == 1.0:
        return kl_divergence(c)

    def integrand(y):
        h = noised_ratio_1d(c, y, alpha)
        return special.xlogy(h, h) * np.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)

    # breakpoints where the ratio changes fastest: images of the shell edges
    pts = sorted({r * math.sqrt(alpha) for r in c.radii} | {-r * math.sqrt(alpha) for r in c.radii})
    edges = [-12.0, *pts, 12.0]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            total += _quad(integrand, a, b, "noised kl")
    return total


def noised_hole_deficit(c: RingConstruction, alpha: float) -> float:
    """``p(S) - q_alpha(S)`` on the original hole set ``S`` (``d = 1``)."""
    if alpha == 1.0:
        p, q = hole_masses(c)
        return p - q

    def integrand(y):
        h = noised_ratio_1d(c, y, alpha)
        return (1.0 - h) * np.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)

    return 2.0 * sum(_quad(integrand, lo, hi, "deficit") for lo, hi in c.hole_intervals())


# -- reports -------------------------------------------------------------------------------


@dataclass(frozen=True)
class HoleReport:
    delta: float
    n: int
    d: int
    alpha: float
    p_mass: float
    q_mass: float
    kl: float
    w2: float
    w2_bound: float

    FIELDS = ("delta", "n", "d", "alpha", "p_mass", "q_mass", "kl", "w2", "w2_bound")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


def hole_report(delta: float, n: int, d: int = 1, alpha: float = 1.0) -> HoleReport:
    """Hole masses, KL and W2 for one construction; ``alpha < 1`` reports the noised KL."""
    c = build_rings(delta, n, d)
    p, q = hole_masses(c)
    kl = kl_divergence(c) if alpha == 1.0 else noised_hole_kl(c, alpha)
    w2 = wasserstein2_exact_1d(c) if d == 1 else float("nan")
    return HoleReport(delta, n, d, alpha, p, q, kl, w2, w2_bound(c))
