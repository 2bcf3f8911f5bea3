"""Torus geometry, the Maxwellian reference measure and elastic scattering.

Positions live on the unit torus [0,1)^d, velocities in R^d with thermal
units (unit variance per coordinate).  d is a runtime parameter, 2 or 3.
All functions here are pure and safe for concurrent use.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

ETA_UNIT_TOL = 1e-12


def wrap(x):
    """Reduce torus coordinates to [0, 1)."""
    return np.asarray(x, dtype=float) % 1.0


def minimum_image(x1, x2):
    """Shortest displacement x1 - x2 on the unit torus.

    Components lie in (-1/2, 1/2]; exact half-cell ties resolve to the
    positive representative.
    """
    d = np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)
    return d - np.ceil(d - 0.5)


def torus_distance(x1, x2):
    d = minimum_image(x1, x2)
    return float(np.sqrt(np.sum(d * d)))


def pairwise_minimum_image(x):
    """All displacement vectors x[i] - x[j], shape (n, n, dim)."""
    x = np.asarray(x, dtype=float)
    d = x[:, None, :] - x[None, :, :]
    return d - np.ceil(d - 0.5)


def maxwellian_density(v):
    """Standard Maxwellian M(v) = (2 pi)^(-d/2) exp(-|v|^2 / 2)."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    return (2.0 * math.pi) ** (-d / 2.0) * np.exp(-0.5 * np.sum(v * v, axis=-1))


def maxwellian_sample(rng, d, n=None):
    """Draw velocities with i.i.d. standard normal coordinates."""
    if n is None:
        return rng.standard_normal(d)
    return rng.standard_normal((n, d))


def scatter(v, v_star, eta):
    """Elastic hard-sphere scattering of the pair (v, v_star) along eta.

    v' = v - (eta.(v - v_star)) eta,  v_star' = v_star + (eta.(v - v_star)) eta.
    eta must be a unit vector to within 1e-12.  The map is an involution and
    conserves momentum and kinetic energy exactly in real arithmetic.
    """
    eta = np.asarray(eta, dtype=float)
    norm = math.sqrt(float(np.dot(eta, eta)))
    if abs(norm - 1.0) > ETA_UNIT_TOL:
        raise ValueError(f"contact normal must be unit length, got |eta| = {norm!r}")
    v = np.asarray(v, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    proj = float(np.dot(eta, v - v_star))
    return v - proj * eta, v_star + proj * eta


def contact_roots(dx, dv, eps, horizon):
    """Earliest root of |dx + tau dv| = eps with the pair approaching.

    Vectorized over leading axes of dx/dv.  Returns +inf where there is no
    approaching contact in (0, horizon].  The quadratic is solved on the
    doubled discriminant; the smaller root is taken, so tangent grazing
    (disc == 0) counts as contact.
    """
    dx = np.asarray(dx, dtype=float)
    dv = np.asarray(dv, dtype=float)
    b = np.sum(dx * dv, axis=-1)
    a = np.sum(dv * dv, axis=-1)
    c = np.sum(dx * dx, axis=-1) - eps * eps
    disc = b * b - a * c
    ok = (b < 0.0) & (disc >= 0.0) & (a > 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(ok, (-b - np.sqrt(np.abs(disc))) / np.where(a > 0, a, 1.0), np.inf)
    tau = np.where((tau > 0.0) & (tau <= horizon), tau, np.inf)
    return tau


def pair_contact_time_torus(dx0, dv, eps, horizon):
    """Exact first contact time of a pair on the torus within (0, horizon].

    dx0 is any lift of the relative position (it is re-reduced here).  The
    horizon is split into windows short enough that the relative displacement
    stays below (1/2 - eps), within which the nearest periodic image is the
    only reachable one, so the windowed quadratic solve is exhaustive.
    Returns (tau, eta) with eta the unit contact vector (direction of
    -(dx0 + tau dv), i.e. from particle 1 toward particle 2 when
    dx0 = x1 - x2), or None.
    """
    dx0 = np.asarray(dx0, dtype=float)
    dv = np.asarray(dv, dtype=float)
    speed = math.sqrt(float(np.dot(dv, dv)))
    if speed == 0.0:
        return None
    window = 0.999 * (0.5 - eps) / speed
    if window <= 0.0:
        raise ValueError("eps must be < 1/2 for torus contact detection")
    t0 = 0.0
    dx = dx0 - np.ceil(dx0 - 0.5)
    while t0 < horizon:
        h = min(window, horizon - t0)
        tau = float(contact_roots(dx, dv, eps, h))
        if np.isfinite(tau):
            t_hit = t0 + tau
            sep = dx + tau * dv
            eta = -sep / math.sqrt(float(np.dot(sep, sep)))
            return t_hit, eta
        dx = dx + h * dv
        dx = dx - np.ceil(dx - 0.5)
        t0 += h
    return None


@dataclass
class TestFunction:
    """Observable z = (x, v) -> R with the metadata the harness needs.

    `norm_bound` bounds |g| / M(v) over the sampled range of velocities
    (|v| <= 6); it is metadata for diagnostics, spot-checked on random
    points rather than a proven supremum.  `x_lipschitz` is None for
    velocity-only observables.
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    norm_bound: float
    x_lipschitz: Optional[float] = None
    velocity_only: bool = True
    parity_odd_v: Optional[bool] = None
    sq_norm: Optional[float] = None   # exact <g, g> in L^2(M dz) when known
    mean: float = 0.0                 # exact int g M dz when known

    def __call__(self, x, v):
        return self.fn(np.asarray(x, dtype=float), np.asarray(v, dtype=float))
