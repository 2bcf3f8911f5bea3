"""Grand-canonical hard-sphere Gibbs sampling under Boltzmann-Grad scaling.

The target measure weights an n-particle configuration by
mu^n / n! * 1{no pair closer than eps} * M^(x)n, i.e. a Poisson(mu) point
process on the torus with Maxwellian velocities conditioned on hard-core
exclusion.  Two exact samplers are provided:

* ``method="reject"``: wholesale rejection.  Acceptance is roughly
  exp(-mu^2 c_d eps^d / 2), which collapses at Boltzmann-Grad scale
  (mu = eps^(1-d)), so this is only usable at small mu.
* ``method="prs"`` (default): partial rejection sampling.  Conflicted points
  are removed together with every point of a region U chosen as a fixed
  point of "U contains the eps-ball of every point inside U"; U is then
  refilled with a fresh Poisson(mu) sample.  Kept points are at distance
  >= eps from anything that may appear in U, so no information about the
  removed points leaks and the output law is exactly the conditioned
  process.
"""

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import maxwellian_sample, pairwise_minimum_image


class GibbsSamplingError(RuntimeError):
    pass


def boltzmann_grad_mu(epsilon, d):
    """Activity mu_eps = eps^-(d-1), so that mu * eps^(d-1) = 1."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return float(epsilon) ** (-(d - 1))


def unit_ball_volume(d):
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


@dataclass
class EnsembleParams:
    d: int
    epsilon: float
    mu: float
    seed: int
    replicas: int = 100

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")
        if self.epsilon < 0 or self.epsilon >= 0.25:
            raise ValueError("need 0 <= epsilon < 1/4 on the unit torus")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")

    @classmethod
    def boltzmann_grad(cls, epsilon, d, seed, replicas=100):
        return cls(d=d, epsilon=epsilon, mu=boltzmann_grad_mu(epsilon, d),
                   seed=seed, replicas=replicas)


@dataclass
class Configuration:
    """Particle state Z_n: positions on the torus and velocities, (n, d)."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.v = np.atleast_2d(np.asarray(self.v, dtype=float))
        if self.x.shape != self.v.shape:
            raise ValueError("positions and velocities must have equal shape")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def d(self):
        return self.x.shape[1]

    def min_pair_distance(self):
        if self.n < 2:
            return math.inf
        dx = pairwise_minimum_image(self.x)
        dist = np.sqrt(np.sum(dx * dx, axis=-1))
        iu = np.triu_indices(self.n, k=1)
        return float(dist[iu].min())

    def validate_exclusion(self, epsilon):
        if self.min_pair_distance() <= epsilon:
            raise ValueError("configuration violates hard-core exclusion")

    def to_text(self, epsilon):
        buf = io.StringIO()
        buf.write(f"{self.d} {epsilon:.17g} {self.n}\n")
        for i in range(self.n):
            row = list(self.x[i]) + list(self.v[i])
            buf.write(" ".join(f"{val:.17g}" for val in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        d_str, eps_str, n_str = lines[0].split()
        d, n = int(d_str), int(n_str)
        rows = [list(map(float, ln.split())) for ln in lines[1:1 + n]]
        arr = np.array(rows, dtype=float).reshape(n, 2 * d)
        cfg = cls(x=arr[:, :d], v=arr[:, d:]) if n else cls.empty(d)
        return cfg, float(eps_str)

    @classmethod
    def empty(cls, d):
        return cls(x=np.zeros((0, d)), v=np.zeros((0, d)))


def _conflict_pairs(x, epsilon):
    """Indices of points belonging to some pair at torus distance <= eps."""
    n = x.shape[0]
    if n < 2 or epsilon <= 0.0:
        return np.zeros(0, dtype=int)
    tree = cKDTree(x, boxsize=1.0)
    pairs = tree.query_pairs(epsilon, output_type="ndarray")
    return np.unique(pairs.ravel())


def _poisson_on_ball_union(rng, centers, epsilon, mu, d):
    """Fresh Poisson(mu) sample on the union of eps-balls around centers.

    Sampled by drawing Poisson(mu * k * vol_ball) proposals uniformly over
    (ball index) x (ball), then thinning each proposal with probability
    1/multiplicity, where multiplicity counts covering balls.  The thinned
    process is exactly Poisson(mu) restricted to the union.
    """
    k = centers.shape[0]
    vol = unit_ball_volume(d) * epsilon ** d
    n_prop = rng.poisson(mu * k * vol)
    if n_prop == 0:
        return np.zeros((0, d))
    idx = rng.integers(0, k, size=n_prop)
    dirs = rng.standard_normal((n_prop, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = epsilon * rng.random(n_prop) ** (1.0 / d)
    pts = (centers[idx] + dirs * radii[:, None]) % 1.0
    # multiplicity of each proposal over all ball centers
    diff = pts[:, None, :] - centers[None, :, :]
    diff -= np.ceil(diff - 0.5)
    inside = np.sum(diff * diff, axis=-1) < epsilon * epsilon
    mult = np.maximum(inside.sum(axis=1), 1)
    keep = rng.random(n_prop) < 1.0 / mult
    return pts[keep]


def _near_any(x, targets, epsilon):
    """Boolean mask: which rows of x lie within eps of some target point."""
    if x.shape[0] == 0 or targets.shape[0] == 0:
        return np.zeros(x.shape[0], dtype=bool)
    tree = cKDTree(targets, boxsize=1.0)
    dist, _ = tree.query(x, k=1, distance_upper_bound=epsilon)
    return dist < epsilon


def sample_positions_prs(rng, mu, epsilon, d, max_rounds=10000):
    """Exact hard-core Poisson positions by partial rejection sampling.

    After the first full conflict scan, only pairs touching freshly
    resampled points can conflict (kept-kept pairs were already clear), so
    later rounds scan fresh points only.
    """
    n0 = rng.poisson(mu)
    x = rng.random((n0, d))
    if epsilon == 0.0:
        return x
    bad_mask = np.zeros(x.shape[0], dtype=bool)
    bad_mask[_conflict_pairs(x, epsilon)] = True
    for _ in range(max_rounds):
        if not bad_mask.any():
            return x
        # grow the seed set to a fixed point: any point within eps of a
        # seed becomes a seed (frontier sweep)
        seed_mask = bad_mask
        frontier = x[seed_mask]
        while True:
            grown = _near_any(x, frontier, epsilon) & ~seed_mask
            if not grown.any():
                break
            seed_mask = seed_mask | grown
            frontier = x[grown]
        centers = x[seed_mask]
        fresh = _poisson_on_ball_union(rng, centers, epsilon, mu, d)
        kept = x[~seed_mask]
        x = np.concatenate([kept, fresh], axis=0)
        # new conflicts necessarily involve a fresh point
        bad_mask = np.zeros(x.shape[0], dtype=bool)
        nf = fresh.shape[0]
        if nf:
            hit_kept = _near_any(kept, fresh, epsilon)
            bad_mask[:kept.shape[0]][hit_kept] = True
            fresh_bad = _near_any(fresh, kept[hit_kept], epsilon)
            if nf > 1:
                ff = _conflict_pairs(fresh, epsilon)
                fresh_bad[ff] = True
            bad_mask[kept.shape[0]:][fresh_bad] = True
    raise GibbsSamplingError(
        f"partial rejection did not converge in {max_rounds} rounds "
        f"(mu={mu:g}, eps={epsilon:g})")


def sample_gibbs(params, rng, method="prs", max_attempts=100000):
    """Draw one configuration from the grand-canonical Gibbs measure.

    With epsilon == 0 the exclusion constraint is dropped and the result is
    a plain Poisson(mu) ideal gas.
    """
    mu, eps, d = params.mu, params.epsilon, params.d
    if eps == 0.0 or method == "prs":
        x = sample_positions_prs(rng, mu, eps, d)
    elif method == "reject":
        accept_est = math.exp(-0.5 * mu * mu * unit_ball_volume(d) * eps ** d)
        for _ in range(max_attempts):
            n = rng.poisson(mu)
            x = rng.random((n, d))
            if _conflict_pairs(x, eps).size == 0:
                break
        else:
            raise GibbsSamplingError(
                f"no admissible configuration in {max_attempts} attempts; "
                f"estimated acceptance rate {accept_est:.3g}")
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    v = maxwellian_sample(rng, d, n=x.shape[0])
    return Configuration(x=x, v=v)


def replica_rng(seed, index):
    """Independent deterministic stream for one replica."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(index))))


def expectation(fn, params, replicas=None, method="prs"):
    """Replica-averaged E_eps[fn(Z)] with its standard error."""
    r = params.replicas if replicas is None else replicas
    if r < 2:
        raise ValueError("need at least 2 replicas")
    vals = np.empty(r)
    for i in range(r):
        rng = replica_rng(params.seed, i)
        vals[i] = fn(sample_gibbs(params, rng, method=method))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(r))
