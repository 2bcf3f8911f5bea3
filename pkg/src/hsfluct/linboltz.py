"""The linearized collision operator and three routes to its semigroup.

L g(v) = int (g(v') + g(v*') - g(v) - g(v*)) ((v - v*).eta)_+ M(v*) deta dv*,
self-adjoint and nonpositive on L^2(M dv), with kernel mass
nu(v) = c_d E|v - vbar| (c_3 = pi, c_2 = 2) per particle.

Routes to <h, e^{t(-v.grad_x + L)} g>:

* ``duhamel_series_oracle`` - deterministic: Galerkin matrix of L in an
  orthonormal Hermite-polynomial basis (assembled once by fixed-seed Monte
  Carlo quadrature, collision invariants exact by construction), truncated
  exponential series with a reported tail bound.  Velocity-only data.
* ``fourier_mode_solver`` - same series applied on a Gauss-Hermite node
  grid where the transport multiplier -2 pi i k.v is diagonal (exact), for
  single-Fourier-mode data.
* ``semigroup_mc`` - Monte Carlo.  Default method "ensemble": equilibrium
  fluctuation covariance of a mean-field collision ensemble (pair jumps at
  the hard-sphere kernel rate), unbiased up to O(1/N) in the ensemble size.
  Method "tree": the backward collision-tree estimator (exact-intensity
  creations by thinning, signed weight 2*stilde per creation, exponential
  survival compensation, truncation at depth n_max); unbiased, but its
  variance grows exponentially in nu*t, so it is only usable for t times
  typical nu up to about 1.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import i0e, i1e

from .geometry import scatter

SPHERE_AREA = {2: 2.0 * math.pi, 3: 4.0 * math.pi}
ANGULAR_FACTOR = {2: 2.0, 3: math.pi}   # int_{S^{d-1}} (w.eta)_+ deta = c_d |w|


def mean_relative_speed(speed, d=3):
    """E |v - vbar| over vbar ~ M for |v| = speed (noncentral chi mean)."""
    s = float(speed)
    if d == 3:
        if s < 1e-8:
            return 2.0 * math.sqrt(2.0 / math.pi)
        return (math.sqrt(2.0 / math.pi) * math.exp(-0.5 * s * s)
                + (s + 1.0 / s) * math.erf(s / math.sqrt(2.0)))
    if d == 2:
        x = 0.25 * s * s
        return math.sqrt(math.pi / 2.0) * ((1.0 + 2.0 * x) * i0e(x) + 2.0 * x * i1e(x))
    raise ValueError("d must be 2 or 3")


def collision_rate(v, d=None):
    """nu(v): total creation/jump intensity of the hard-sphere kernel at v."""
    v = np.asarray(v, dtype=float)
    if d is None:
        d = v.shape[-1]
    s = math.sqrt(float(np.sum(v * v)))
    return ANGULAR_FACTOR[d] * mean_relative_speed(s, d)


def collision_rate_mc(v, n_samples=1_000_000, seed=0):
    """Independent Monte Carlo quadrature of nu(v) (test oracle)."""
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    rng = np.random.default_rng(seed)
    vbar = rng.standard_normal((n_samples, d))
    eta = rng.standard_normal((n_samples, d))
    eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    w = np.maximum(np.sum((v - vbar) * eta, axis=1), 0.0)
    return float(w.mean()) * SPHERE_AREA[d]


def _sample_eta_kernel(rng, w, d):
    """eta distributed prop. to (w.eta)_+ on the sphere."""
    nw = math.sqrt(float(np.dot(w, w)))
    what = w / nw if nw > 0 else np.eye(d)[0]
    if d == 3:
        c = math.sqrt(rng.random())
        phi = 2.0 * math.pi * rng.random()
        s = math.sqrt(max(0.0, 1.0 - c * c))
        # frame around what
        a = np.array([1.0, 0.0, 0.0]) if abs(what[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(what, a)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(what, e1)
        return c * what + s * (math.cos(phi) * e1 + math.sin(phi) * e2)
    sin_t = 2.0 * rng.random() - 1.0
    cos_t = math.sqrt(1.0 - sin_t * sin_t)
    perp = np.array([-what[1], what[0]])
    return cos_t * what + sin_t * perp


def _sample_vbar_kernel(rng, v, d):
    """vbar distributed prop. to |v - vbar| M(vbar) (rejection, no weights)."""
    s = math.sqrt(float(np.dot(v, v)))
    c0 = 2.0 * math.sqrt(2.0 / math.pi) if d == 3 else math.sqrt(math.pi / 2.0)
    # proposal density prop. to (|v| + |vbar|) M(vbar), acceptance
    # |v - vbar| / (|v| + |vbar|) <= 1
    while True:
        if rng.random() < s / (s + c0):
            vbar = rng.standard_normal(d)
        else:
            # speed size-biased Maxwellian: norm of a (d+1)-dim standard normal
            r = math.sqrt(float(np.sum(rng.standard_normal(d + 1) ** 2)))
            u = rng.standard_normal(d)
            vbar = r * u / np.linalg.norm(u)
        dv = v - vbar
        ndv = math.sqrt(float(np.dot(dv, dv)))
        if rng.random() * (s + math.sqrt(float(np.dot(vbar, vbar)))) < ndv:
            return vbar


def apply_L(g, v, n_samples=200_000, seed=0, method="mc", grid=None):
    """Quadrature evaluation of (L g)(v) for a velocity callable g.

    method "mc": fixed-seed Monte Carlo over (v*, eta).  method "grid":
    Gauss-Hermite nodes for v* crossed with a deterministic sphere rule
    (independent error profile, used as the cross-check oracle).
    """
    v = np.asarray(v, dtype=float)
    d = v.shape[-1]
    if method == "mc":
        rng = np.random.default_rng(seed)
        vstar = rng.standard_normal((n_samples, d))
        eta = rng.standard_normal((n_samples, d))
        eta /= np.linalg.norm(eta, axis=1, keepdims=True)
    elif method == "grid":
        vg = grid if grid is not None else VelocityGrid.gauss_hermite(d, 20)
        eta1 = _sphere_rule(d, 240)
        nn = vg.nodes.shape[0]
        vstar = np.repeat(vg.nodes, eta1.shape[0], axis=0)
        eta = np.tile(eta1, (nn, 1))
        wts = np.repeat(vg.weights, eta1.shape[0]) / eta1.shape[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    kern = np.maximum(np.sum((v - vstar) * eta, axis=1), 0.0) * SPHERE_AREA[d]
    proj = np.sum(eta * (v - vstar), axis=1)
    vp = v - proj[:, None] * eta
    vsp = vstar + proj[:, None] * eta
    diff = g(vp) + g(vsp) - g(v[None, :]) - g(vstar)
    if method == "mc":
        return float(np.mean(kern * diff))
    return float(np.sum(wts * kern * diff))


def _sphere_rule(d, n):
    """Deterministic near-uniform sphere nodes (Fibonacci / equi-angle)."""
    if d == 3:
        k = np.arange(n) + 0.5
        phi = math.pi * (1.0 + math.sqrt(5.0)) * k
        z = 1.0 - 2.0 * k / n
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    th = 2.0 * math.pi * (np.arange(n) + 0.5) / n
    return np.column_stack([np.cos(th), np.sin(th)])


# ---------------------------------------------------------------------------
# velocity grid and Hermite-Galerkin representation of L


@dataclass
class VelocityGrid:
    """Quadrature nodes/weights for expectations against M(v) dv."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_hermite(cls, d, n_per_axis=24):
        x, w = np.polynomial.hermite.hermgauss(n_per_axis)
        x = x * math.sqrt(2.0)          # physicists' -> standard normal
        w = w / math.sqrt(math.pi)
        grids = np.meshgrid(*([x] * d), indexing="ij")
        nodes = np.column_stack([g.ravel() for g in grids])
        wts = np.ones(nodes.shape[0])
        for wm in np.meshgrid(*([w] * d), indexing="ij"):
            wts = wts * wm.ravel()
        return cls(nodes=nodes, weights=wts)

    def expect(self, f):
        return float(np.sum(self.weights * f(self.nodes)))


def _hermite_table(x, deg):
    """Normalized probabilists' Hermite values, shape (len(x), deg + 1)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (deg + 1,))
    out[..., 0] = 1.0
    if deg >= 1:
        out[..., 1] = x
    for k in range(1, deg):
        out[..., k + 1] = x * out[..., k] - k * out[..., k - 1]
    for k in range(deg + 1):
        out[..., k] /= math.sqrt(math.factorial(k))
    return out


class HermiteBasis:
    """Orthonormal polynomial basis of L^2(M dv) up to a total degree.

    The degree-2 isotropic direction is rotated onto a single basis vector
    so that mass, momentum and energy are each spanned by one basis
    function; the collision-operator columns of those functions then vanish
    identically sample by sample.
    """

    def __init__(self, d, degree=6):
        self.d = d
        self.degree = degree
        self.indices = [idx for idx in _multi_indices(d, degree)]
        self.size = len(self.indices)
        self._index_pos = {idx: k for k, idx in enumerate(self.indices)}
        self.rotation = self._energy_rotation()
        inv = [tuple([0] * d)]
        for axis in range(d):
            e = [0] * d
            e[axis] = 1
            inv.append(tuple(e))
        self.invariant_cols = [self._index_pos[i] for i in inv]
        e2 = [0] * d
        e2[0] = 2
        self.invariant_cols.append(self._index_pos[tuple(e2)])

    def _energy_rotation(self):
        d, pos = self.d, self._index_pos
        q = np.eye(self.size)
        cols = []
        for axis in range(d):
            idx = [0] * d
            idx[axis] = 2
            cols.append(pos[tuple(idx)])
        u = np.zeros(self.size)
        for c in cols:
            u[c] = 1.0 / math.sqrt(d)
        # Householder mapping e_<cols[0]> onto u inside the span of cols
        e0 = np.zeros(self.size)
        e0[cols[0]] = 1.0
        w = u - e0
        nw = np.linalg.norm(w)
        if nw > 1e-14:
            w /= nw
            q = q - 2.0 * np.outer(w, w)
        return q

    def evaluate(self, v):
        """Basis values at velocities v, shape (batch, size)."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        deg = self.degree
        tables = [_hermite_table(v[:, axis], deg) for axis in range(self.d)]
        out = np.empty((v.shape[0], self.size))
        for k, idx in enumerate(self.indices):
            col = tables[0][:, idx[0]]
            for axis in range(1, self.d):
                col = col * tables[axis][:, idx[axis]]
            out[:, k] = col
        return out @ self.rotation

    def coefficients(self, g, grid=None):
        """Expansion coefficients of a velocity callable (GH quadrature)."""
        grid = grid or VelocityGrid.gauss_hermite(self.d, max(16, self.degree + 4))
        vals = np.asarray(g(grid.nodes), dtype=float).reshape(-1)
        return (self.evaluate(grid.nodes) * grid.weights[:, None]).T @ vals


def _multi_indices(d, degree):
    if d == 1:
        for k in range(degree + 1):
            yield (k,)
        return
    for k in range(degree + 1):
        for rest in _multi_indices(d - 1, degree - k):
            yield (k,) + rest


_matrix_cache = {}


def galerkin_matrix(d=3, degree=6, n_samples=2_000_000, seed=12345):
    """Matrix of L in the Hermite basis, fixed-seed MC assembly (cached).

    Symmetrized (L is self-adjoint) and with the exactly conserved
    directions (mass, momentum, energy) zeroed row and column.
    """
    key = (d, degree, n_samples, seed)
    if key in _matrix_cache:
        return _matrix_cache[key]
    basis = HermiteBasis(d, degree)
    B = basis.size
    rng = np.random.default_rng(seed)
    mat = np.zeros((B, B))
    chunk = 100_000
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        v = rng.standard_normal((m, d))
        vs = rng.standard_normal((m, d))
        eta = rng.standard_normal((m, d))
        eta /= np.linalg.norm(eta, axis=1, keepdims=True)
        kern = np.maximum(np.sum((v - vs) * eta, axis=1), 0.0) * SPHERE_AREA[d]
        proj = np.sum(eta * (v - vs), axis=1)
        vp = v - proj[:, None] * eta
        vsp = vs + proj[:, None] * eta
        phi_v = basis.evaluate(v)
        delta = (basis.evaluate(vp) + basis.evaluate(vsp)
                 - phi_v - basis.evaluate(vs))
        mat += phi_v.T @ (delta * kern[:, None])
        done += m
    mat /= n_samples
    mat = 0.5 * (mat + mat.T)
    for c in basis.invariant_cols:
        mat[c, :] = 0.0
        mat[:, c] = 0.0
    result = (basis, mat)
    _matrix_cache[key] = result
    return result


class SeriesTruncationError(RuntimeError):
    pass


@dataclass
class OracleResult:
    value: float
    tail_bound: float
    k_terms: int

    def __float__(self):
        return self.value


def _series_terms_needed(a, tol):
    """Minimal K with a^(K+1)/(K+1)! / (1 - a/(K+2)) < tol."""
    k = 0
    term = 1.0
    while k < 10_000:
        term_next = term * a / (k + 1)     # a^(k+1)/(k+1)!
        if a / (k + 2) < 1.0 and term_next / (1.0 - a / (k + 2)) < tol:
            return k
        term = term_next
        k += 1
    raise SeriesTruncationError("series does not reach tolerance")


def duhamel_series_oracle(h, g, t, k_terms=None, tol=1e-6, d=3, degree=6,
                          n_samples=2_000_000, seed=12345):
    """<h, e^{tL} g> for velocity-only h, g by truncated exponential series.

    Reports the factorial tail bound; raises SeriesTruncationError naming
    the required depth when k_terms is given but insufficient.
    """
    basis, mat = galerkin_matrix(d, degree, n_samples, seed)
    norm_l = float(np.linalg.norm(mat, 2))
    a = norm_l * t
    k_needed = _series_terms_needed(a, max(tol, 1e-15))
    if k_terms is None:
        k_terms = k_needed
    c_g = basis.coefficients(g)
    c_h = basis.coefficients(h)
    scale = float(np.linalg.norm(c_g)) * float(np.linalg.norm(c_h))
    term = c_g.copy()
    acc = c_g.copy()
    for k in range(1, k_terms + 1):
        term = (t / k) * (mat @ term)
        acc += term
    tail_term = a ** (k_terms + 1) / math.factorial(k_terms + 1) if k_terms < 170 \
        else 0.0
    denom = 1.0 - a / (k_terms + 2)
    tail = scale * (tail_term / denom if denom > 0 else math.inf)
    if tail > tol * max(1.0, scale):
        raise SeriesTruncationError(
            f"tail bound {tail:.3g} above tolerance; need k_terms >= {k_needed}")
    return OracleResult(value=float(c_h @ acc), tail_bound=tail, k_terms=k_terms)


def fourier_mode_solver(h, g, k_vec, t, with_collisions=True, d=3, degree=6,
                        n_per_axis=24, n_samples=2_000_000, seed=12345,
                        tol=1e-9):
    """Re <h-mode, e^{t(-v.grad_x + L)} g-mode> for a single wave vector.

    Data g(x,v) = exp(2 pi i k.x) g(v), likewise h; the transport multiplier
    is diagonal on the velocity nodes (exact), the collision operator acts
    through its Galerkin projection.  Evaluated by a substepped truncated
    exponential series.
    """
    k_vec = np.asarray(k_vec, dtype=float)
    grid = VelocityGrid.gauss_hermite(d, n_per_axis)
    basis, mat = galerkin_matrix(d, degree, n_samples, seed)
    phi_nodes = basis.evaluate(grid.nodes)              # (N, B)
    proj = (phi_nodes * grid.weights[:, None]).T        # (B, N) node -> coeff
    kv = -2.0j * math.pi * (grid.nodes @ k_vec)

    def apply_a(psi):
        out = kv * psi
        if with_collisions:
            out = out + phi_nodes @ (mat @ (proj @ psi))
        return out

    psi = np.asarray(g(grid.nodes), dtype=complex).reshape(-1)
    norm_a = float(np.max(np.abs(kv))) + (float(np.linalg.norm(mat, 2))
                                          if with_collisions else 0.0)
    n_sub = max(1, int(math.ceil(norm_a * t / 2.0)))
    tau = t / n_sub
    for _ in range(n_sub):
        term = psi.copy()
        acc = psi.copy()
        k = 0
        base = float(np.linalg.norm(psi)) + 1e-300
        while float(np.linalg.norm(term)) >= tol * base:
            k += 1
            if k > 300:
                raise SeriesTruncationError(
                    f"mode series not below tolerance within 300 terms; "
                    f"need more than {n_sub} substeps for |A| t = {norm_a * t:.3g}")
            term = (tau / k) * apply_a(term)
            acc = acc + term
        psi = acc
    h_nodes = np.asarray(h(grid.nodes), dtype=complex).reshape(-1)
    val = np.sum(grid.weights * np.conj(h_nodes) * psi)
    return float(np.real(val))


def inner_product(h, g, d=3, n_per_axis=24):
    """<h, g> in L^2(M dv) by Gauss-Hermite quadrature."""
    grid = VelocityGrid.gauss_hermite(d, n_per_axis)
    return float(np.sum(grid.weights * np.asarray(h(grid.nodes)).reshape(-1)
                        * np.asarray(g(grid.nodes)).reshape(-1)))


# ---------------------------------------------------------------------------
# Monte Carlo semigroup estimators


@dataclass
class SemigroupEstimate:
    value: float
    stderr: float
    samples: int
    n_max: int
    bias_bound: float
    seed: Optional[int] = None
    method: str = "ensemble"

    def to_json(self):
        import json
        return json.dumps({"value": self.value, "stderr": self.stderr,
                           "samples": self.samples, "n_max": self.n_max,
                           "bias_bound": self.bias_bound, "seed": self.seed})


def _kac_replica(rng, g_fns, h_fns, t_list, n_particles, d, g_means, h_means):
    """One mean-field collision ensemble path; returns zeta products.

    Pair (i, j) jumps at rate c_d |v_i - v_j| / N with the hard-sphere
    angular kernel; candidate events are drawn from the majorant c_d B / N
    per pair and thinned, which realizes the intensity exactly.  The event
    loop runs on scalar floats with block-drawn randoms for speed.
    """
    n = n_particles
    v = rng.standard_normal((n, d))
    cd = ANGULAR_FACTOR[d]
    sqn = math.sqrt(n)
    zeta0_g = [sqn * (float(np.mean(fn(v))) - mu) for fn, mu in zip(g_fns, g_means)]
    zeta0_h = [sqn * (float(np.mean(fn(v))) - mu) for fn, mu in zip(h_fns, h_means)]
    out = []
    t_now = 0.0
    vmax = float(np.linalg.norm(v, axis=1).max())
    vflat = v.reshape(-1)
    block = max(256, n)
    buf_e = rng.exponential(size=block)
    buf_u = rng.random(size=3 * block)
    buf_i = rng.integers(0, n, size=block)
    buf_j = rng.integers(0, n - 1, size=block)
    ptr = block  # forces refill on first use
    pu = 3 * block

    def refill():
        nonlocal buf_e, buf_u, buf_i, buf_j, ptr, pu
        buf_e = rng.exponential(size=block)
        buf_i = rng.integers(0, n, size=block)
        buf_j = rng.integers(0, n - 1, size=block)
        buf_u = rng.random(size=3 * block)
        ptr = 0
        pu = 0

    for t_target in t_list:
        while True:
            if ptr >= block or pu + 3 > 3 * block:
                refill()
            bound = 2.0 * vmax * 1.0000001
            rate = cd * bound * (n - 1) / 2.0
            dt = buf_e[ptr] / rate
            if t_now + dt > t_target:
                # leftover exponential is memoryless; reuse scaled remainder
                buf_e[ptr] -= (t_target - t_now) * rate
                t_now = t_target
                break
            t_now += dt
            i = int(buf_i[ptr])
            j = int(buf_j[ptr])
            ptr += 1
            if j >= i:
                j += 1
            oi, oj = i * d, j * d
            if d == 3:
                dx = vflat[oi] - vflat[oj]
                dy = vflat[oi + 1] - vflat[oj + 1]
                dz = vflat[oi + 2] - vflat[oj + 2]
                ndv = math.sqrt(dx * dx + dy * dy + dz * dz)
            else:
                dx = vflat[oi] - vflat[oj]
                dy = vflat[oi + 1] - vflat[oj + 1]
                dz = 0.0
                ndv = math.sqrt(dx * dx + dy * dy)
            if buf_u[pu] * bound >= ndv or ndv == 0.0:
                pu += 3
                continue
            if d == 3:
                c = math.sqrt(buf_u[pu + 1])
                phi = 2.0 * math.pi * buf_u[pu + 2]
                s = math.sqrt(1.0 - c * c)
                # orthonormal frame around the relative velocity
                wx, wy, wz = dx / ndv, dy / ndv, dz / ndv
                if abs(wx) < 0.9:
                    e1x, e1y, e1z = 0.0, -wz, wy
                else:
                    e1x, e1y, e1z = -wz, 0.0, wx
                e1n = math.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
                e1x, e1y, e1z = e1x / e1n, e1y / e1n, e1z / e1n
                e2x = wy * e1z - wz * e1y
                e2y = wz * e1x - wx * e1z
                e2z = wx * e1y - wy * e1x
                cp, sp = math.cos(phi), math.sin(phi)
                ex = c * wx + s * (cp * e1x + sp * e2x)
                ey = c * wy + s * (cp * e1y + sp * e2y)
                ez = c * wz + s * (cp * e1z + sp * e2z)
                proj = ex * dx + ey * dy + ez * dz
                vix = vflat[oi] - proj * ex
                viy = vflat[oi + 1] - proj * ey
                viz = vflat[oi + 2] - proj * ez
                vjx = vflat[oj] + proj * ex
                vjy = vflat[oj + 1] + proj * ey
                vjz = vflat[oj + 2] + proj * ez
                vflat[oi], vflat[oi + 1], vflat[oi + 2] = vix, viy, viz
                vflat[oj], vflat[oj + 1], vflat[oj + 2] = vjx, vjy, vjz
                si = math.sqrt(vix * vix + viy * viy + viz * viz)
                sj = math.sqrt(vjx * vjx + vjy * vjy + vjz * vjz)
            else:
                sin_t = 2.0 * buf_u[pu + 1] - 1.0
                cos_t = math.sqrt(1.0 - sin_t * sin_t)
                wx, wy = dx / ndv, dy / ndv
                ex = cos_t * wx - sin_t * wy
                ey = cos_t * wy + sin_t * wx
                proj = ex * dx + ey * dy
                vix = vflat[oi] - proj * ex
                viy = vflat[oi + 1] - proj * ey
                vjx = vflat[oj] + proj * ex
                vjy = vflat[oj + 1] + proj * ey
                vflat[oi], vflat[oi + 1] = vix, viy
                vflat[oj], vflat[oj + 1] = vjx, vjy
                si = math.sqrt(vix * vix + viy * viy)
                sj = math.sqrt(vjx * vjx + vjy * vjy)
            pu += 3
            if si > vmax:
                vmax = si
            if sj > vmax:
                vmax = sj
        zt_h = [sqn * (float(np.mean(fn(v))) - mu) for fn, mu in zip(h_fns, h_means)]
        zt_g = [sqn * (float(np.mean(fn(v))) - mu) for fn, mu in zip(g_fns, g_means)]
        out.append((zt_h, zt_g))
    return zeta0_g, zeta0_h, out


def ensemble_covariance_matrix(h_list, g_list, t_list, samples=2000,
                               n_particles=1024, d=3, seed=0, symmetrize=True):
    """Equilibrium covariances <h_a, e^{tL} g_b> for all pairs, shared paths.

    Returns a dict {(a, b, k): SemigroupEstimate} over indices into h_list,
    g_list and t_list.  One collision-ensemble path per replica serves every
    pair, so cross-pair estimates are correlated but individually unbiased
    up to the O(1/N) ensemble bias reported in bias_bound.
    """
    grid = VelocityGrid.gauss_hermite(d, 24)
    g_means = [grid.expect(g) for g in g_list]
    h_means = [grid.expect(h) for h in h_list]
    nh, ng, nt = len(h_list), len(g_list), len(t_list)
    prods = np.zeros((samples, nh, ng, nt))
    for r in range(samples):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        z0g, z0h, snaps = _kac_replica(rng, list(g_list), list(h_list),
                                       list(t_list), n_particles, d,
                                       g_means, h_means)
        for k, (zth, ztg) in enumerate(snaps):
            for a in range(nh):
                for b in range(ng):
                    p = zth[a] * z0g[b]
                    if symmetrize:
                        p = 0.5 * (p + ztg[b] * z0h[a])
                    prods[r, a, b, k] = p
    nu_typ = ANGULAR_FACTOR[d] * mean_relative_speed(0.0, d) * 2.0
    out = {}
    for a in range(nh):
        for b in range(ng):
            for k, t in enumerate(t_list):
                col = prods[:, a, b, k]
                out[(a, b, k)] = SemigroupEstimate(
                    value=float(col.mean()),
                    stderr=float(col.std(ddof=1) / math.sqrt(samples)),
                    samples=samples, n_max=n_particles,
                    bias_bound=nu_typ * t / n_particles, seed=seed,
                    method="ensemble")
    return out


def ensemble_covariance(h, g, t_list, samples=2000, n_particles=1024, d=3,
                        seed=0, symmetrize=True):
    """Equilibrium covariance <h, e^{tL} g> per t, by replica averaging.

    Returns a list of SemigroupEstimate.  The estimator per replica is the
    symmetrized product zeta_t(h) zeta_0(g); finite-ensemble bias is O(1/N)
    and reported through bias_bound.
    """
    mat = ensemble_covariance_matrix([h], [g], list(t_list), samples=samples,
                                     n_particles=n_particles, d=d, seed=seed,
                                     symmetrize=symmetrize)
    return [mat[(0, 0, k)] for k in range(len(t_list))]


def _tree_sample(rng, h, g, t, n_max, d, force_deflection=None,
                 score_root_only=False):
    """One backward-tree draw; returns the weighted score.

    Creations occur at the exact kernel intensity (thinned proposals); the
    weight carries 2*stilde per creation and the exponential survival
    compensation exp(int sum_a nu(v_a)), so the estimator is unbiased for
    the series truncated at n_max particles.
    """
    v1 = rng.standard_normal(d)
    vs = [v1.copy()]
    weight = 1.0
    compensate = force_deflection is None
    tau = 0.0
    while True:
        rates = [collision_rate(vv, d) for vv in vs]
        r_tot = sum(rates) if len(vs) < n_max else 0.0
        if r_tot <= 0.0:
            break
        dt = rng.exponential(1.0 / r_tot)
        if tau + dt >= t:
            if compensate:
                weight *= math.exp(r_tot * (t - tau))
            tau = t
            break
        if compensate:
            weight *= math.exp(r_tot * dt)
        tau += dt
        a = rng.choice(len(vs), p=np.asarray(rates) / r_tot)
        vbar = _sample_vbar_kernel(rng, vs[a], d)
        eta = _sample_eta_kernel(rng, vs[a] - vbar, d)
        if force_deflection is None:
            stilde = 1 if rng.random() < 0.5 else -1
            weight *= 2.0 * stilde
        else:
            stilde = force_deflection
        vs.append(vbar)
        if stilde == 1:
            va, vb = scatter(vs[a], vs[-1], eta)
            vs[a], vs[-1] = va, vb
    varr = np.array(vs)
    if score_root_only:
        g_sum = float(np.asarray(g(varr[:1])).reshape(-1)[0])
    else:
        g_sum = float(np.sum(np.asarray(g(varr)).reshape(-1)))
    h_val = float(np.asarray(h(v1[None, :])).reshape(-1)[0])
    return h_val * g_sum * weight, len(vs)


def tree_covariance(h, g, t, samples=100_000, n_max=12, d=3, seed=0,
                    force_deflection=None, score_root_only=False):
    """Backward collision-tree estimator of <h, e^{tL} g> (velocity-only)."""
    rng = np.random.default_rng(seed)
    vals = np.empty(samples)
    sizes = np.empty(samples)
    for k in range(samples):
        vals[k], sizes[k] = _tree_sample(rng, h, g, t, n_max, d,
                                         force_deflection=force_deflection,
                                         score_root_only=score_root_only)
    if not np.all(np.isfinite(vals)):
        raise RuntimeError("nonfinite tree weights encountered")
    c_meas = max(float(sizes.mean()) - 1.0, 1e-12) / max(t, 1e-12)
    bias = (c_meas * t) ** n_max / math.factorial(n_max)
    return SemigroupEstimate(
        value=float(vals.mean()),
        stderr=float(vals.std(ddof=1) / math.sqrt(samples)),
        samples=samples, n_max=n_max, bias_bound=bias, seed=seed,
        method="tree")


def linear_jump_expectation(g, t, samples=100_000, d=3, seed=0):
    """E[g(V_t)] for the linear Boltzmann jump process started from M.

    Direct simulation: jumps at rate nu(v), velocity update by hard-sphere
    scattering against a kernel-weighted Maxwellian partner.  Used to
    cross-check the tree sampler with deflections forced on.
    """
    rng = np.random.default_rng(seed)
    vals = np.empty(samples)
    for k in range(samples):
        v = rng.standard_normal(d)
        tau = 0.0
        while True:
            rate = collision_rate(v, d)
            dt = rng.exponential(1.0 / rate)
            if tau + dt >= t:
                break
            tau += dt
            vbar = _sample_vbar_kernel(rng, v, d)
            eta = _sample_eta_kernel(rng, v - vbar, d)
            v = v - float(np.dot(eta, v - vbar)) * eta
        vals[k] = float(np.asarray(g(v[None, :])).reshape(-1)[0])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


def semigroup_mc(h, g, t, n_max=12, samples=2000, seed=0, method="ensemble",
                 d=3, n_particles=1024):
    """<h, e^{t(-v.grad_x + L)} g> by Monte Carlo, velocity-only data.

    method "ensemble" (default): equilibrium collision-ensemble covariance,
    n_particles controls the O(1/N) bias.  method "tree": backward
    collision-tree estimator with truncation depth n_max; only effective
    for small nu*t (variance grows exponently with the tree activity).
    """
    if method == "ensemble":
        return ensemble_covariance(h, g, [t], samples=samples,
                                   n_particles=n_particles, d=d, seed=seed)[0]
    if method == "tree":
        return tree_covariance(h, g, t, samples=samples, n_max=n_max, d=d,
                               seed=seed)
    raise ValueError(f"unknown method {method!r}")
