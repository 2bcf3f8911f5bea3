"""Pseudotrajectories, their development functional, and backward trees.

A forward pseudotrajectory runs hard-sphere dynamics in which each contact,
while annihilations are pending, consults history parameters: the sign s of
the current annihilation slot selects a target particle (s=+1 the smaller
index, s=-1 the larger); a positive recollision budget kappa on the target
scatters the pair and decrements, a zero budget removes the target (the
survivor is deflected iff sbar=+1).  Once all annihilations are done the
remaining particles follow the plain flow.

A run is accepted when the survivors are exactly the designated root set
and every budget has been consumed.  The development functional sums
(prod sbar) * h(survivor state) over all parameter assignments; it is
evaluated here by a depth-first search over contact decisions, which
enumerates exactly one representative per reachable parameter class (each
decision path pins a unique budget vector).

Backward pseudocharacteristics grow a particle set from a single root at
time t by inserting fresh particles at contact distance; creations carry a
deflection flag.  The admissible impact hemisphere depends on that flag:
an undeflected creation needs (v_parent - vbar) . eta > 0, a deflected one
the reverse, which is the orientation that makes the creation the exact
preimage of a genuine forward collision (and the change of variables onto
the Gibbs measure weight-preserving).
"""

import itertools
import json
import math
from dataclasses import dataclass
from typing import List

import numpy as np

from .geometry import (maxwellian_density, maxwellian_sample,
                       pair_contact_time_torus, scatter, wrap)
from .gibbs import Configuration

MAX_PSEUDO_EVENTS = 10000


class PseudoError(RuntimeError):
    pass


@dataclass
class PseudoParams:
    """History parameters: signs (n-m, 2) with entries +-1, budgets (n,)."""

    signs: np.ndarray
    budgets: np.ndarray

    def __post_init__(self):
        self.signs = np.asarray(self.signs, dtype=int).reshape(-1, 2)
        self.budgets = np.asarray(self.budgets, dtype=int).reshape(-1)
        if self.signs.size and not np.all(np.abs(self.signs) == 1):
            raise ValueError("signs must be +-1")
        if np.any(self.budgets < 0):
            raise ValueError("budgets must be nonnegative")


@dataclass
class PseudoTrace:
    events: List[dict]
    final: Configuration
    alive: List[int]
    budgets_left: np.ndarray
    iota: int
    sign_product: int
    accepted: bool

    def graph_edges(self):
        return [(min(e["i"], e["j"]), max(e["i"], e["j"]), e["time"])
                for e in self.events]

    def total_recollisions(self):
        return sum(1 for e in self.events if e["kind"] == "recollision")


def _next_contact(x, v, alive, eps, t_now, t_end):
    """Earliest contact among alive particles in (t_now, t_end]."""
    best = None
    for a, b in itertools.combinations(alive, 2):
        hit = pair_contact_time_torus(x[a] - x[b], v[a] - v[b], eps, t_end - t_now)
        if hit is None:
            continue
        tau, eta_ab = hit
        if best is None or tau < best[0]:
            best = (tau, a, b, eta_ab)
    if best is None:
        return None
    tau, a, b, eta_ab = best
    # eta_ab points from the smaller toward the larger index
    return t_now + tau, a, b, eta_ab


def run_pseudo(config, params, t, epsilon, m):
    """Simulate one pseudotrajectory with explicit history parameters.

    Returns a PseudoTrace; `accepted` holds iff the survivors are exactly
    the first m particles and all recollision budgets were consumed.
    """
    n = config.n
    if params.signs.shape[0] != n - m or params.budgets.shape[0] != n:
        raise ValueError("parameter lengths inconsistent with (n, m)")
    x = np.array(config.x, dtype=float)
    v = np.array(config.v, dtype=float)
    alive = list(range(n))
    kappa = params.budgets.copy()
    iota = 1
    sign_product = 1
    t_now = 0.0
    events = []
    while True:
        if len(events) > MAX_PSEUDO_EVENTS:
            raise PseudoError(f"exceeded {MAX_PSEUDO_EVENTS} pseudotrajectory events")
        nxt = _next_contact(x, v, alive, epsilon, t_now, t)
        if nxt is None:
            break
        t_hit, q, qp, eta = nxt
        x[alive] = wrap(x[alive] + v[alive] * (t_hit - t_now))
        t_now = t_hit
        if iota >= n - m + 1:
            v[q], v[qp] = scatter(v[q], v[qp], eta)
            events.append(dict(time=t_hit, i=q, j=qp, kind="hamiltonian",
                               target=None, scattered=True))
            continue
        s, sbar = int(params.signs[iota - 1, 0]), int(params.signs[iota - 1, 1])
        target = q if s == 1 else qp
        if kappa[target] > 0:
            kappa[target] -= 1
            v[q], v[qp] = scatter(v[q], v[qp], eta)
            events.append(dict(time=t_hit, i=q, j=qp, kind="recollision",
                               target=target, scattered=True))
        else:
            if sbar == 1:
                v[q], v[qp] = scatter(v[q], v[qp], eta)
            alive.remove(target)
            sign_product *= sbar
            iota += 1
            events.append(dict(time=t_hit, i=q, j=qp, kind="annihilation",
                               target=target, scattered=(sbar == 1)))
    x[alive] = wrap(x[alive] + v[alive] * (t - t_now))
    accepted = (alive == list(range(m))) and bool(np.all(kappa == 0))
    final = Configuration(x=x[alive], v=v[alive])
    return PseudoTrace(events=events, final=final, alive=alive,
                       budgets_left=kappa, iota=iota,
                       sign_product=sign_product, accepted=accepted)


# ---------------------------------------------------------------------------
# development functional


def develop_phi(h, m, n, config, t, epsilon, kappa_cap=3):
    """Pseudotrajectory development Phi^t_{m<-n}[h] at one configuration.

    Sums (1/(n-m)!) sum over history parameters of (prod sbar) 1_accept
    h(survivor state at t), with budgets capped at kappa_cap per particle.
    h is called as h(x_m, v_m) on the ordered root state.  Evaluated by a
    DFS over contact decisions; each accepted decision path corresponds to
    exactly one admissible parameter assignment.
    """
    if n - m > 4:
        raise ValueError("annihilation count n - m capped at 4 (exhaustive sum)")
    if kappa_cap > 3:
        raise ValueError("kappa_cap capped at 3 (exhaustive sum)")
    if config.n != n:
        raise ValueError("configuration size must equal n")
    roots = list(range(m))
    total = 0.0
    counter = {"nodes": 0}

    def recurse(x, v, alive, consumed, iota, s_cur, sign_prod, t_now):
        nonlocal total
        counter["nodes"] += 1
        if counter["nodes"] > 2_000_000:
            raise PseudoError("develop_phi decision tree too large")
        nxt = _next_contact(x, v, alive, epsilon, t_now, t)
        if nxt is None:
            if alive == roots and iota == n - m + 1:
                xf = wrap(x[roots] + v[roots] * (t - t_now))
                total += sign_prod * float(h(xf, v[roots]))
            return
        t_hit, q, qp, eta = nxt
        x2 = x.copy()
        x2[alive] = wrap(x2[alive] + v[alive] * (t_hit - t_now))
        if iota >= n - m + 1:
            v2 = v.copy()
            v2[q], v2[qp] = scatter(v2[q], v2[qp], eta)
            recurse(x2, v2, alive, consumed, iota, s_cur, sign_prod, t_hit)
            return
        s_choices = (s_cur,) if s_cur is not None else (1, -1)
        for s in s_choices:
            target = q if s == 1 else qp
            # recollision branch: consume one unit of the target's budget
            if consumed[target] < kappa_cap:
                v2 = v.copy()
                v2[q], v2[qp] = scatter(v2[q], v2[qp], eta)
                c2 = consumed.copy()
                c2[target] += 1
                recurse(x2, v2, alive, c2, iota, s, sign_prod, t_hit)
            # annihilation branch: budget pinned to its consumption so far
            for sbar in (1, -1):
                v2 = v.copy()
                if sbar == 1:
                    v2[q], v2[qp] = scatter(v2[q], v2[qp], eta)
                alive2 = [a for a in alive if a != target]
                recurse(x2, v2, alive2, consumed, iota + 1, None,
                        sign_prod * sbar, t_hit)

    x0 = np.array(config.x, dtype=float)
    v0 = np.array(config.v, dtype=float)
    recurse(x0, v0, list(range(n)), np.zeros(n, dtype=int), 1, None, 1, 0.0)
    return total / math.factorial(n - m)


def develop_phi_bruteforce(h, m, n, config, t, epsilon, kappa_cap=3):
    """Reference evaluation by explicit enumeration of all parameters."""
    total = 0.0
    sign_tuples = list(itertools.product((1, -1), repeat=2 * (n - m)))
    budget_tuples = list(itertools.product(range(kappa_cap + 1), repeat=n))
    for st in sign_tuples:
        signs = np.array(st, dtype=int).reshape(n - m, 2)
        for bt in budget_tuples:
            params = PseudoParams(signs=signs, budgets=np.array(bt))
            trace = run_pseudo(config, params, t, epsilon, m)
            if trace.accepted:
                xf, vf = trace.final.x, trace.final.v
                total += trace.sign_product * float(h(xf, vf))
    return total / math.factorial(n - m)


def develop_phi_families(h, m, n, config, t, epsilon, kappa_cap=3,
                         phi=develop_phi):
    """Sum of Phi^t_{m<-n}[h] over ordered families (i_{m+1},...,i_n).

    The first m particles of `config` are the fixed roots; the families run
    over orderings of n - m particles drawn from the remaining pool.
    """
    pool = list(range(m, config.n))
    total = 0.0
    for fam in itertools.permutations(pool, n - m):
        order = list(range(m)) + list(fam)
        sub = Configuration(x=config.x[order], v=config.v[order])
        total += phi(h, m, n, sub, t, epsilon, kappa_cap=kappa_cap)
    return total


def development_sum(h, m, config, t, epsilon, kappa_cap=3):
    """Right-hand side of the development identity: sum over n >= m."""
    return sum(
        develop_phi_families(h, m, n, config, t, epsilon, kappa_cap=kappa_cap)
        for n in range(m, config.n + 1))


# ---------------------------------------------------------------------------
# local-recollision indicator (asymmetric conditioning)


def chi_indicator(config, delta, epsilon, kappa_max=None):
    """True iff some history makes the configuration a connected collision
    cluster with a cycle (local recollision) within time delta.

    Exhaustive search over pseudotrajectory parameters with full
    annihilation chain (m = 1) and per-particle budgets at most kappa_max
    (default r - 1).  r is capped at 5.
    """
    r = config.n
    if r > 5:
        raise ValueError("chi enumeration capped at r <= 5 particles")
    if r < 2:
        return False
    cap = (r - 1) if kappa_max is None else kappa_max

    found = {"hit": False}

    def recurse(x, v, alive, consumed, iota, s_cur, t_now, edges):
        if found["hit"]:
            return
        # cycle + connectivity test on the collision graph so far
        if edges:
            uf = list(range(r))

            def find(a):
                while uf[a] != a:
                    uf[a] = uf[uf[a]]
                    a = uf[a]
                return a

            cyc = False
            for (a, b) in edges:
                ra, rb = find(a), find(b)
                if ra == rb:
                    cyc = True
                else:
                    uf[ra] = rb
            if cyc and len({find(k) for k in range(r)}) == 1:
                found["hit"] = True
                return
        if len(edges) > 100:
            return
        nxt = _next_contact(x, v, alive, epsilon, t_now, delta)
        if nxt is None:
            return
        t_hit, q, qp, eta = nxt
        x2 = x.copy()
        x2[alive] = wrap(x2[alive] + v[alive] * (t_hit - t_now))
        edges2 = edges + [(q, qp)]
        if iota >= r:
            v2 = v.copy()
            v2[q], v2[qp] = scatter(v2[q], v2[qp], eta)
            recurse(x2, v2, alive, consumed, iota, s_cur, t_hit, edges2)
            return
        s_choices = (s_cur,) if s_cur is not None else (1, -1)
        for s in s_choices:
            target = q if s == 1 else qp
            if consumed[target] < cap:
                v2 = v.copy()
                v2[q], v2[qp] = scatter(v2[q], v2[qp], eta)
                c2 = consumed.copy()
                c2[target] += 1
                recurse(x2, v2, alive, c2, iota, s, t_hit, edges2)
                if found["hit"]:
                    return
            for sbar in (1, -1):
                v2 = v.copy()
                if sbar == 1:
                    v2[q], v2[qp] = scatter(v2[q], v2[qp], eta)
                alive2 = [a for a in alive if a != target]
                recurse(x2, v2, alive2, consumed, iota + 1, None, t_hit, edges2)
                if found["hit"]:
                    return

    x0 = np.array(config.x, dtype=float)
    v0 = np.array(config.v, dtype=float)
    recurse(x0, v0, list(range(r)), np.zeros(r, dtype=int), 1, None, 0.0, [])
    return found["hit"]


# ---------------------------------------------------------------------------
# backward pseudocharacteristics


@dataclass
class CollisionTree:
    """Backward-characteristic parameters for creations i = 2..n (0-based 1..n-1).

    parent[i] in [0, i] indexes the particle the (i+1)-th particle is
    created next to; times are strictly decreasing in (0, t); deflect is the
    per-creation flag (+1 scatter, -1 free); vbar the fresh velocities and
    eta the unit impact directions.
    """

    parent: np.ndarray
    deflect: np.ndarray
    times: np.ndarray
    vbar: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=int).reshape(-1)
        self.deflect = np.asarray(self.deflect, dtype=int).reshape(-1)
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.vbar = np.atleast_2d(np.asarray(self.vbar, dtype=float))
        self.eta = np.atleast_2d(np.asarray(self.eta, dtype=float))

    @property
    def n_creations(self):
        return self.parent.shape[0]

    def validate(self, t):
        k = self.n_creations
        if k == 0:
            return
        if not (np.all(self.times > 0) and np.all(self.times < t)
                and np.all(np.diff(self.times) < 0)):
            raise ValueError("creation times must strictly decrease in (0, t)")
        for i in range(k):
            if not 0 <= self.parent[i] <= i:
                raise ValueError("parent index out of range")
        norms = np.linalg.norm(self.eta, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("eta rows must be unit vectors")

    def to_json(self):
        return json.dumps([
            {"parent": int(self.parent[i]), "deflect": int(self.deflect[i]),
             "time": float(self.times[i]), "vbar": list(map(float, self.vbar[i])),
             "eta": list(map(float, self.eta[i]))}
            for i in range(self.n_creations)])

    @classmethod
    def from_json(cls, text, d=3):
        recs = json.loads(text)
        if not recs:
            z = np.zeros((0, d))
            return cls(parent=np.zeros(0, dtype=int), deflect=np.zeros(0, dtype=int),
                       times=np.zeros(0), vbar=z, eta=z)
        return cls(parent=[r["parent"] for r in recs],
                   deflect=[r["deflect"] for r in recs],
                   times=[r["time"] for r in recs],
                   vbar=[r["vbar"] for r in recs],
                   eta=[r["eta"] for r in recs])


def _creation_kernel(deflect, v_parent, vbar, eta):
    """Kernel factor of a creation; positive iff the creation is admissible.

    Undeflected creations live on the hemisphere (v_parent - vbar).eta > 0,
    deflected ones on the mirrored one: the orientation under which the
    creation is the backward image of an approaching forward collision.
    """
    dot = float(np.dot(v_parent - vbar, eta))
    return dot if deflect == -1 else -dot


@dataclass
class BackwardResult:
    x0: np.ndarray            # positions at time 0, unwrapped lift
    v0: np.ndarray
    parent_velocities: List[np.ndarray]   # v_parent(t_i^+) per creation
    birth_times: np.ndarray   # per particle; root has birth time t


def backward_characteristic(z1, tree, epsilon, t, validate=True):
    """Build the backward pseudocharacteristic xi from root z1 at time t.

    Positions are returned as unwrapped lifts (reduce mod 1 for torus
    values).  epsilon = 0 yields the limiting characteristic xi^0; the
    velocity history is independent of epsilon.
    """
    x1, v1 = (np.asarray(a, dtype=float) for a in z1)
    d = x1.shape[0]
    tree.validate(t)
    k = tree.n_creations
    xs = [x1.astype(float).copy()]
    vs = [v1.astype(float).copy()]
    births = [t]
    parent_vels = []
    t_cur = t
    for i in range(k):
        ti = tree.times[i]
        for p in range(len(xs)):
            xs[p] = xs[p] - vs[p] * (t_cur - ti)
        a = int(tree.parent[i])
        eta = tree.eta[i]
        vbar = tree.vbar[i].copy()
        kern = _creation_kernel(int(tree.deflect[i]), vs[a], vbar, eta)
        if validate and kern <= 0:
            raise ValueError(f"creation {i} is not admissible")
        parent_vels.append(vs[a].copy())
        xs.append(xs[a] + epsilon * eta)
        vs.append(vbar)
        births.append(ti)
        if int(tree.deflect[i]) == 1:
            vs[a], vs[-1] = scatter(vs[a], vs[-1], eta)
        t_cur = ti
    for p in range(len(xs)):
        xs[p] = xs[p] - vs[p] * t_cur
    return BackwardResult(x0=np.array(xs), v0=np.array(vs),
                          parent_velocities=parent_vels,
                          birth_times=np.array(births))


def overlap_free(z1, tree, epsilon, t):
    """True iff xi^eps keeps all pair distances above eps except at creations."""
    if epsilon == 0.0:
        return True
    x1, v1 = (np.asarray(a, dtype=float) for a in z1)
    tree.validate(t)
    k = tree.n_creations
    xs = [np.asarray(x1, dtype=float).copy()]
    vs = [np.asarray(v1, dtype=float).copy()]
    t_cur = t
    times = list(tree.times) + [0.0]
    shrink = 1.0 - 1e-12
    for i in range(k + 1):
        t_next = times[i]
        seg = t_cur - t_next
        if seg > 0:
            for a, b in itertools.combinations(range(len(xs)), 2):
                hit = pair_contact_time_torus(xs[a] - xs[b], -(vs[a] - vs[b]),
                                              epsilon * shrink, seg)
                if hit is not None:
                    return False
            for p in range(len(xs)):
                xs[p] = xs[p] - vs[p] * seg
        t_cur = t_next
        if i < k:
            a = int(tree.parent[i])
            eta = tree.eta[i]
            kern = _creation_kernel(int(tree.deflect[i]), vs[a], tree.vbar[i], eta)
            if kern <= 0:
                raise ValueError(f"creation {i} is not admissible")
            xs.append(xs[a] + epsilon * eta)
            vs.append(tree.vbar[i].copy())
            if int(tree.deflect[i]) == 1:
                vs[a], vs[-1] = scatter(vs[a], vs[-1], eta)
    return True


def tree_weight(z1, tree, t):
    """Sampling density of a collision tree under the duality measure.

    M(v1) times, per creation, (admissible kernel)_+ M(vbar); zero whenever
    a creation sits on the wrong hemisphere for its deflection flag.
    """
    x1, v1 = (np.asarray(a, dtype=float) for a in z1)
    res = backward_characteristic((x1, v1), tree, 0.0, t, validate=False)
    w = float(maxwellian_density(v1))
    for i in range(tree.n_creations):
        kern = _creation_kernel(int(tree.deflect[i]), res.parent_velocities[i],
                                tree.vbar[i], tree.eta[i])
        if kern <= 0:
            return 0.0
        w *= kern * float(maxwellian_density(tree.vbar[i]))
    return w


def sample_admissible_tree(rng, n, t, d, v_root=None):
    """Random admissible tree with n - 1 creations, plus its root velocity.

    Times are ordered uniforms, parents uniform, fresh velocities
    Maxwellian, impact directions uniform on the admissible hemisphere of
    each creation.  Returns (tree, v_root).
    """
    if v_root is None:
        v_root = maxwellian_sample(rng, d)
    k = n - 1
    times = np.sort(rng.random(k))[::-1] * t
    parent = np.array([rng.integers(0, i + 1) for i in range(k)], dtype=int)
    deflect = rng.choice([-1, 1], size=k)
    vbar = maxwellian_sample(rng, d, n=k) if k else np.zeros((0, d))
    eta = np.zeros((k, d))
    vs = [np.asarray(v_root, dtype=float).copy()]
    for i in range(k):
        a = int(parent[i])
        e = rng.standard_normal(d)
        e /= np.linalg.norm(e)
        if _creation_kernel(int(deflect[i]), vs[a], vbar[i], e) <= 0:
            e = -e
        eta[i] = e
        vs.append(vbar[i].copy())
        if int(deflect[i]) == 1:
            vs[a], vs[-1] = scatter(vs[a], vs[-1], e)
    tree = CollisionTree(parent=parent, deflect=deflect, times=times,
                         vbar=vbar, eta=eta)
    return tree, np.asarray(v_root, dtype=float)
