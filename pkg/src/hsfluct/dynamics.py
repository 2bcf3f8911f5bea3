"""Exact event-driven hard-sphere flow on the torus, with diagnostics.

The flow is piecewise free flight with elastic scattering at pair distance
eps.  Candidate collision times are solved from the nearest periodic image
only, which is exact as long as the relative displacement since prediction
stays below (1/2 - eps); a global refresh window and per-pair caps enforce
that bound, so no wrap-around approach is missed.  Scheduling is O(N^2)
re-prediction, adequate at desk scale (N up to ~10^3).

Also here: collision graphs and their cycle structure, clustering trees,
distance clusters, and the symmetric conditioning indicator.
"""

import io
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .geometry import (contact_roots, pair_contact_time_torus,
                       pairwise_minimum_image, scatter, wrap)
from .gibbs import Configuration

TIE_TOL = 1e-12


class FlowError(RuntimeError):
    pass


@dataclass
class CollisionEvent:
    time: float
    i: int
    j: int
    eta: np.ndarray        # unit vector (x_j - x_i)/eps at contact, i < j
    v_i_pre: np.ndarray
    v_j_pre: np.ndarray
    v_i_post: np.ndarray
    v_j_post: np.ndarray


@dataclass
class EventLog:
    events: List[CollisionEvent]
    horizon: float
    d: int

    def __len__(self):
        return len(self.events)

    def to_csv(self):
        d = self.d
        cols = (["time", "i", "j"]
                + [f"eta_{k+1}" for k in range(d)]
                + [f"v_i_pre_{k+1}" for k in range(d)]
                + [f"v_j_pre_{k+1}" for k in range(d)]
                + [f"v_i_post_{k+1}" for k in range(d)]
                + [f"v_j_post_{k+1}" for k in range(d)])
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for ev in self.events:
            row = [f"{ev.time:.17g}", str(ev.i), str(ev.j)]
            for arr in (ev.eta, ev.v_i_pre, ev.v_j_pre, ev.v_i_post, ev.v_j_post):
                row.extend(f"{val:.17g}" for val in arr)
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, horizon=None):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        header = lines[0].split(",")
        d = sum(1 for c in header if c.startswith("eta_"))
        events = []
        tmax = 0.0
        for ln in lines[1:]:
            parts = ln.split(",")
            t = float(parts[0])
            i, j = int(parts[1]), int(parts[2])
            vals = np.array([float(p) for p in parts[3:]])
            eta, rest = vals[:d], vals[d:]
            events.append(CollisionEvent(
                time=t, i=i, j=j, eta=eta,
                v_i_pre=rest[0:d], v_j_pre=rest[d:2 * d],
                v_i_post=rest[2 * d:3 * d], v_j_post=rest[3 * d:4 * d]))
            tmax = max(tmax, t)
        return cls(events=events, horizon=horizon if horizon is not None else tmax, d=d)


@dataclass
class FlowResult:
    config: Configuration
    log: EventLog
    snapshots: List[Tuple[float, Configuration]]
    n_degenerate: int = 0


def _candidate_rows(x, v, alive_idx, i, eps, t_now, window_end):
    """Contact candidates of particle i against particles alive_idx.

    Returns (times, caps): absolute contact times (inf if none before the
    per-pair validity cap) and the absolute cap times.  The cap keeps each
    prediction inside its nearest-image validity range.
    """
    dx = x[i] - x[alive_idx]
    dx -= np.ceil(dx - 0.5)
    dv = v[i] - v[alive_idx]
    speed = np.sqrt(np.sum(dv * dv, axis=-1))
    cap_rel = np.where(speed > 0.0, 0.999 * (0.5 - eps) / np.maximum(speed, 1e-300), np.inf)
    cap_abs = np.minimum(t_now + cap_rel, window_end)
    tau = contact_roots(dx, dv, eps, horizon=np.inf)
    t_hit = t_now + tau
    t_hit = np.where(t_hit <= cap_abs, t_hit, np.inf)
    return t_hit, cap_abs


def run_flow(config, t, epsilon, max_events=1_000_000, snapshot_times=None,
             seed_label=None):
    """Evolve a configuration for time t under the hard-sphere flow.

    Returns FlowResult with the final configuration, the complete event log
    on [0, t], and states recorded at the requested snapshot times.
    Simultaneous events on disjoint pairs (within 1e-12) are processed in
    lexicographic pair order and counted as degenerate; a simultaneous event
    sharing a particle (triple contact, measure zero) aborts the run.
    """
    if epsilon >= 0.5:
        raise ValueError("need eps < 1/2 on the unit torus")
    x = np.array(config.x, dtype=float)
    v = np.array(config.v, dtype=float)
    n = x.shape[0]
    snaps_pending = sorted(float(s) for s in (snapshot_times or []))
    snapshots = []
    events = []
    n_degenerate = 0
    t_now = 0.0

    def advance(target):
        # free flight to `target`, recording any snapshots passed on the way
        nonlocal x, t_now
        target = min(target, t)
        while snaps_pending and snaps_pending[0] <= target + 1e-15:
            s = min(snaps_pending.pop(0), t)
            if s > t_now:
                x = wrap(x + v * (s - t_now))
                t_now = s
            snapshots.append((s, Configuration(x=x.copy(), v=v.copy())))
        if target > t_now:
            x = wrap(x + v * (target - t_now))
            t_now = target

    if n < 2:
        advance(t)
        return FlowResult(Configuration(x=x, v=v), EventLog(events, t, config.d),
                          snapshots)

    idx = np.arange(n)

    def action_entries(times, caps, window_end):
        # effective next-action time per pair: a contact if one is due,
        # else the prediction-validity expiry (caps clipped to the window
        # boundary are handled by the window refresh itself)
        exp = np.where(caps < window_end, caps, np.inf)
        return np.minimum(times, exp)

    while True:
        # open a refresh window sized so nearest-image prediction is exact
        vmax = float(np.sqrt(np.sum(v * v, axis=-1)).max())
        if vmax == 0.0:
            window_end = t
        else:
            window_end = min(t, t_now + 0.999 * (0.5 - epsilon) / (2.0 * vmax))
        dxm = pairwise_minimum_image(x)
        dvm = v[:, None, :] - v[None, :, :]
        tau = contact_roots(dxm, dvm, epsilon, horizon=np.inf)
        tmat = t_now + tau
        tmat[tmat > window_end] = np.inf
        np.fill_diagonal(tmat, np.inf)
        # at refresh every pair's validity cap covers the whole window
        amat = tmat.copy()
        rowval = amat.min(axis=1)

        while True:
            if len(events) > max_events:
                label = f" (seed {seed_label})" if seed_label is not None else ""
                raise FlowError(f"exceeded {max_events} events{label}: "
                                "parameter blowup or near-degenerate data")
            r = int(np.argmin(rowval))
            row_true = float(amat[r].min())
            if row_true > rowval[r]:
                rowval[r] = row_true      # lazy repair after increases
                continue
            c = int(np.argmin(amat[r]))
            t_act = float(amat[r, c])
            if t_act >= window_end or t_act > t:
                break
            if t_act < tmat[r, c]:
                # validity expiry: re-solve this one pair from fresh state
                advance(t_act)
                times, caps = _candidate_rows(x, v, np.array([c]), r, epsilon,
                                              t_now, window_end)
                tmat[r, c] = tmat[c, r] = times[0]
                val = action_entries(times, caps, window_end)[0]
                amat[r, c] = amat[c, r] = val
                rowval[r] = min(rowval[r], val) if val <= rowval[r] else amat[r].min()
                rowval[c] = min(rowval[c], val)
                continue
            i, j = r, c
            t_next = t_act
            # simultaneous contacts: rowval is never above the true row
            # minimum, so rows of any tied pair show up in this prefilter
            cand = np.nonzero(rowval <= t_next + TIE_TOL)[0]
            if cand.size > 2 or not set(cand.tolist()) <= {i, j}:
                sub = np.argwhere(tmat[cand] <= t_next + TIE_TOL)
                close = sorted({(min(int(cand[a]), int(b)), max(int(cand[a]), int(b)))
                                for a, b in sub})
                if len(close) > 1:
                    parts = [p for e in close for p in e]
                    if len(set(parts)) < len(parts):
                        raise FlowError("simultaneous contact sharing a particle "
                                        "(triple collision, measure zero)")
                    n_degenerate += len(close) - 1
                    i, j = close[0]
                    t_next = tmat[i, j]
            advance(t_next)
            if i > j:
                i, j = j, i
            sep = x[j] - x[i]
            sep -= np.ceil(sep - 0.5)
            eta = sep / math.sqrt(float(np.dot(sep, sep)))
            vi_pre, vj_pre = v[i].copy(), v[j].copy()
            v[i], v[j] = scatter(v[i], v[j], eta)
            events.append(CollisionEvent(time=t_now, i=i, j=j, eta=eta,
                                         v_i_pre=vi_pre, v_j_pre=vj_pre,
                                         v_i_post=v[i].copy(), v_j_post=v[j].copy()))
            for p in (i, j):
                times, caps = _candidate_rows(x, v, idx, p, epsilon, t_now,
                                              window_end)
                vals = action_entries(times, caps, window_end)
                vals[p] = np.inf
                times[p] = np.inf
                tmat[p, :] = times
                tmat[:, p] = times
                amat[p, :] = vals
                amat[:, p] = vals
                rowval[p] = vals.min()
                np.minimum(rowval, vals, out=rowval)  # lazy: repaired on pop

        advance(window_end)
        if t_now >= t:
            break

    advance(t)
    return FlowResult(Configuration(x=x, v=v), EventLog(events, t, config.d),
                      snapshots, n_degenerate)


def next_pair_collision(p1, p2, epsilon, horizon):
    """First contact of an isolated pair within (0, horizon].

    p1, p2 are (x, v) tuples.  Returns (time, eta) with eta the unit contact
    vector from p1 toward p2, or None.  Exact on the torus for arbitrary
    horizons (windowed nearest-image search).
    """
    x1, v1 = (np.asarray(a, dtype=float) for a in p1)
    x2, v2 = (np.asarray(a, dtype=float) for a in p2)
    return pair_contact_time_torus(x1 - x2, v1 - v2, epsilon, horizon)


# ---------------------------------------------------------------------------
# collision graphs


@dataclass
class CollisionGraph:
    n_vertices: int
    edges: List[Tuple[int, int, float]]   # (i, j, time), time-ordered, i < j


def collision_graph(log, window=None, n_vertices=None):
    """Collision graph of an event log restricted to a time window."""
    lo, hi = (0.0, log.horizon) if window is None else window
    edges = [(ev.i, ev.j, ev.time) for ev in log.events if lo <= ev.time <= hi]
    edges.sort(key=lambda e: e[2])
    if n_vertices is None:
        n_vertices = 1 + max((max(i, j) for i, j, _ in edges), default=-1)
    return CollisionGraph(n_vertices=n_vertices, edges=edges)


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def first_cycle_event(graph):
    """Index of the earliest edge closing a cycle (repeated pairs count)."""
    uf = _UnionFind(graph.n_vertices)
    for k, (i, j, _) in enumerate(graph.edges):
        if not uf.union(i, j):
            return k
    return None


def has_cycle(graph):
    return first_cycle_event(graph) is not None


def clustering_tree(*graphs):
    """Cycle-free skeleton of one or two collision graphs.

    Edges of the merged graphs are scanned in time order; an edge is kept
    iff it joins two distinct current components.  Kept edges are returned
    in scan order as (i, j) with i < j.
    """
    if not graphs:
        raise ValueError("need at least one collision graph")
    n = max(g.n_vertices for g in graphs)
    merged = sorted((e for g in graphs for e in g.edges), key=lambda e: e[2])
    uf = _UnionFind(n)
    kept = []
    for i, j, _ in merged:
        if uf.union(i, j):
            kept.append((min(i, j), max(i, j)))
    return kept


def distance_clusters(config, L):
    """Partition of particles into connected components at threshold L.

    Components of the graph with an edge wherever the torus distance is
    strictly below L.  Returns a list of sorted index lists.
    """
    if L <= 0:
        raise ValueError("L must be positive")
    n = config.n
    if n == 0:
        return []
    dx = pairwise_minimum_image(config.x)
    close = np.sum(dx * dx, axis=-1) < L * L
    uf = _UnionFind(n)
    ii, jj = np.nonzero(np.triu(close, k=1))
    for a, b in zip(ii.tolist(), jj.tolist()):
        uf.union(a, b)
    groups = {}
    for k in range(n):
        groups.setdefault(uf.find(k), []).append(k)
    return sorted(groups.values(), key=lambda g: g[0])


# ---------------------------------------------------------------------------
# symmetric conditioning


@dataclass
class ConditioningParams:
    """Parameters of the symmetric good-configuration indicator.

    gamma caps both cluster sizes and the number of leading speeds entering
    the energy condition; delta is the micro time step, V the velocity bound
    and L the distance-cluster radius (default 2 delta V).
    """

    gamma: int = 4
    delta: float = 0.1
    V: float = 2.0
    L: Optional[float] = None

    def __post_init__(self):
        if self.gamma < 2:
            raise ValueError("gamma must be an integer >= 2")
        if self.delta <= 0 or self.V <= 0:
            raise ValueError("delta and V must be positive")
        if self.L is None:
            self.L = 2.0 * self.delta * self.V

    @classmethod
    def defaults_for(cls, epsilon, d, gamma=4):
        delta = epsilon ** (1.0 - 1.0 / (2 * d))
        vbound = abs(math.log(epsilon))
        return cls(gamma=gamma, delta=delta, V=vbound)


def _good_at(config, cond):
    """Cluster-size and energy conditions at a single time."""
    if config.n == 0:
        return True, {"max_cluster": 0, "top_energy": 0.0}
    clusters = distance_clusters(config, cond.L)
    max_cluster = max(len(c) for c in clusters)
    speeds2 = np.sum(config.v * config.v, axis=-1)
    top = np.sort(speeds2)[::-1][:cond.gamma]
    top_energy = float(top.sum())
    ok = (max_cluster <= cond.gamma) and (top_energy <= cond.V ** 2)
    return ok, {"max_cluster": max_cluster, "top_energy": top_energy}


def check_upsilon(config, t, cond, epsilon):
    """Good-configuration indicator along the flow on the delta-grid of [0, t].

    True iff at every time in {0, delta, 2 delta, ..., t} no distance cluster
    exceeds gamma particles and the gamma largest kinetic energies sum to at
    most V^2 / 2 each side (the worst subset of <= gamma particles).
    Returns (bool, per-step diagnostics).
    """
    ticks = [k * cond.delta for k in range(int(math.floor(t / cond.delta)) + 1)]
    if not ticks or ticks[-1] < t - 1e-12:
        ticks.append(t)
    result = run_flow(config, t, epsilon, snapshot_times=ticks)
    diags = []
    ok_all = True
    for s, snap in result.snapshots:
        ok, info = _good_at(snap, cond)
        info["time"] = s
        info["ok"] = ok
        diags.append(info)
        ok_all = ok_all and ok
    return ok_all, diags
