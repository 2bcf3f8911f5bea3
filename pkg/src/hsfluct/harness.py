"""End-to-end convergence experiment: fluctuation covariance vs semigroup.

Per epsilon on the grid, the activity is mu = eps^(1-d); replicas sample
the Gibbs ensemble, flow to each requested time, and accumulate products
zeta_t(h) zeta_0(g).  Centering constants are estimated on a disjoint
replica batch.  The limiting covariance is computed once per time by the
collision-ensemble semigroup estimator, discrepancies are tabulated with a
one-stderr slack on the monotonicity-in-epsilon assertion, and everything
is persisted (CSV + JSON manifest + optional figures).
"""

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from .dynamics import (ConditioningParams, FlowError, check_upsilon,
                       collision_graph, first_cycle_event, run_flow)
from .gibbs import (EnsembleParams, GibbsSamplingError, boltzmann_grad_mu,
                    sample_gibbs)
from .linboltz import ensemble_covariance
from .registry import get_test_function, velocity_callable


def fluctuation_field(config, g, center, mu):
    """zeta(g) = sqrt(mu) (mu^-1 sum_i g(z_i) - center)."""
    if config.n == 0:
        total = 0.0
    else:
        total = float(np.sum(g(config.x, config.v)))
    return math.sqrt(mu) * (total / mu - center)


def _jackknife_mean_stderr(vals):
    vals = np.asarray(vals, dtype=float)
    r = vals.size
    mean = vals.mean()
    loo = (vals.sum() - vals) / (r - 1)
    var = (r - 1) / r * np.sum((loo - loo.mean()) ** 2)
    return float(mean), float(math.sqrt(var))


@dataclass
class CovarianceResult:
    mean: float
    stderr: float
    replicas: int
    center_g: float
    center_h: float
    aborted: int = 0
    recollision_rate: float = 0.0
    recollision_stderr: float = 0.0
    repeat_fraction: float = 0.0


def estimate_centers(names, params, replicas, seed_offset=10**6):
    """Time-0 ensemble means of pi(g) per observable name (disjoint batch)."""
    fns = {n: get_test_function(n) for n in names}
    sums = {n: 0.0 for n in names}
    for r in range(replicas):
        rng = np.random.default_rng(np.random.SeedSequence(
            (params.seed, seed_offset + r)))
        cfg = sample_gibbs(params, rng)
        for n, tf in fns.items():
            tot = float(np.sum(tf(cfg.x, cfg.v))) if cfg.n else 0.0
            sums[n] += tot / params.mu
    return {n: s / replicas for n, s in sums.items()}


def covariance_estimate(name_h, name_g, t, params, replicas, centers=None,
                        centering_replicas=None, max_abort_fraction=0.01,
                        times=None):
    """E_eps[zeta_t(h) zeta_0(g)] with jackknife errors, per requested time.

    `times` defaults to [t]; one flow run per replica serves all of them.
    Returns {time: CovarianceResult}.  Fails if more than 1% of replicas
    abort (flow blowup or sampler failure).
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    t_list = sorted(set(times if times is not None else [t]))
    h = get_test_function(name_h)
    g = get_test_function(name_g)
    if centers is None:
        nc = centering_replicas or replicas
        centers = estimate_centers({name_g, name_h}, params, nc)
    c_g, c_h = centers[name_g], centers[name_h]
    mu, eps = params.mu, params.epsilon
    prods = {s: [] for s in t_list}
    cycles = []
    repeats = []
    aborted = 0
    t_max = max(t_list)
    for r in range(replicas):
        rng = np.random.default_rng(np.random.SeedSequence((params.seed, r)))
        try:
            cfg = sample_gibbs(params, rng)
            z0 = fluctuation_field(cfg, g, c_g, mu)
            if t_max > 0.0:
                res = run_flow(cfg, t_max, eps,
                               snapshot_times=[s for s in t_list if s > 0.0],
                               seed_label=(params.seed, r))
                snap_map = {round(s, 12): c for s, c in res.snapshots}
                graph = collision_graph(res.log, n_vertices=cfg.n)
                cycles.append(1.0 if first_cycle_event(graph) is not None else 0.0)
                if graph.edges:
                    seen = set()
                    n_rep = 0
                    for i, j, _ in graph.edges:
                        if (i, j) in seen:
                            n_rep += 1
                        seen.add((i, j))
                    repeats.append(n_rep / len(graph.edges))
            else:
                snap_map = {}
        except (FlowError, GibbsSamplingError):
            aborted += 1
            continue
        for s in t_list:
            cfg_s = cfg if s == 0.0 else snap_map[round(s, 12)]
            zt = fluctuation_field(cfg_s, h, c_h, mu)
            prods[s].append(zt * z0)
    if aborted > max_abort_fraction * replicas:
        raise RuntimeError(f"{aborted}/{replicas} replicas aborted")
    rec_rate, rec_se = (0.0, 0.0)
    if cycles:
        rec_rate, rec_se = _jackknife_mean_stderr(cycles)
    rep_frac = float(np.mean(repeats)) if repeats else 0.0
    out = {}
    for s in t_list:
        m, se = _jackknife_mean_stderr(prods[s])
        out[s] = CovarianceResult(mean=m, stderr=se, replicas=len(prods[s]),
                                  center_g=c_g, center_h=c_h, aborted=aborted,
                                  recollision_rate=rec_rate,
                                  recollision_stderr=rec_se,
                                  repeat_fraction=rep_frac)
    return out


def upsilon_fail_rate(params, t, replicas, cond=None):
    """Empirical P(Upsilon^c): fraction of replicas failing the conditioning."""
    cond = cond or ConditioningParams.defaults_for(params.epsilon, params.d)
    fails = []
    for r in range(replicas):
        rng = np.random.default_rng(np.random.SeedSequence(
            (params.seed, 2 * 10**6 + r)))
        try:
            cfg = sample_gibbs(params, rng)
            ok, _ = check_upsilon(cfg, t, cond, params.epsilon)
            fails.append(0.0 if ok else 1.0)
        except (FlowError, GibbsSamplingError):
            fails.append(1.0)
    return _jackknife_mean_stderr(fails)


@dataclass
class ExperimentConfig:
    d: int = 3
    epsilons: Sequence[float] = (0.12, 0.08, 0.05)
    times: Sequence[float] = (0.2, 0.5)
    h_name: str = "v1"
    g_name: str = "v1"
    replicas: int = 400
    centering_replicas: Optional[int] = None
    seed: int = 0
    sg_samples: int = 1500
    sg_particles: int = 1024
    diag_replicas: int = 200
    gamma: int = 4
    outdir: str = "reports"

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        self.times = tuple(float(s) for s in self.times)
        if not self.epsilons or not self.times:
            raise ValueError("epsilon and time grids must be non-empty")
        if self.replicas < 2:
            raise ValueError("need replicas >= 2")
        get_test_function(self.h_name), get_test_function(self.g_name)
        if self.d not in (2, 3):
            raise ValueError("d must be 2 or 3")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop("outside_theorem_hypotheses", None)
        for key in ("epsilons", "times"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ReportRow:
    epsilon: float
    t: float
    cov: float
    cov_stderr: float
    semigroup: float
    sg_stderr: float
    discrepancy: float
    upsilon_fail_rate: float
    recollision_rate: float
    replicas: int = 0


@dataclass
class CovarianceReport:
    config: ExperimentConfig
    rows: List[ReportRow] = field(default_factory=list)
    monotone_flags: Dict[float, bool] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    CSV_COLUMNS = ("epsilon,t,cov,cov_stderr,semigroup,sg_stderr,"
                   "discrepancy,upsilon_fail_rate,recollision_rate")

    def to_csv(self):
        lines = [self.CSV_COLUMNS]
        for r in self.rows:
            lines.append(",".join(f"{val:.17g}" for val in (
                r.epsilon, r.t, r.cov, r.cov_stderr, r.semigroup, r.sg_stderr,
                r.discrepancy, r.upsilon_fail_rate, r.recollision_rate)))
        return "\n".join(lines) + "\n"

    def manifest(self):
        cfg = self.config.to_dict()
        if self.config.d == 2:
            cfg["outside_theorem_hypotheses"] = True
        return {"config": cfg,
                "monotone_flags": {f"{k:g}": v for k, v in self.monotone_flags.items()},
                "failures": self.failures}


def convergence_experiment(cfg):
    """Run the full (epsilon, t) grid and assemble a CovarianceReport."""
    report = CovarianceReport(config=cfg)
    h_tf = get_test_function(cfg.h_name)
    g_tf = get_test_function(cfg.g_name)
    sg = {}
    sg_err = {}
    if h_tf.velocity_only and g_tf.velocity_only:
        ests = ensemble_covariance(velocity_callable(h_tf), velocity_callable(g_tf),
                                   list(cfg.times), samples=cfg.sg_samples,
                                   n_particles=cfg.sg_particles, d=cfg.d,
                                   seed=cfg.seed + 777)
        for s, est in zip(cfg.times, ests):
            sg[s], sg_err[s] = est.value, est.stderr
    else:
        for s in cfg.times:
            sg[s], sg_err[s] = math.nan, math.nan
    cells = {}
    ups = {}
    for e in cfg.epsilons:
        params = EnsembleParams(d=cfg.d, epsilon=e,
                                mu=boltzmann_grad_mu(e, cfg.d),
                                seed=cfg.seed, replicas=cfg.replicas)
        try:
            cells[e] = covariance_estimate(
                cfg.h_name, cfg.g_name, max(cfg.times), params, cfg.replicas,
                centering_replicas=cfg.centering_replicas or cfg.replicas,
                times=list(cfg.times))
            ups[e] = upsilon_fail_rate(
                params, max(cfg.times), cfg.diag_replicas,
                ConditioningParams.defaults_for(e, cfg.d, gamma=cfg.gamma))
        except Exception as exc:  # grid-point failures recorded, run continues
            report.failures.append(f"epsilon={e:g}: {exc}")
    for e in cfg.epsilons:
        if e not in cells:
            continue
        for s in cfg.times:
            c = cells[e][s]
            disc = abs(c.mean - sg[s]) if np.isfinite(sg[s]) else math.nan
            report.rows.append(ReportRow(
                epsilon=e, t=s, cov=c.mean, cov_stderr=c.stderr,
                semigroup=sg[s], sg_stderr=sg_err[s], discrepancy=disc,
                upsilon_fail_rate=ups[e][0], recollision_rate=c.recollision_rate,
                replicas=c.replicas))
    # discrepancy non-increasing as epsilon decreases, one-stderr slack
    for s in cfg.times:
        rows = sorted((r for r in report.rows if r.t == s),
                      key=lambda r: -r.epsilon)
        ok = True
        if len(rows) > 1 and all(np.isfinite(r.discrepancy) for r in rows):
            for a, b in zip(rows, rows[1:]):
                slack = math.sqrt(a.cov_stderr ** 2 + a.sg_stderr ** 2
                                  + b.cov_stderr ** 2 + b.sg_stderr ** 2)
                if b.discrepancy > a.discrepancy + slack:
                    ok = False
        report.monotone_flags[s] = ok
    return report


def emit_report(report, outdir=None, fmt="csv", plots=False):
    """Persist a report: delimited table, JSON manifest, optional figures.

    Returns the list of files written.
    """
    outdir = outdir or report.config.outdir
    os.makedirs(outdir, exist_ok=True)
    written = []
    if fmt == "csv":
        path = os.path.join(outdir, "covariance_report.csv")
        with open(path, "w") as fh:
            fh.write(report.to_csv())
        written.append(path)
    elif fmt == "json":
        path = os.path.join(outdir, "covariance_report.json")
        with open(path, "w") as fh:
            json.dump([asdict(r) for r in report.rows], fh, indent=1)
        written.append(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    mpath = os.path.join(outdir, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(report.manifest(), fh, indent=1, sort_keys=True)
    written.append(mpath)
    if plots:
        written.extend(_render_plots(report, outdir))
    return written


def _render_plots(report, outdir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    eps_sorted = sorted({r.epsilon for r in report.rows}, reverse=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for e in eps_sorted:
        rows = sorted((r for r in report.rows if r.epsilon == e), key=lambda r: r.t)
        ax.errorbar([r.t for r in rows], [r.cov for r in rows],
                    yerr=[r.cov_stderr for r in rows], marker="o",
                    label=f"particles, eps={e:g}")
    rows0 = sorted((r for r in report.rows if r.epsilon == eps_sorted[0]),
                   key=lambda r: r.t)
    if rows0 and np.isfinite(rows0[0].semigroup):
        ax.errorbar([r.t for r in rows0], [r.semigroup for r in rows0],
                    yerr=[r.sg_stderr for r in rows0], marker="s", ls="--",
                    color="k", label="semigroup")
    ax.set_xlabel("t")
    ax.set_ylabel("covariance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p1 = os.path.join(outdir, "covariance_vs_t.png")
    fig.savefig(p1, dpi=150)
    plt.close(fig)
    files.append(p1)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for s in sorted({r.t for r in report.rows}):
        rows = sorted((r for r in report.rows if r.t == s), key=lambda r: r.epsilon)
        ax.plot([r.epsilon for r in rows], [r.discrepancy for r in rows],
                marker="o", label=f"t={s:g}")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("|covariance - semigroup|")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p2 = os.path.join(outdir, "discrepancy_vs_eps.png")
    fig.savefig(p2, dpi=150)
    plt.close(fig)
    files.append(p2)
    return files
