"""Command-line interface.

Subcommands: simulate, covariance, semigroup, pseudotest, diagnostics,
report.  Experiment parameters come from an optional flat key=value config
file; every key can be overridden by a flag of the same name.  --seed is
mandatory for all experiment commands.  Exit codes: 0 success, 2 assertion
failure (a checked property did not hold), 1 error.
"""

import argparse
import json
import math
import sys

import numpy as np


def _parse_value(text):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(p) for p in text.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path):
    """Flat key=value file; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line (need key=value): {raw!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = _parse_value(val)
    return out


def _experiment_config(args):
    from .harness import ExperimentConfig

    data = {}
    if args.config:
        data.update(read_config_file(args.config))
    for key in ("d", "epsilons", "times", "h_name", "g_name", "replicas",
                "centering_replicas", "sg_samples", "sg_particles",
                "diag_replicas", "gamma", "outdir"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = _parse_value(val) if isinstance(val, str) else val
    data["seed"] = args.seed
    for key in ("epsilons", "times"):
        if key in data and not isinstance(data[key], tuple):
            data[key] = (data[key],)
    return ExperimentConfig(**data)


def _add_common(p, with_config=True):
    p.add_argument("--seed", type=int, required=True,
                   help="base RNG seed (mandatory)")
    if with_config:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--d", type=int)
        p.add_argument("--epsilons")
        p.add_argument("--times")
        p.add_argument("--h_name")
        p.add_argument("--g_name")
        p.add_argument("--replicas", type=int)
        p.add_argument("--centering_replicas", type=int)
        p.add_argument("--sg_samples", type=int)
        p.add_argument("--sg_particles", type=int)
        p.add_argument("--diag_replicas", type=int)
        p.add_argument("--gamma", type=int)
        p.add_argument("--outdir")


def cmd_simulate(args):
    from .dynamics import run_flow
    from .gibbs import EnsembleParams, boltzmann_grad_mu, sample_gibbs

    params = EnsembleParams(d=args.d, epsilon=args.epsilon,
                            mu=boltzmann_grad_mu(args.epsilon, args.d),
                            seed=args.seed)
    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 0)))
    cfg = sample_gibbs(params, rng)
    res = run_flow(cfg, args.t, args.epsilon, seed_label=args.seed)
    with open(args.out, "w") as fh:
        fh.write(res.log.to_csv())
    print(f"n={cfg.n} events={len(res.log)} degenerate={res.n_degenerate} "
          f"-> {args.out}")
    if args.final_state:
        with open(args.final_state, "w") as fh:
            fh.write(res.config.to_text(args.epsilon))
        print(f"final state -> {args.final_state}")
    return 0


def cmd_covariance(args):
    from .gibbs import EnsembleParams, boltzmann_grad_mu

    params = EnsembleParams(d=args.d, epsilon=args.epsilon,
                            mu=boltzmann_grad_mu(args.epsilon, args.d),
                            seed=args.seed)
    from .harness import covariance_estimate
    out = covariance_estimate(args.h_name, args.g_name, args.t, params,
                              args.replicas)
    res = out[args.t]
    print(json.dumps({"epsilon": args.epsilon, "t": args.t,
                      "cov": res.mean, "stderr": res.stderr,
                      "replicas": res.replicas,
                      "recollision_rate": res.recollision_rate}))
    return 0


def cmd_semigroup(args):
    from .linboltz import semigroup_mc
    from .registry import get_test_function, velocity_callable

    h = velocity_callable(get_test_function(args.h_name))
    g = velocity_callable(get_test_function(args.g_name))
    est = semigroup_mc(h, g, args.t, n_max=args.n_max, samples=args.samples,
                       seed=args.seed, method=args.method, d=args.d,
                       n_particles=args.sg_particles)
    print(est.to_json())
    return 0


def cmd_pseudotest(args):
    from .gibbs import Configuration
    from .dynamics import run_flow
    from .pseudo import develop_phi, develop_phi_families, development_sum

    rng = np.random.default_rng(args.seed)
    eps, t = args.epsilon, args.t
    checked = failed = 0

    def h(x, v):
        return float(v[0, 0] + 0.5 * v[0, 1] ** 2)

    while checked < args.systems:
        x = rng.random((3, args.d))
        v = rng.standard_normal((3, args.d))
        cfg = Configuration(x=x, v=v)
        if cfg.min_pair_distance() <= eps:
            continue
        res = run_flow(cfg, t, eps)
        if len(res.log) > 3:
            continue
        checked += 1
        lhs = h(res.config.x[:1], res.config.v[:1])
        rhs = development_sum(h, 1, cfg, t, eps)
        if abs(lhs - rhs) > 1e-9:
            failed += 1
            print(f"development identity FAILED: |{lhs} - {rhs}|")
        # semigroup property at t' = t/2
        direct = develop_phi_families(h, 1, 3, cfg, t, eps)
        composed = 0.0
        for n_mid in (1, 2, 3):
            def outer(xm, vm, n_mid=n_mid):
                sub = Configuration(x=xm, v=vm)
                return develop_phi(h, 1, n_mid, sub, t - t / 2, eps)
            composed += develop_phi_families(outer, n_mid, 3, cfg, t / 2, eps)
        if abs(direct - composed) > 1e-9:
            failed += 1
            print(f"semigroup property FAILED: |{direct} - {composed}|")
    print(f"pseudotest: {checked} systems, {failed} failures")
    return 2 if failed else 0


def cmd_diagnostics(args):
    from .gibbs import EnsembleParams, boltzmann_grad_mu
    from .harness import covariance_estimate, upsilon_fail_rate

    eps_list = [float(e) for e in str(args.epsilons).split(",")]
    rows = []
    for e in sorted(eps_list, reverse=True):
        params = EnsembleParams(d=args.d, epsilon=e,
                                mu=boltzmann_grad_mu(e, args.d),
                                seed=args.seed)
        u, use = upsilon_fail_rate(params, args.t, args.replicas)
        cov = covariance_estimate("v1", "v1", args.t, params, args.replicas)
        rec, rse = cov[args.t].recollision_rate, cov[args.t].recollision_stderr
        rows.append((e, u, use, rec, rse))
        print(f"epsilon={e:g} upsilon_fail={u:.4f}({use:.4f}) "
              f"recollision={rec:.4f}({rse:.4f}) "
              f"repeat_fraction={cov[args.t].repeat_fraction:.4f}")
    ok = True
    for (e1, u1, s1, r1, t1), (e2, u2, s2, r2, t2) in zip(rows, rows[1:]):
        if u2 > u1 + math.sqrt(s1 ** 2 + s2 ** 2):
            ok = False
            print(f"upsilon fail rate increased from eps={e1:g} to {e2:g}")
        if r2 > r1 + math.sqrt(t1 ** 2 + t2 ** 2):
            ok = False
            print(f"recollision rate increased from eps={e1:g} to {e2:g}")
    print("monotone" if ok else "NOT monotone")
    return 0 if ok else 2


def cmd_report(args):
    from .harness import convergence_experiment, emit_report

    cfg = _experiment_config(args)
    report = convergence_experiment(cfg)
    files = emit_report(report, outdir=cfg.outdir, fmt=args.format,
                        plots=args.plots)
    for f in files:
        print(f)
    if report.failures:
        for f in report.failures:
            print("failure:", f, file=sys.stderr)
        return 1
    if not all(report.monotone_flags.values()):
        print("discrepancy monotonicity violated", file=sys.stderr)
        return 2
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hsfluct",
                                description="hard-sphere fluctuation harness")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="one flow run, emits the event log")
    _add_common(ps, with_config=False)
    ps.add_argument("--d", type=int, default=3)
    ps.add_argument("--epsilon", type=float, default=0.1)
    ps.add_argument("--t", type=float, default=0.5)
    ps.add_argument("--out", default="events.csv")
    ps.add_argument("--final-state", default=None)
    ps.set_defaults(func=cmd_simulate)

    pc = sub.add_parser("covariance", help="particle covariance at one grid point")
    _add_common(pc, with_config=False)
    pc.add_argument("--d", type=int, default=3)
    pc.add_argument("--epsilon", type=float, default=0.08)
    pc.add_argument("--t", type=float, default=0.5)
    pc.add_argument("--h_name", default="v1")
    pc.add_argument("--g_name", default="v1")
    pc.add_argument("--replicas", type=int, default=200)
    pc.set_defaults(func=cmd_covariance)

    pg = sub.add_parser("semigroup", help="limiting covariance by Monte Carlo")
    _add_common(pg, with_config=False)
    pg.add_argument("--d", type=int, default=3)
    pg.add_argument("--t", type=float, default=0.5)
    pg.add_argument("--h_name", default="v1")
    pg.add_argument("--g_name", default="v1")
    pg.add_argument("--samples", type=int, default=2000)
    pg.add_argument("--n_max", type=int, default=12)
    pg.add_argument("--method", default="ensemble", choices=("ensemble", "tree"))
    pg.add_argument("--sg_particles", type=int, default=1024)
    pg.set_defaults(func=cmd_semigroup)

    pp = sub.add_parser("pseudotest",
                        help="development / semigroup identities on small systems")
    _add_common(pp, with_config=False)
    pp.add_argument("--d", type=int, default=3)
    pp.add_argument("--epsilon", type=float, default=0.15)
    pp.add_argument("--t", type=float, default=0.35)
    pp.add_argument("--systems", type=int, default=10)
    pp.set_defaults(func=cmd_pseudotest)

    pd = sub.add_parser("diagnostics",
                        help="conditioning failure and recollision scaling")
    _add_common(pd, with_config=False)
    pd.add_argument("--d", type=int, default=3)
    pd.add_argument("--epsilons", default="0.12,0.08,0.05")
    pd.add_argument("--t", type=float, default=0.5)
    pd.add_argument("--replicas", type=int, default=200)
    pd.set_defaults(func=cmd_diagnostics)

    pr = sub.add_parser("report", help="full convergence experiment")
    _add_common(pr, with_config=True)
    pr.add_argument("--format", default="csv", choices=("csv", "json"))
    pr.add_argument("--plots", action="store_true")
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surface errors with exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
