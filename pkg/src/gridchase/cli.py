"""Command line harness.

Exit codes: 0 success, 2 bad usage or configuration, 3 a modelling
assumption is violated, 4 a solver failed, 5 file system error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import Kind
from .cbc import UncertaintySet, competitive_log_gamma, mistake_bound_log
from .config import PRESETS, build_experiment, build_network, build_profile, config_hash, load_config
from .controller import compare, count_mistakes, prepare, run_episode
from .errors import (
    AssumptionViolation,
    GridChaseError,
    InfeasibleConsistentSet,
    SolverFailure,
)
from .grid import chain_network, random_feeder, save_network, sensitivity_matrices
from .oracle import rho
from .profiles import check_assumption1, check_assumption3, save_profile, vpar_box

EXIT_OK, EXIT_USAGE, EXIT_ASSUMPTION, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("gridchase")


def _doc(args, **overrides):
    over: dict = {}
    for sec, vals in overrides.items():
        vals = {k: v for k, v in vals.items() if v is not None}
        if vals:
            over[sec] = vals
    return load_config(getattr(args, "config", None), getattr(args, "preset", None), over)


def _out_dir(args, doc) -> Path:
    out = Path(args.out or doc["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_network(args) -> int:
    if args.n < 1:
        raise GridChaseError("--n must be at least 1")
    if args.style == "chain":
        rng = np.random.default_rng(args.seed)
        net = chain_network(rng.uniform(*args.r_range, size=args.n), rng.uniform(*args.x_range, size=args.n))
    else:
        net = random_feeder(args.n, args.seed, tuple(args.r_range), tuple(args.x_range))
    save_network(net, args.out)
    print(f"wrote {args.out} ({args.n} buses)")
    return EXIT_OK


def cmd_gen_profile(args) -> int:
    doc = _doc(args, profile={"T": args.T, "seed": args.seed}, network={"n": args.n})
    net = build_network(doc)
    prof = build_profile(doc, net.n)
    save_profile(prof, args.out)
    print(f"wrote {args.out} ({prof.T} steps x {prof.n} buses)")
    return EXIT_OK


def cmd_run(args) -> int:
    doc = _doc(args, controller={"kind": args.controller})
    exp = build_experiment(doc)
    seed = exp.seeds[0] if args.seed is None else args.seed
    cfg = exp.episode(seed=seed)
    lg = run_episode(cfg)
    out = _out_dir(args, doc)
    v_base = exp.env.v_nom if doc["output"]["per_unit"] else None
    lg.write_csv(out / "trajectory.csv", v_base=v_base)
    lg.header["experiment_hash"] = config_hash(doc)
    lg.write_header(out / "episode.json")
    rep = count_mistakes(lg, exp.env)
    print(f"{cfg.label} seed {seed}: {rep.total} mistakes over {lg.T} steps"
          f" (first {rep.first_t}, last {rep.last_t}, worst excess {rep.max_violation:.4g})")
    print(f"wrote {out / 'trajectory.csv'} and {out / 'episode.json'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    doc = _doc(args)
    exp = build_experiment(doc)
    seeds = args.seeds if args.seeds else exp.seeds
    kinds = args.controllers or doc["controller"]["compare"]
    cfgs = [exp.episode(kind=k) for k in kinds]
    table = compare(cfgs, seeds, jobs=args.jobs)
    out = _out_dir(args, doc)
    (out / "table.json").write_text(table.to_json())
    (out / "table.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_bound(args) -> int:
    if args.config or args.preset:
        doc = _doc(args)
        exp = build_experiment(doc)
        n = exp.env.n
        r = exp.env.rho
        X = sensitivity_matrices(exp.network, warn=False).X
        diam = UncertaintySet.around(X, doc["uncertainty"]["alpha"]).diameter
    else:
        if args.n is None:
            raise GridChaseError("bound needs --config/--preset or --n")
        n = args.n
        width = np.full(n, args.q_range)
        r = rho(args.epsilon, np.zeros(n), width)
        diam = args.diam
    lg = competitive_log_gamma(n) / math.log(10.0)
    print(f"rho          {r:.6g}")
    print(f"log10_gamma  {lg:.6g}")
    if diam is not None:
        print(f"diam         {diam:.6g}")
        print(f"log10_bound  {mistake_bound_log(diam, r, n):.6g}")
    return EXIT_OK


def cmd_check(args) -> int:
    doc = _doc(args)
    exp = build_experiment(doc)
    cfg = exp.episode()
    env = exp.env
    try:
        model, trace, box = prepare(cfg)
        a1 = check_assumption1(trace, env.eta, env.v_lo, env.v_hi)
    except AssumptionViolation as exc:
        print(f"noise bound: FAIL ({exc})")
        return EXIT_ASSUMPTION
    print(f"noise bound: ok (largest step change {a1.worst:.4g} <= eta {env.eta:.4g})")
    box = vpar_box(trace, cfg.box_inflation)
    uset = UncertaintySet.around(model.X, cfg.alpha)
    rng = np.random.default_rng(args.seed or 0)
    samples = [model.X]
    for _ in range(args.models):
        d = rng.normal(size=model.X.shape)
        d = (d + d.T) / 2
        d *= rng.uniform(0, uset.radius) / max(np.linalg.norm(d), 1e-300)
        samples.append(np.maximum(model.X + d, 0.0))
    a3 = check_assumption3(box, np.array(samples), (env.q_lo, env.q_hi), (env.v_lo, env.v_hi),
                           env.eta, env.epsilon, n_mc=args.n_mc, seed=args.seed or 0)
    status = "ok" if a3.feasible_fraction == 1.0 else "WARN"
    print(f"steerability: {status} (feasible fraction {a3.feasible_fraction:.3f} over {a3.n_checked} checks)")
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridchase", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gridchase {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path)
        sp.add_argument("--preset", choices=sorted(PRESETS))

    g = sub.add_parser("gen-network", help="write a network JSON file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--style", choices=["chain", "feeder-random"], default="feeder-random")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--r-range", type=float, nargs=2, default=[0.05, 0.4])
    g.add_argument("--x-range", type=float, nargs=2, default=[0.05, 0.4])
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_network)

    g = sub.add_parser("gen-profile", help="write a synthetic injection CSV")
    with_config(g)
    g.add_argument("--n", type=int)
    g.add_argument("--T", type=int, help="episode length; the file holds T + 1 steps")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_profile)

    g = sub.add_parser("run", help="run one episode")
    with_config(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--controller", choices=[k.value for k in Kind])
    g.add_argument("--out", type=Path)
    g.set_defaults(func=cmd_run)

    g = sub.add_parser("compare", help="compare controllers over seeds")
    with_config(g)
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--controllers", nargs="+", choices=[k.value for k in Kind])
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out", type=Path)
    g.set_defaults(func=cmd_compare)

    g = sub.add_parser("bound", help="print the mistake bound ingredients")
    with_config(g)
    g.add_argument("--n", type=int)
    g.add_argument("--epsilon", type=float, default=0.1)
    g.add_argument("--q-range", type=float, default=0.48, help="per-bus q_hi - q_lo in MVar")
    g.add_argument("--diam", type=float, help="diameter of the uncertainty set")
    g.set_defaults(func=cmd_bound)

    g = sub.add_parser("check", help="check the modelling assumptions for a config")
    with_config(g)
    g.add_argument("--seed", type=int)
    g.add_argument("--models", type=int, default=4, help="random models from the uncertainty set")
    g.add_argument("--n-mc", type=int, default=16)
    g.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AssumptionViolation as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except (SolverFailure, InfeasibleConsistentSet) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except GridChaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
