"""Command line entry point: ``skippy generate|evaluate|optimize|verify|sweep``."""
from __future__ import annotations

import argparse
import contextlib
import json
import math
import sys
from pathlib import Path

from .errors import ConfigError, EmptyFilterError, InvalidInputError
from .experiment import (
    RunConfig,
    load_config,
    plan_from_dict,
    rows_to_csv,
    run_once,
    run_sweep,
    sweep_manifest,
)
from .instances import InstanceSpec, generate
from .io import features_to_dict, mdp_to_dict, policy_to_dict, write_dataset
from .mdp import sample_dataset
from .skipping import DROP_STOP_FACTOR, inject_fault

EXIT_OK, EXIT_INPUT, EXIT_VERIFY, EXIT_EMPTY = 0, 1, 2, 3


def _base_config(args) -> tuple:
    if args.config:
        cfg, sweep = load_config(args.config)
    else:
        cfg, sweep = RunConfig(), {}
    over = dict(seed=args.seed, n=args.n, alpha=args.alpha, family=getattr(args, "family", None))
    if getattr(args, "instance", None):
        over["instance"] = InstanceSpec(kind=args.instance)
    return cfg.with_overrides(**over), sweep


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _emit(payload: dict, out) -> None:
    text = json.dumps(_clean(payload), sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_generate(args) -> int:
    cfg, _ = _base_config(args)
    spec = cfg.instance
    inst = generate(spec)
    payload = {
        "spec": spec.as_dict(),
        "audit_residual": inst.audit_residual,
        "L2": inst.L2,
        "mdp": mdp_to_dict(inst.mdp),
        "features": features_to_dict(inst.mdp, inst.features),
        "behavior": policy_to_dict(inst.mdp, inst.behavior),
    }
    _emit(payload, args.out)
    if args.dataset:
        write_dataset(args.dataset, sample_dataset(inst.mdp, inst.behavior, cfg.n, cfg.seed), inst.mdp)
    return EXIT_OK


def _learn(args, mode: str) -> int:
    cfg, _ = _base_config(args)
    cfg = cfg.with_overrides(mode=mode, target=getattr(args, "target", None))
    result = run_once(cfg, with_manifest=True)
    _emit(result, args.out)
    return EXIT_EMPTY if result["row"]["status"] == "empty-filter" else EXIT_OK


def cmd_evaluate(args) -> int:
    return _learn(args, "eval")


def cmd_optimize(args) -> int:
    return _learn(args, "opt")


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(args.suite)
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    text = "\n".join(lines)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg, sweep = _base_config(args)
    sweep = dict(sweep)
    if args.grid:
        sweep["n_grid"] = [int(x) for x in args.grid.split(",") if x]
    if args.seeds is not None:
        sweep["seeds"] = args.seeds
    if args.seed is not None:
        sweep["seed_offset"] = args.seed
    plan = plan_from_dict(cfg, sweep)
    rows = run_sweep(plan, args.workers)
    csv_text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
        Path(str(args.out) + ".manifest.json").write_text(
            json.dumps(_clean(sweep_manifest(plan, rows)), sort_keys=True, indent=2) + "\n"
        )
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="dataset seed (sweep: first seed)")
    common.add_argument("--n", type=int, help="number of trajectories")
    common.add_argument("--alpha", type=float, help="skipping threshold")
    common.add_argument("--out", help="output path (stdout when omitted)")
    common.add_argument("--instance", choices=("fig1", "linear_mdp_random", "low_range_injected", "chain"))
    common.add_argument("--fault", choices=(DROP_STOP_FACTOR,), help=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="skippy", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="build an instance and optionally sample a dataset")
    g.add_argument("--dataset", help="also write an n-trajectory JSONL dataset here")
    g.set_defaults(func=cmd_generate)

    for name, fn in (("evaluate", cmd_evaluate), ("optimize", cmd_optimize)):
        s = sub.add_parser(name, parents=[common], help=f"run the {name} learner once")
        s.add_argument("--family", help="candidate family, e.g. oracle,perturbed,random:2,sentinel")
        if name == "evaluate":
            s.add_argument("--target", help="target policy: up, uniform, optimal, random:K")
        s.set_defaults(func=fn)

    v = sub.add_parser("verify", parents=[common], help="run oracle checks")
    v.add_argument("--suite", default="all", choices=("lemmas", "regression", "learners", "all"))
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("sweep", parents=[common], help="run a (n, seed) grid and write CSV")
    w.add_argument("--family", help="candidate family spec")
    w.add_argument("--grid", help="comma separated n values")
    w.add_argument("--seeds", type=int, help="seeds per n")
    w.add_argument("--workers", type=int, help="worker threads (defaults to SKIPPY_THREADS)")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fault = inject_fault(args.fault) if args.fault else contextlib.nullcontext()
    try:
        with fault:
            return args.func(args)
    except EmptyFilterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (InvalidInputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
