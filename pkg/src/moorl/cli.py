"""Command-line entry point: gen-data, train, eval, analyze-bound, ablate-k.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import astuple, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import verify_bounds
from .config import ALGOS, RunConfig, parse_pairs, read_config_file
from .data import TIERS, generate_offline_dataset, load_dataset, save_dataset
from .envs import (TabularMdp, grid_to_mdp, load_grid_map, make_env, random_mdp, random_policy)
from .errors import (ConfigurationError, DegenerateReferenceError, EmptySourceError, FormatError,
                     InvalidArgumentError, NumericalError)
from .meta import (METRIC_COLUMNS, TRAINERS, ablate_k, component_rng, dataset_rng, eval_rng,
                   evaluate_policy, load_checkpoint, save_checkpoint)
from .sac import actor_sample

log = logging.getLogger("moorl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
RUNTIME_ERRORS = (ConfigurationError, DegenerateReferenceError, EmptySourceError, FormatError,
                  InvalidArgumentError, NumericalError, OSError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def parse_seeds(text: str) -> list[int]:
    """``0..9`` (inclusive range) or ``0,3,5``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError as exc:
        raise UsageError(f"bad K list {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError("every K must be a positive integer")
    return ks


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rec in records:
        w.writerow([_fmt(v) for v in astuple(rec)])
    return buf.getvalue()


def policy_from_checkpoint(path):
    spec, params, _, _, _ = load_checkpoint(path)
    return lambda s, rng: actor_sample(spec, params.actor, s, None, deterministic=True)[0]


def _run_config(args, env_id=None, gamma=None) -> RunConfig:
    try:
        file_values = read_config_file(args.config) if args.config else {}
        overrides = parse_pairs(args.set or [], "--set")
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    for key, attr in (("algo", "algo"), ("dataset", "dataset"), ("out_dir", "out_dir")):
        if getattr(args, attr, None):
            overrides[key] = str(getattr(args, attr))
    env_id = args.env or file_values.get("env") or env_id
    if env_id is None:
        raise UsageError("no environment given (use --env, a config file, or a dataset)")
    if gamma is None:
        gamma = make_env(env_id).gamma
    return RunConfig.resolve(env_id, gamma, file_values, overrides)


def _dataset_env(args):
    """Load the dataset (if any) and pick the env id, defaulting to the dataset's."""
    ds = load_dataset(args.dataset) if args.dataset else None
    env_id = args.env or (ds.env_id if ds is not None else None)
    return ds, env_id


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    env = make_env(args.env)
    expert = policy_from_checkpoint(args.policy) if args.policy else None
    ds = generate_offline_dataset(env, args.tier, args.n, dataset_rng(args.seed),
                                  expert_policy=expert, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {ds.size} {args.tier} transitions for {env.name} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds, env_id = _dataset_env(args)
    rc = _run_config(args, env_id)
    env = make_env(rc.get("env"))
    algo = rc.get("algo") or "moorl"
    if algo not in ALGOS:
        raise UsageError(f"unknown algo {algo!r}")
    if algo in ("moorl", "mixed") and ds is None:
        raise ConfigurationError(f"--algo {algo} needs --dataset")
    cfg = rc.moorl_config()
    out = Path(rc.get("out_dir") or args.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(rc.resolved_lines()) + "\n")

    def progress(rec):
        log.info("t=%d score=%.3f mean_q=%.4f alpha=%.4g", rec.t, rec.normalized_score,
                 rec.mean_q, rec.alpha)

    res = TRAINERS[algo](env, ds, cfg, progress)
    (out / "metrics.csv").write_text(metrics_csv(res.log))
    save_checkpoint(out / "checkpoint.txt", res.spec, res.params, res.steps, rc.get("env"),
                    res.optimizers)
    last = res.log[-1]
    print(f"{algo} on {env.name}: t={last.t} return={last.eval_return:.6f} "
          f"normalized_score={last.normalized_score:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec, params, step, ckpt_env, _ = load_checkpoint(args.checkpoint)
    env_id = args.env or (ckpt_env if ckpt_env != "-" else None)
    if env_id is None:
        raise UsageError("checkpoint names no environment; pass --env")
    env = make_env(env_id)
    if env.obs_dim != spec.obs_dim or env.discrete != spec.discrete:
        raise ConfigurationError(f"checkpoint does not fit environment {env_id!r}")
    refs = load_dataset(args.dataset).metadata["reference_returns"] if args.dataset \
        else env.reference_returns()
    ret, score = evaluate_policy(env, spec, params, args.episodes, eval_rng(args.seed, step), refs)
    print(f"mean_return={ret:.6f} normalized_score={score:.4f}")
    return EXIT_OK


def _bound_instances(spec_text: str, trials: int, lam):
    """Yield (mdp, mu, pi, lambda) per trial."""
    if spec_text.startswith("random:"):
        try:
            _, shape, seed = spec_text.split(":")
            S, A = (int(x) for x in shape.lower().split("x"))
            seed = int(seed)
        except ValueError as exc:
            raise UsageError(f"--mdp random spec must look like random:SxA:seed, got {spec_text!r}") from exc
        for i in range(trials):
            rng = component_rng(seed, i)
            mdp = random_mdp(S, A, rng)
            yield mdp, random_policy(S, A, rng), random_policy(S, A, rng), \
                float(rng.uniform()) if lam is None else lam
        return
    path = Path(spec_text)
    mdp: TabularMdp = make_env(spec_text).mdp if not path.exists() else grid_to_mdp(load_grid_map(path))
    for i in range(trials):
        rng = component_rng(0, i)
        S, A = mdp.n_states, mdp.n_actions
        yield mdp, random_policy(S, A, rng), random_policy(S, A, rng), \
            float(rng.uniform()) if lam is None else lam


def cmd_analyze_bound(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    if args.lam is not None and not 0.0 <= args.lam <= 1.0:
        raise UsageError("--lambda must lie in [0, 1]")
    violations = 0
    for mdp, mu, pi, lam in _bound_instances(args.mdp, args.trials, args.lam):
        rep = verify_bounds(mdp, mu, pi, lam)
        violations += not (rep.holds_tv and rep.holds_pinsker)
        print(rep.to_json())
    if violations:
        print(f"error: {violations} bound violation(s)", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ablate_k(args) -> int:
    ks = parse_ks(args.k)
    seeds = parse_seeds(args.seeds)
    ds, env_id = _dataset_env(args)
    if ds is None:
        raise ConfigurationError("ablate-k needs --dataset")
    rc = _run_config(args, env_id)
    env = make_env(rc.get("env"))
    cfg = rc.moorl_config()
    out = Path(rc.get("out_dir") or args.out_dir or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(rc.resolved_lines()) + "\n")
    if args.workers > 1:
        from multiprocessing import Pool
        with Pool(args.workers) as pool:
            rows = ablate_k(env, ds, cfg, ks, seeds, runner=pool.map)
    else:
        rows = ablate_k(env, ds, cfg, ks, seeds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["K", "mean_score", "std_score", "n_seeds", "scores"])
    for k, mean, std, scores in rows:
        w.writerow([k, repr(mean), repr(std), len(scores), ";".join(repr(float(s)) for s in scores)])
        print(f"K={k} mean={mean:.4f} std={std:.4f}")
    (out / "ablation.csv").write_text(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--env", help="preset id (grid1x2, grid5, grid8, pointmass) or map file")
    p.add_argument("--dataset", help="offline dataset file from gen-data")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moorl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect an offline dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--tier", required=True, choices=TIERS)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="checkpoint whose deterministic actor is the expert (continuous envs)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train MOORL or a SAC baseline")
    p.add_argument("--algo", choices=ALGOS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint's deterministic policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--env")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset", help="take reference returns from this dataset's header")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-bound", help="check the mixed-data reward bounds exactly")
    p.add_argument("--mdp", required=True, help="map file, preset id, or random:SxA:seed")
    p.add_argument("--lambda", dest="lam", type=float, help="fixed mixing weight (default: uniform per trial)")
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(func=cmd_analyze_bound)

    p = sub.add_parser("ablate-k", help="final score per inner-step count K")
    p.add_argument("--k", default="2,4,6")
    p.add_argument("--seeds", default="0..4")
    p.add_argument("--workers", type=int, default=1)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate_k)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
