"""Command-line entry point and run orchestration.

Subcommands: train-reference, train-policy, eval {tracking,payload,push,
correlation}, ablate, replay.  Exit codes: 0 success, 1 run failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckptmod
from . import dynmodel as dynmod
from . import env as envmod
from . import eval as evalmod
from . import lit as litmod
from . import policy as polmod
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig, fingerprint, load_config, make_rng
from .eval import PolicyBundle
from .lit import VARIANTS, ReferenceTrainingError


def _ref_paths(out_dir: str, seed: int) -> tuple[str, str]:
    return (os.path.join(out_dir, f"ref_policy_s{seed}.ckpt"),
            os.path.join(out_dir, f"ref_dyn_s{seed}.ckpt"))


def _rng_snapshot(cfg: RunConfig, tag: str) -> dict:
    return make_rng(cfg.seed, "ckpt", tag).bit_generator.state


def _save_reference(cfg: RunConfig, art: litmod.Stage1Artifacts, seed: int) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    pol_path, dyn_path = _ref_paths(cfg.out_dir, seed)
    arrays, meta = ckptmod.pack_policy(art.policy)
    c_arrays, c_meta = ckptmod.pack_critic(art.critic)
    arrays.update(c_arrays)
    meta.update(c_meta)
    meta["eval_score"] = art.eval_score
    meta["level"] = art.level
    ckptmod.save_checkpoint(pol_path, Checkpoint(
        fingerprint=fingerprint(cfg), iteration=art.iterations, arrays=arrays,
        meta=meta, rng_state=_rng_snapshot(cfg, "ref-policy")))
    d_arrays, d_meta = ckptmod.pack_dynmodel(art.model, art.stats)
    ckptmod.save_checkpoint(dyn_path, Checkpoint(
        fingerprint=fingerprint(cfg), iteration=art.iterations, arrays=d_arrays,
        meta=d_meta, rng_state=_rng_snapshot(cfg, "ref-dyn")))
    evalmod.write_csv(os.path.join(cfg.out_dir, f"ref_curves_s{seed}.csv"),
                      ["iter", "lin_score", "ang_score", "level", "dyn_loss"],
                      [[p["iter"], p["lin_score"], p["ang_score"], p["level"],
                        p["dyn_loss"]] for p in art.curves])


def _load_reference(cfg: RunConfig, seed: int, force: bool
                    ) -> litmod.Stage1Artifacts:
    pol_path, dyn_path = _ref_paths(cfg.out_dir, seed)
    fp = fingerprint(cfg)
    pol_ck = ckptmod.load_checkpoint(pol_path, expect_fingerprint=fp, force=force)
    dyn_ck = ckptmod.load_checkpoint(dyn_path, expect_fingerprint=fp, force=force)
    policy = ckptmod.unpack_policy(pol_ck.arrays, pol_ck.meta)
    critic = ckptmod.unpack_critic(pol_ck.arrays, pol_ck.meta)
    model, stats = ckptmod.unpack_dynmodel(dyn_ck.arrays, dyn_ck.meta)
    if stats is None:
        raise CheckpointError(f"{dyn_path}: missing sigma statistics")
    return litmod.Stage1Artifacts(policy=policy, critic=critic, model=model,
                                  stats=stats, iterations=pol_ck.iteration,
                                  eval_score=pol_ck.meta.get("eval_score", float("nan")),
                                  level=pol_ck.meta.get("level", -1))


def _save_robust(cfg: RunConfig, res: litmod.Stage2Result, seed: int) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, f"robust_{res.variant}_s{seed}.ckpt")
    arrays, meta = ckptmod.pack_policy(res.policy)
    c_arrays, c_meta = ckptmod.pack_critic(res.critic)
    arrays.update(c_arrays)
    meta.update(c_meta)
    meta["variant"] = res.variant
    meta["diverged"] = res.diverged
    ckptmod.save_checkpoint(path, Checkpoint(
        fingerprint=fingerprint(cfg), iteration=res.iterations, arrays=arrays,
        meta=meta, rng_state=_rng_snapshot(cfg, f"robust-{res.variant}")))
    evalmod.write_csv(os.path.join(cfg.out_dir, f"curves_{res.variant}_s{seed}.csv"),
                      ["iter", "variant", "seed", "lin_score", "ang_score", "level"],
                      [[p["iter"], res.variant, seed, p["lin_score"], p["ang_score"],
                        p["level"]] for p in res.curves])
    return path


def _load_bundle(cfg: RunConfig, args) -> PolicyBundle:
    fp = fingerprint(cfg)
    ck = ckptmod.load_checkpoint(args.policy, expect_fingerprint=fp, force=args.force)
    policy = ckptmod.unpack_policy(ck.arrays, ck.meta)
    tag = ck.meta.get("variant", "A")
    variant = VARIANTS[tag]
    if not variant.has_refs:
        return PolicyBundle(policy=policy, variant=variant)
    art = _load_reference(cfg, args.seed_arg, args.force)
    return PolicyBundle(policy=policy, variant=variant, ideal=art.policy,
                        model=art.model, stats=art.stats)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="littrack")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        p.add_argument("--force", action="store_true",
                       help="load checkpoints despite config fingerprint mismatch")

    p = sub.add_parser("train-reference", help="stage 1: ideal policy + dynamics model")
    common(p)

    p = sub.add_parser("train-policy", help="stage 2: robust policy for one variant")
    common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)

    p = sub.add_parser("eval", help="evaluation protocols on saved checkpoints")
    common(p)
    p.add_argument("protocol", choices=["tracking", "payload", "push", "correlation"])
    p.add_argument("--policy", default=None, help="robust policy checkpoint")

    p = sub.add_parser("ablate", help="train + evaluate the variant matrix")
    common(p)
    p.add_argument("--variants", default=None,
                   help="comma-separated subset, e.g. A,F (default from config)")
    p.add_argument("--no-payload", action="store_true")
    p.add_argument("--no-push", action="store_true")

    p = sub.add_parser("replay", help="run one deterministic episode to CSV")
    common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--fixed", action="store_true", help="nominal dynamics")
    p.add_argument("--traj-out", default=None)

    return parser


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _cmd_train_reference(cfg: RunConfig, args) -> int:
    art = litmod.train_reference(cfg, seed=cfg.seed)
    _save_reference(cfg, art, cfg.seed)
    print(f"stage 1 done: {art.iterations} iterations, eval lin score "
          f"{art.eval_score:.3f}, level {art.level}")
    return 0


def _cmd_train_policy(cfg: RunConfig, args) -> int:
    tag = args.variant if args.variant is not None else cfg.lit.variant
    variant = VARIANTS[tag]
    art = _load_reference(cfg, cfg.seed, args.force) if variant.has_refs else None
    res = litmod.train_robust(cfg, art, tag, seed=cfg.seed)
    path = _save_robust(cfg, res, cfg.seed)
    status = "diverged" if res.diverged else "ok"
    print(f"stage 2 [{tag}] {status}: {res.iterations} iterations -> {path}")
    return 1 if res.diverged else 0


def _cmd_eval(cfg: RunConfig, args) -> int:
    args.seed_arg = cfg.seed
    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.protocol == "correlation":
        art = _load_reference(cfg, cfg.seed, args.force)
        reports = [evalmod.correlation_report(cfg, art.policy, art.model, s)
                   for s in cfg.eval.seeds]
        evalmod.write_correlation_csvs(reports, cfg.out_dir)
        for rep in reports:
            r = "nan" if rep["pearson_r"] is None else f"{rep['pearson_r']:.3f}"
            print(f"seed {rep['seed']}: status={rep['status']} r={r} "
                  f"pre={rep['pre_err']:.4f} post={rep['post_err']:.4f}")
        return 0
    if args.policy is None:
        print("eval: --policy is required for this protocol", file=sys.stderr)
        return 2
    bundle = _load_bundle(cfg, args)
    if args.protocol == "tracking":
        row, _ = evalmod.run_tracking_suite(cfg, bundle, cfg.seed)
        evalmod.write_csv(os.path.join(cfg.out_dir, "summary.csv"),
                          ["variant", "seed", "scenario", "lin_err", "ang_err",
                           "success_rate", "n_trials"],
                          [[bundle.variant.tag, cfg.seed, row.scenario, row.lin_err,
                            row.ang_err, row.success_rate, row.n_trials]])
        print(f"tracking: lin_err={row.lin_err:.4f} ang_err={row.ang_err:.4f} "
              f"survival={row.success_rate:.2f}")
    elif args.protocol == "payload":
        rows = evalmod.payload_sweep(cfg, bundle, cfg.seed)
        evalmod.write_csv(os.path.join(cfg.out_dir, "payload.csv"),
                          ["variant", "seed", "payload_kg", "n_trials", "successes",
                           "success_rate"],
                          [[bundle.variant.tag, cfg.seed,
                            r.scenario.split("=", 1)[1], r.n_trials,
                            int(round(r.success_rate * r.n_trials)), r.success_rate]
                           for r in rows])
        for r in rows:
            print(f"{r.scenario}: success {r.success_rate:.2f} over {r.n_trials}")
    elif args.protocol == "push":
        records, summary = evalmod.push_grid(cfg, bundle, cfg.seed)
        evalmod.write_csv(os.path.join(cfg.out_dir, "push.csv"),
                          ["variant", "seed", "trial", "push_x", "push_y",
                           "push_step", "survived", "steps_survived"],
                          [[rec.variant, rec.seed, rec.trial, rec.push[0], rec.push[1],
                            rec.push_step, rec.survived, rec.steps_survived]
                           for rec in records])
        print(f"push: survived {summary['survived_total']}/{summary['n']}")
    return 0


def _cmd_ablate(cfg: RunConfig, args) -> int:
    variants = (args.variants.split(",") if args.variants
                else list(cfg.eval.variants))
    for tag in variants:
        if tag not in VARIANTS:
            print(f"ablate: unknown variant {tag!r}", file=sys.stderr)
            return 2
    result = evalmod.ablation_matrix(cfg, variants, list(cfg.eval.seeds), cfg.out_dir,
                                     include_payload=not args.no_payload,
                                     include_push=not args.no_push)
    # correlation series from the first seed's reference artifacts
    if result.stage1:
        first = sorted(result.stage1)[0]
        art = result.stage1[first]
        reports = [evalmod.correlation_report(cfg, art.policy, art.model, s)
                   for s in cfg.eval.seeds]
        evalmod.write_correlation_csvs(reports, cfg.out_dir)
    n_div = sum(1 for r in result.runs if r.diverged)
    print(f"ablate: {len(result.runs)} runs, {n_div} diverged -> {cfg.out_dir}")
    return 0


def _cmd_replay(cfg: RunConfig, args) -> int:
    args.seed_arg = cfg.seed
    bundle = _load_bundle(cfg, args)
    rng = make_rng(cfg.seed, "replay", args.episode_seed)
    if args.fixed:
        params = envmod.nominal_dynamics(cfg.env, 1)
    else:
        params = envmod.sample_dynamics(cfg.env, cfg.rand, rng, 1, fixed=False)
    commands = np.array([[1.0, 0.0, 0.0]])
    batch = litmod.run_episode_batch(cfg, bundle.policy, params, rng, args.steps,
                                     commands, variant=bundle.variant,
                                     ideal=bundle.ideal, model=bundle.model,
                                     stats=bundle.stats, record=True)
    path = args.traj_out or os.path.join(cfg.out_dir, "replay.csv")
    obs = batch.obs_seq[0]
    act = batch.act_seq[0]
    rows = [[t, *obs[t].tolist(), *act[t].tolist()] for t in range(act.shape[0])]
    evalmod.write_csv(path, ["step", "cmd_x", "cmd_y", "cmd_w", "meas_vx", "meas_vy",
                             "meas_w", "prev_ax", "prev_ay", "prev_aw",
                             "act_x", "act_y", "act_w"], rows)
    print(f"replay: survived={bool(batch.survived[0])} "
          f"lin_score={batch.lin_score[0]:.3f} -> {path}")
    return 0


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    try:
        cfg = _resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "train-reference":
            return _cmd_train_reference(cfg, args)
        if args.command == "train-policy":
            return _cmd_train_policy(cfg, args)
        if args.command == "eval":
            return _cmd_eval(cfg, args)
        if args.command == "ablate":
            return _cmd_ablate(cfg, args)
        if args.command == "replay":
            return _cmd_replay(cfg, args)
    except (CheckpointError, ReferenceTrainingError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


def main() -> int:
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
