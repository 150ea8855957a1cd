"""Evaluation harness: tracking suites, payload/push sweeps, sigma/error
correlation, and the variant ablation matrix.

Every protocol draws its scenarios (dynamics, commands, pushes) from RNG
streams tagged only by seed and protocol name, never by variant, so
different policies face byte-identical conditions and can be compared
pairwise.  All CSV output uses fixed float formatting; two runs with the
same config and master seed produce byte-identical files.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import dynmodel as dynmod
from . import env as envmod
from . import lit as litmod
from .config import RunConfig, make_rng
from .dynmodel import DynModelParams, SigmaStats
from .lit import VARIANTS, Stage1Artifacts, Variant
from .policy import PolicyParams

Array = np.ndarray


@dataclass
class PolicyBundle:
    """A policy plus whatever stage-1 pieces its variant needs at inference."""

    policy: PolicyParams
    variant: Variant
    ideal: PolicyParams | None = None
    model: DynModelParams | None = None
    stats: SigmaStats | None = None

    @classmethod
    def plain(cls, policy: PolicyParams, tag: str = "A") -> "PolicyBundle":
        return cls(policy=policy, variant=VARIANTS[tag])

    @classmethod
    def from_artifacts(cls, policy: PolicyParams, tag: str,
                       art: Stage1Artifacts) -> "PolicyBundle":
        return cls(policy=policy, variant=VARIANTS[tag], ideal=art.policy,
                   model=art.model, stats=art.stats)


@dataclass
class TrialRecord:
    variant: str
    seed: int
    trial: int
    push: tuple[float, float]
    push_step: int
    survived: bool
    steps_survived: int


@dataclass
class MetricsRow:
    scenario: str
    lin_err: float
    ang_err: float
    success_rate: float
    n_trials: int


def tracking_error(vel_body: Array, omega: Array, commands: Array
                   ) -> tuple[float, float]:
    """Mean squared linear / angular tracking error over a trajectory."""
    vel_body = np.asarray(vel_body, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    commands = np.asarray(commands, dtype=np.float64)
    if vel_body.shape[0] == 0:
        raise ValueError("tracking_error: empty trajectory")
    if not (vel_body.shape[0] == omega.shape[0] == commands.shape[0]):
        raise ValueError("tracking_error: series lengths differ")
    lin = float(np.mean(np.sum((commands[:, 0:2] - vel_body) ** 2, axis=1)))
    ang = float(np.mean((commands[:, 2] - omega) ** 2))
    return lin, ang


def sign_test_p(wins: int, n: int) -> float:
    """One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2)."""
    if not 0 <= wins <= n:
        raise ValueError("sign_test_p: wins must be in [0, n]")
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


def _eval_commands(rng: np.random.Generator, n: int, cfg: RunConfig) -> Array:
    cmd = np.empty((n, 3))
    cmd[:, 0] = rng.uniform(-cfg.eval.cmd_lin, cfg.eval.cmd_lin, n)
    cmd[:, 1] = rng.uniform(-cfg.eval.cmd_lin, cfg.eval.cmd_lin, n)
    cmd[:, 2] = rng.uniform(-cfg.eval.cmd_ang, cfg.eval.cmd_ang, n)
    return cmd


def _run_bundle(cfg: RunConfig, bundle: PolicyBundle, params, rng, steps, commands,
                **kwargs) -> litmod.EpisodeBatch:
    return litmod.run_episode_batch(
        cfg, bundle.policy, params, rng, steps, commands,
        variant=bundle.variant, ideal=bundle.ideal, model=bundle.model,
        stats=bundle.stats, **kwargs)


# ---------------------------------------------------------------------------
# protocols


def run_tracking_suite(cfg: RunConfig, bundle: PolicyBundle, seed: int
                       ) -> tuple[MetricsRow, litmod.EpisodeBatch]:
    """Tracking errors under randomized dynamics; scenarios paired by seed."""
    n = cfg.eval.episodes
    dyn_rng = make_rng(seed, "suite-dyn")
    params = envmod.sample_dynamics(cfg.env, cfg.rand, dyn_rng, n, fixed=False)
    run_rng = make_rng(seed, "suite-run")
    commands = _eval_commands(run_rng, n, cfg)
    batch = _run_bundle(cfg, bundle, params, run_rng, cfg.eval.episode_steps, commands,
                        command_hold=cfg.eval.command_hold_steps,
                        command_lin=cfg.eval.cmd_lin, command_ang=cfg.eval.cmd_ang)
    row = MetricsRow(scenario="randomized-tracking",
                     lin_err=float(batch.lin_err.mean()),
                     ang_err=float(batch.ang_err.mean()),
                     success_rate=float(batch.survived.mean()),
                     n_trials=n)
    return row, batch


def payload_sweep(cfg: RunConfig, bundle: PolicyBundle, seed: int
                  ) -> list[MetricsRow]:
    """Success rate walking forward under payloads extending past training."""
    if max(cfg.eval.payload_grid) <= cfg.rand.payload_hi:
        raise ValueError("payload_sweep: grid must extend beyond the training range")
    rows = []
    for i, payload in enumerate(cfg.eval.payload_grid):
        n = cfg.eval.payload_trials
        dyn_rng = make_rng(seed, "payload-dyn", i)
        params = envmod.sample_dynamics(cfg.env, cfg.rand, dyn_rng, n, fixed=False)
        params.payload[:] = payload
        run_rng = make_rng(seed, "payload-run", i)
        commands = np.tile(np.array([1.0, 0.0, 0.0]), (n, 1))
        batch = _run_bundle(cfg, bundle, params, run_rng, cfg.eval.episode_steps,
                            commands)
        rows.append(MetricsRow(scenario=f"payload={payload:g}",
                               lin_err=float(batch.lin_err.mean()),
                               ang_err=float(batch.ang_err.mean()),
                               success_rate=float(batch.survived.mean()),
                               n_trials=n))
    return rows


def push_grid(cfg: RunConfig, bundle: PolicyBundle, seed: int
              ) -> tuple[list[TrialRecord], dict]:
    """One randomized mid-episode push per trial; survival by push magnitude."""
    n = cfg.eval.push_samples
    if cfg.eval.push_range < cfg.env.push_max:
        raise ValueError("push_grid: eval push range below the training range")
    dyn_rng = make_rng(seed, "push-dyn")
    params = envmod.sample_dynamics(cfg.env, cfg.rand, dyn_rng, n, fixed=False)
    scen_rng = make_rng(seed, "push-scenario")
    # stress protocol: the trial's constant external force extends beyond the
    # training range, so recovery quality decides marginal cases
    params.f_ext[:] = scen_rng.uniform(-cfg.eval.push_f_ext_max,
                                       cfg.eval.push_f_ext_max, (n, 2))
    deltas = scen_rng.uniform(-cfg.eval.push_range, cfg.eval.push_range, (n, 2))
    push_steps = scen_rng.integers(cfg.eval.push_step_lo, cfg.eval.push_step_hi + 1, n)
    run_rng = make_rng(seed, "push-run")
    commands = np.tile(np.array([1.0, 0.0, 0.0]), (n, 1))
    batch = _run_bundle(cfg, bundle, params, run_rng, cfg.eval.episode_steps, commands,
                        push_step=push_steps, push_delta=deltas)
    records = [TrialRecord(variant=bundle.variant.tag, seed=seed, trial=i,
                           push=(float(deltas[i, 0]), float(deltas[i, 1])),
                           push_step=int(push_steps[i]),
                           survived=bool(batch.survived[i]),
                           steps_survived=int(batch.steps_alive[i]))
               for i in range(n)]
    mags = np.sqrt(np.sum(deltas ** 2, axis=1))
    edges = list(cfg.eval.push_bins) + [float("inf")]
    summary = {"survived_total": int(batch.survived.sum()), "n": n, "bins": []}
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (mags >= lo) & (mags < hi)
        summary["bins"].append({
            "lo": lo, "hi": hi, "n": int(sel.sum()),
            "survival": float(batch.survived[sel].mean()) if sel.any() else float("nan"),
        })
    return records, summary


def correlation_report(cfg: RunConfig, ideal: PolicyParams, model: DynModelParams,
                       seed: int) -> dict:
    """Sigma vs prediction-error series around a disturbance onset.

    Returns the paired series, the Pearson correlation (status "degenerate"
    when either series has zero variance), and pre/post-onset error means.
    """
    onset = cfg.eval.probe_onset
    steps = cfg.eval.probe_steps
    probe_rng = make_rng(seed, "probe")
    angle = probe_rng.uniform(0.0, 2.0 * np.pi)
    params = envmod.nominal_dynamics(cfg.env, 1)
    params.f_ext[0] = cfg.eval.probe_f_ext * np.array([np.cos(angle), np.sin(angle)])
    params.f_ext_onset[0] = onset
    commands = np.array([[1.0, 0.0, 0.0]])
    batch = litmod.run_episode_batch(cfg, ideal, params, probe_rng, steps, commands,
                                     record=True)
    sigma_bar, err = dynmod.sigma_error_probe(model, batch.obs_seq[0], batch.act_seq[0],
                                              onset, aggregate=cfg.eval.sigma_aggregate)
    pre_err = float(err[:onset].mean())
    post_err = float(err[onset:].mean())
    if sigma_bar.std() == 0.0 or err.std() == 0.0:
        status, r = "degenerate", None
    else:
        status = "ok"
        r = float(np.corrcoef(sigma_bar, err)[0, 1])
    return {"seed": seed, "sigma": sigma_bar, "err": err, "onset": onset,
            "pearson_r": r, "status": status,
            "pre_err": pre_err, "post_err": post_err}


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x) -> str:
    if isinstance(x, bool) or isinstance(x, (np.bool_,)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) or isinstance(x, np.floating):
        return format(float(x), ".12g")
    return str(x)


def write_csv(path: str, header: list[str], rows: list) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass
class AblationRun:
    variant: str
    seed: int
    diverged: bool
    tracking: MetricsRow | None
    final_lin_score: float
    final_ang_score: float
    final_level: int
    payload_rows: list = field(default_factory=list)
    push_summary: dict | None = None
    push_survived: int = 0
    curves: list = field(default_factory=list)


@dataclass
class AblationResult:
    runs: list
    stage1: dict            # seed -> Stage1Artifacts
    stage2: dict            # (variant, seed) -> Stage2Result


def _effective_seed(master_seed: int, seed: int) -> int:
    # fold the master seed into each per-run seed so reseeding the master
    # reshuffles every run
    return (master_seed * 100003 + seed) & 0x7FFFFFFF


def ablation_matrix(cfg: RunConfig, variants: list[str], seeds: list[int],
                    out_dir: str, include_payload: bool = True,
                    include_push: bool = True,
                    stage1_cache: dict | None = None) -> AblationResult:
    """Train and evaluate every (variant, seed) pair; write consolidated CSVs.

    Individual run failures are recorded as diverged rows and the matrix
    continues.  Stage-1 artifacts are trained once per seed and shared by all
    variants of that seed.
    """
    for tag in variants:
        if tag not in VARIANTS:
            raise ValueError(f"ablation_matrix: unknown variant {tag!r}")
    os.makedirs(out_dir, exist_ok=True)
    stage1: dict[int, Stage1Artifacts] = {} if stage1_cache is None else stage1_cache
    stage2: dict[tuple[str, int], litmod.Stage2Result] = {}
    runs: list[AblationRun] = []

    needs_stage1 = any(VARIANTS[t].has_refs for t in variants)
    for seed in seeds:
        eff = _effective_seed(cfg.seed, seed)
        if needs_stage1 and seed not in stage1:
            stage1[seed] = litmod.train_reference(cfg, seed=eff)
        art = stage1.get(seed)
        for tag in variants:
            variant = VARIANTS[tag]
            try:
                res = litmod.train_robust(cfg, art if variant.has_refs else None,
                                          tag, seed=eff)
            except Exception:
                runs.append(AblationRun(variant=tag, seed=seed, diverged=True,
                                        tracking=None, final_lin_score=float("nan"),
                                        final_ang_score=float("nan"), final_level=-1))
                continue
            stage2[(tag, seed)] = res
            run = AblationRun(
                variant=tag, seed=seed, diverged=res.diverged, tracking=None,
                final_lin_score=res.curves[-1]["lin_score"] if res.curves else float("nan"),
                final_ang_score=res.curves[-1]["ang_score"] if res.curves else float("nan"),
                final_level=res.curves[-1]["level"] if res.curves else -1,
                curves=res.curves)
            if not res.diverged:
                bundle = (PolicyBundle.from_artifacts(res.policy, tag, art)
                          if variant.has_refs else PolicyBundle.plain(res.policy, tag))
                run.tracking, _ = run_tracking_suite(cfg, bundle, eff)
                if include_payload:
                    run.payload_rows = payload_sweep(cfg, bundle, eff)
                if include_push:
                    _, summary = push_grid(cfg, bundle, eff)
                    run.push_summary = summary
                    run.push_survived = summary["survived_total"]
            runs.append(run)

    _write_ablation_csvs(cfg, runs, out_dir)
    return AblationResult(runs=runs, stage1=stage1, stage2=stage2)


def _write_ablation_csvs(cfg: RunConfig, runs: list, out_dir: str) -> None:
    curve_rows = []
    summary_rows = []
    payload_rows = []
    push_rows = []
    for run in runs:
        for pt in run.curves:
            curve_rows.append([pt["iter"], run.variant, run.seed,
                               pt["lin_score"], pt["ang_score"], pt["level"]])
        tr = run.tracking
        summary_rows.append([
            run.variant, run.seed,
            tr.lin_err if tr else float("nan"),
            tr.ang_err if tr else float("nan"),
            run.final_lin_score, run.final_ang_score, run.final_level,
            run.push_survived, run.diverged,
        ])
        for row in run.payload_rows:
            payload_rows.append([run.variant, run.seed,
                                 row.scenario.split("=", 1)[1], row.n_trials,
                                 int(round(row.success_rate * row.n_trials)),
                                 row.success_rate, row.lin_err])
        if run.push_summary:
            for b in run.push_summary["bins"]:
                push_rows.append([run.variant, run.seed, b["lo"], b["hi"],
                                  b["n"], b["survival"]])
    write_csv(os.path.join(out_dir, "curves.csv"),
              ["iter", "variant", "seed", "lin_score", "ang_score", "level"],
              curve_rows)
    write_csv(os.path.join(out_dir, "summary.csv"),
              ["variant", "seed", "lin_err", "ang_err", "final_lin_score",
               "final_ang_score", "final_level", "push_survived", "diverged"],
              summary_rows)
    write_csv(os.path.join(out_dir, "payload.csv"),
              ["variant", "seed", "payload_kg", "n_trials", "successes",
               "success_rate", "lin_err"], payload_rows)
    write_csv(os.path.join(out_dir, "push.csv"),
              ["variant", "seed", "bin_lo", "bin_hi", "n", "survival"], push_rows)


def write_correlation_csvs(reports: list[dict], out_dir: str) -> None:
    series_rows = []
    summary_rows = []
    for rep in reports:
        for t in range(rep["sigma"].shape[0]):
            series_rows.append([rep["seed"], t, rep["sigma"][t], rep["err"][t],
                                int(t >= rep["onset"])])
        summary_rows.append([rep["seed"], rep["status"],
                             rep["pearson_r"] if rep["pearson_r"] is not None
                             else float("nan"),
                             rep["pre_err"], rep["post_err"]])
    write_csv(os.path.join(out_dir, "correlation.csv"),
              ["seed", "step", "sigma_mean", "pred_error", "post_onset"],
              series_rows)
    write_csv(os.path.join(out_dir, "correlation_summary.csv"),
              ["seed", "status", "pearson_r", "pre_err", "post_err"],
              summary_rows)
