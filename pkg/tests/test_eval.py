import os

import numpy as np
import pytest

from littrack import dynmodel as dm
from littrack import env as envmod
from littrack import eval as evalmod
from littrack import lit, policy as polmod
from littrack.config import RunConfig, make_rng
from littrack.dynmodel import SigmaStats
from littrack.env import OBS_DIM
from littrack.eval import (PolicyBundle, ablation_matrix, correlation_report,
                           payload_sweep, push_grid, run_tracking_suite,
                           sign_test_p, tracking_error, write_csv)


def micro_cfg():
    cfg = RunConfig()
    cfg.ppo.n_envs = 8
    cfg.ppo.rollout_steps = 20
    cfg.lit.stage1_iters = 3
    cfg.lit.stage2_iters = 3
    cfg.lit.stage1_require_plateau = False
    cfg.lit.stage1_min_score = 0.0
    cfg.lit.stage1_target_score = 2.0
    cfg.lit.stage1_eval_episodes = 4
    cfg.lit.calib_rollouts = 1
    cfg.eval.episodes = 6
    cfg.eval.episode_steps = 60
    cfg.eval.command_hold_steps = 30
    cfg.eval.payload_grid = [0.8, 1.5]
    cfg.eval.payload_trials = 5
    cfg.eval.push_samples = 20
    cfg.eval.push_step_lo = 10
    cfg.eval.push_step_hi = 20
    cfg.eval.probe_onset = 20
    cfg.eval.probe_steps = 50
    cfg.eval.seeds = [1, 2]
    return cfg


def plain_policy(seed=0, cfg=None):
    cfg = cfg or micro_cfg()
    rng = make_rng(seed, "evaltest")
    pol = polmod.make_policy(rng, cfg.lit.history_len, has_refs=False,
                             enc_hidden=[16], latent_dim=8, actor_hidden=[16],
                             init_log_std=np.log(0.5))
    return PolicyBundle.plain(pol)


def runaway_policy(cfg):
    """Constant full-throttle policy; speed diverges past the bound."""
    bundle = plain_policy(1, cfg)
    for layer in bundle.policy.trunk.layers:
        layer.w[:] = 0.0
        layer.b[:] = 0.0
    bundle.policy.trunk.layers[-1].b[:] = np.array([5.0, 5.0, 0.0])
    return bundle


class TestTrackingError:
    def test_perfect_tracking_is_zero(self):
        vb = np.tile([1.0, 0.5], (20, 1))
        om = np.full(20, -0.3)
        cmd = np.tile([1.0, 0.5, -0.3], (20, 1))
        assert tracking_error(vb, om, cmd) == (0.0, 0.0)

    def test_constant_half_offset_gives_quarter(self):
        vb = np.zeros((30, 2))
        vb[:, 0] = 0.5
        om = np.zeros(30)
        cmd = np.zeros((30, 3))
        lin, ang = tracking_error(vb, om, cmd)
        np.testing.assert_allclose(lin, 0.25, atol=1e-15)
        assert ang == 0.0

    def test_matches_per_step_summation_oracle(self):
        rng = make_rng(0, "terr")
        vb = rng.standard_normal((50, 2))
        om = rng.standard_normal(50)
        cmd = rng.standard_normal((50, 3))
        lin, ang = tracking_error(vb, om, cmd)
        lin_oracle = sum(float((cmd[t, 0] - vb[t, 0]) ** 2 + (cmd[t, 1] - vb[t, 1]) ** 2)
                         for t in range(50)) / 50
        ang_oracle = sum(float((cmd[t, 2] - om[t]) ** 2) for t in range(50)) / 50
        np.testing.assert_allclose(lin, lin_oracle, atol=1e-12)
        np.testing.assert_allclose(ang, ang_oracle, atol=1e-12)

    def test_reflection_invariance(self):
        rng = make_rng(1, "terr")
        vb = rng.standard_normal((40, 2))
        om = rng.standard_normal(40)
        cmd = rng.standard_normal((40, 3))
        ref_vb = vb * np.array([1.0, -1.0])
        ref_om = -om
        ref_cmd = cmd * np.array([1.0, -1.0, -1.0])
        assert tracking_error(vb, om, cmd) == tracking_error(ref_vb, ref_om, ref_cmd)

    def test_empty_trajectory_rejected(self):
        with pytest.raises(ValueError):
            tracking_error(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))


class TestSignTest:
    def test_known_binomial_tails(self):
        np.testing.assert_allclose(sign_test_p(5, 5), 1 / 32)
        np.testing.assert_allclose(sign_test_p(4, 5), 6 / 32)
        np.testing.assert_allclose(sign_test_p(0, 5), 1.0)

    def test_five_of_five_beats_alpha(self):
        assert sign_test_p(5, 5) < 0.05
        assert sign_test_p(4, 5) > 0.05

    def test_invalid_wins_rejected(self):
        with pytest.raises(ValueError):
            sign_test_p(6, 5)


class TestTrackingSuite:
    def test_rows_and_pairing(self):
        cfg = micro_cfg()
        bundle = plain_policy(2, cfg)
        row1, batch1 = run_tracking_suite(cfg, bundle, seed=5)
        row2, batch2 = run_tracking_suite(cfg, bundle, seed=5)
        assert row1.lin_err == row2.lin_err
        assert row1.n_trials == cfg.eval.episodes
        # a different policy faces the identical scenarios: same dynamics draw
        # stream means identical failures pattern is possible; just check the
        # suite is deterministic per seed and policy
        np.testing.assert_array_equal(batch1.lin_err, batch2.lin_err)


class TestPayloadSweep:
    def test_runaway_policy_never_survives(self):
        cfg = micro_cfg()
        cfg.env.v_limit = 0.5   # full-throttle policy crosses this immediately
        rows = payload_sweep(cfg, runaway_policy(cfg), seed=0)
        assert len(rows) == len(cfg.eval.payload_grid)
        for row in rows:
            assert row.success_rate == 0.0
            assert row.n_trials == cfg.eval.payload_trials

    def test_deterministic_tables(self):
        cfg = micro_cfg()
        bundle = plain_policy(3, cfg)
        a = payload_sweep(cfg, bundle, seed=1)
        b = payload_sweep(cfg, bundle, seed=1)
        assert [(r.scenario, r.success_rate, r.lin_err) for r in a] == \
            [(r.scenario, r.success_rate, r.lin_err) for r in b]

    def test_grid_must_extend_beyond_training_range(self):
        cfg = micro_cfg()
        cfg.eval.payload_grid = [0.1, 0.3]
        with pytest.raises(ValueError):
            payload_sweep(cfg, plain_policy(4, cfg), seed=0)


class TestPushGrid:
    def test_record_shape_and_bounds(self):
        cfg = micro_cfg()
        records, summary = push_grid(cfg, plain_policy(5, cfg), seed=2)
        assert len(records) == cfg.eval.push_samples
        for rec in records:
            assert abs(rec.push[0]) <= cfg.eval.push_range
            assert abs(rec.push[1]) <= cfg.eval.push_range
            assert cfg.eval.push_step_lo <= rec.push_step <= cfg.eval.push_step_hi
        assert summary["n"] == cfg.eval.push_samples
        assert summary["survived_total"] == sum(r.survived for r in records)
        assert len(summary["bins"]) == len(cfg.eval.push_bins)

    def test_zero_push_matches_unpushed_episode(self):
        cfg = micro_cfg()
        bundle = plain_policy(6, cfg)
        n = 4
        params = envmod.sample_dynamics(cfg.env, cfg.rand, make_rng(3, "pd"), n)
        cmd = np.tile([1.0, 0.0, 0.0], (n, 1))
        base = lit.run_episode_batch(cfg, bundle.policy, params,
                                     make_rng(4, "pr"), 40, cmd)
        pushed = lit.run_episode_batch(cfg, bundle.policy, params,
                                       make_rng(4, "pr"), 40, cmd,
                                       push_step=np.full(n, 10),
                                       push_delta=np.zeros((n, 2)))
        np.testing.assert_array_equal(base.survived, pushed.survived)
        np.testing.assert_array_equal(base.lin_err, pushed.lin_err)

    def test_eval_range_below_training_rejected(self):
        cfg = micro_cfg()
        cfg.eval.push_range = 0.5 * cfg.env.push_max
        with pytest.raises(ValueError):
            push_grid(cfg, plain_policy(7, cfg), seed=0)


class TestCorrelationReport:
    def test_synthetic_perfect_correlation(self):
        sigma = np.linspace(0.1, 1.0, 50)
        err = 3.0 * sigma
        r = float(np.corrcoef(sigma, err)[0, 1])
        np.testing.assert_allclose(r, 1.0, atol=1e-12)

    def test_degenerate_sigma_flagged_not_nan(self):
        cfg = micro_cfg()
        rng = make_rng(8, "corr")
        ideal = polmod.make_policy(rng, cfg.lit.history_len, has_refs=False,
                                   enc_hidden=[16], latent_dim=8, actor_hidden=[16],
                                   init_log_std=np.log(0.5))
        model = dm.make_dynmodel(rng, [16], 1e-4)
        # constant sigma head: zero weights everywhere upstream
        for mlp in (model.trunk, model.sigma_head):
            for layer in mlp.layers:
                layer.w[:] = 0.0
                layer.b[:] = 0.0
        rep = correlation_report(cfg, ideal, model, seed=0)
        assert rep["status"] == "degenerate"
        assert rep["pearson_r"] is None

    def test_report_fields_and_series_lengths(self):
        cfg = micro_cfg()
        rng = make_rng(9, "corr")
        ideal = polmod.make_policy(rng, cfg.lit.history_len, has_refs=False,
                                   enc_hidden=[16], latent_dim=8, actor_hidden=[16],
                                   init_log_std=np.log(0.5))
        model = dm.make_dynmodel(rng, [16], 1e-4)
        rep = correlation_report(cfg, ideal, model, seed=1)
        assert rep["sigma"].shape == rep["err"].shape == (cfg.eval.probe_steps,)
        assert rep["status"] in ("ok", "degenerate")
        assert np.isfinite(rep["pre_err"]) and np.isfinite(rep["post_err"])


class TestCsv:
    def test_write_csv_deterministic_formatting(self, tmp_path):
        path = os.path.join(tmp_path, "t.csv")
        write_csv(path, ["a", "b", "c"], [[1, 0.1 + 0.2, True], [2, float("nan"), False]])
        text = open(path).read()
        assert text == "a,b,c\n1,0.3,1\n2,nan,0\n"


class TestAblationMatrix:
    def test_requested_variants_only_and_csv_files(self, tmp_path):
        cfg = micro_cfg()
        out = str(tmp_path / "abl")
        result = ablation_matrix(cfg, ["A", "F"], [1, 2], out)
        tags = sorted({r.variant for r in result.runs})
        assert tags == ["A", "F"]
        assert len(result.runs) == 4      # 2 variants x 2 seeds
        for name in ("curves.csv", "summary.csv", "payload.csv", "push.csv"):
            assert os.path.exists(os.path.join(out, name))
        header = open(os.path.join(out, "curves.csv")).readline().strip()
        assert header == "iter,variant,seed,lin_score,ang_score,level"
        summary = open(os.path.join(out, "summary.csv")).read().splitlines()
        assert summary[0] == ("variant,seed,lin_err,ang_err,final_lin_score,"
                              "final_ang_score,final_level,push_survived,diverged")
        assert len(summary) == 1 + 4

    def test_unknown_variant_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            ablation_matrix(micro_cfg(), ["A", "Z"], [1], str(tmp_path))

    def test_stage1_cache_reused(self, tmp_path):
        cfg = micro_cfg()
        cache = {}
        ablation_matrix(cfg, ["F"], [1], str(tmp_path / "x"), stage1_cache=cache,
                        include_payload=False, include_push=False)
        art = cache[1]
        result = ablation_matrix(cfg, ["F"], [1], str(tmp_path / "y"),
                                 stage1_cache=cache,
                                 include_payload=False, include_push=False)
        assert result.stage1[1] is art
