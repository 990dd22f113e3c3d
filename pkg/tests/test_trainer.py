"""Tests for the training loop, its outputs and resumption."""
import csv
from pathlib import Path

import numpy as np
import pytest

from tempvl.config import load_run_config
from tempvl.services.trainer import METRIC_COLUMNS, RngStreams, Trainer, run
from tempvl.storage.checkpoints import checkpoint_path, list_checkpoints, load_checkpoint

DEFAULT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.toml"


def read_rows(path):
    with path.open(newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


class TestTrainStep:
    def test_same_seed_same_trajectory(self, make_config):
        config = make_config()
        a, b = Trainer(config), Trainer(config)
        for _ in range(2):
            assert a.train_step() == b.train_step()
        for name, param in a.params.items():
            assert np.array_equal(param.data, b.params[name].data)

    def test_different_seed_different_batch(self, make_config):
        a = Trainer(make_config(seed=0)).train_step()
        b = Trainer(make_config(seed=1)).train_step()
        assert a.total != b.total

    def test_step_updates_parameters(self, small_config):
        trainer = Trainer(small_config)
        before = {name: p.data.copy() for name, p in trainer.params.items()}
        trainer.train_step()
        assert trainer.step == 1
        assert trainer.last_lr > 0
        changed = [name for name, p in trainer.params.items() if not np.array_equal(p.data, before[name])]
        assert "video.frame_proj.weight" in changed
        assert "heads.boundary.logits.weight" in changed

    def test_zero_beta_sends_no_gradient_to_localization_heads(self, make_config):
        trainer = Trainer(make_config(beta=0.0))
        breakdown = trainer.train_step()
        assert breakdown.vl > 0 and breakdown.tl > 0
        heads = [name for name in trainer.last_grads if name.startswith(("heads.boundary", "heads.match"))]
        assert heads
        for name in heads:
            assert not np.any(trainer.last_grads[name]), name
        assert np.any(trainer.last_grads["heads.mlm.weight"])

    def test_localization_heads_learn_with_positive_beta(self, small_config):
        trainer = Trainer(small_config)
        trainer.train_step()
        assert np.any(trainer.last_grads["heads.boundary.logits.weight"])
        assert np.any(trainer.last_grads["heads.match.weight"])

    @pytest.mark.parametrize("strategy", ["Sampling", "HardSampling"])
    def test_sampled_video_merges(self, make_config, strategy):
        config = make_config(video_merge={"strategy": strategy, "K": 12, "K_p_min": 1, "K_p_max": 4, "hard_top_m": 2})
        breakdown = Trainer(config).train_step()
        assert np.isfinite(breakdown.total)

    def test_train_and_heldout_seeds_never_overlap(self, small_config):
        trainer = Trainer(small_config)
        trainer.train_step()
        trainer.evaluate()
        assert trainer.ledger.seeds("train") and trainer.ledger.seeds("heldout")
        trainer.ledger.audit()


def test_rng_streams_are_independent_and_restorable():
    streams = RngStreams(7)
    state = streams.state()
    first = streams.data.integers(0, 1000, size=5).tolist()
    assert first != streams.masking.integers(0, 1000, size=5).tolist()
    streams.restore(state)
    assert streams.data.integers(0, 1000, size=5).tolist() == first


class TestRun:
    def test_outputs(self, small_config):
        result = run(small_config)
        rows = read_rows(result.metrics)
        assert rows[0] == METRIC_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
        # eval columns filled only at eval_every and the final step
        assert [bool(r[7]) for r in rows[1:]] == [False, False, True, False, False, True]
        assert (result.run_dir / "config.json").exists()
        assert checkpoint_path(result.run_dir, 3).exists()
        assert result.checkpoint == checkpoint_path(result.run_dir, 6)
        assert sorted(result.reports) == [3, 6]
        assert load_checkpoint(result.checkpoint).step == 6

    def test_zero_steps_writes_initial_checkpoint(self, make_config):
        result = run(make_config(steps=0))
        assert result.checkpoint.name == "ckpt_0.json"
        assert result.checkpoint.exists()
        assert read_rows(result.metrics) == [METRIC_COLUMNS]

    def test_runs_are_byte_identical(self, make_config):
        a = run(make_config("a"))
        b = run(make_config("b"))
        assert a.metrics.read_bytes() == b.metrics.read_bytes()
        params_a, params_b = load_checkpoint(a.checkpoint).params, load_checkpoint(b.checkpoint).params
        assert all(np.array_equal(params_a[name], params_b[name]) for name in params_a)

    def test_resume_reproduces_the_trace(self, small_config):
        result = run(small_config)
        full = result.metrics.read_bytes()
        final = result.checkpoint.read_bytes()
        run(small_config, resume_from=checkpoint_path(result.run_dir, 3))
        assert result.metrics.read_bytes() == full
        assert result.checkpoint.read_bytes() == final

    def test_resume_at_the_last_step_only_checkpoints(self, small_config):
        result = run(small_config)
        again = run(small_config, resume_from=result.checkpoint)
        assert again.history == []
        assert len(read_rows(again.metrics)) == 7

    def test_rerun_drops_checkpoints_of_the_earlier_run(self, make_config):
        first = run(make_config())
        assert checkpoint_path(first.run_dir, 6).exists()
        shorter = run(make_config(steps=3))
        assert shorter.run_dir == first.run_dir
        assert sorted(list_checkpoints(shorter.run_dir)) == [3]


@pytest.mark.slow
def test_losses_fall_over_a_short_run(make_config):
    result = run(make_config("learn", steps=80, warmup_steps=5, eval_every=80))
    totals = [b.total for b in result.history]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])
    mlm = [b.mlm for b in result.history]
    assert np.mean(mlm[-10:]) < np.mean(mlm[:10])


@pytest.mark.slow
def test_default_config_reaches_acceptance_targets(tmp_path):
    config = load_run_config(str(DEFAULT_CONFIG), [f"output_dir={tmp_path / 'default'}"])
    result = run(config)
    summary = result.reports[config.train.steps].summary()
    assert summary["boundary_acc"] >= 0.9
    assert summary["mean_iou"] >= 0.9
    assert summary["t2v_r1"] >= 0.9
    assert summary["alignment_rate"] >= 0.9
