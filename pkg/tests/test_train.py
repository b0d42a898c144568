import json
import math
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from ssmreduce.exceptions import ConfigError
from ssmreduce.ssm import ModelConfig, init_model
from ssmreduce.tasks import Dataset, delayed_copy, teacher_lti
from ssmreduce.train import (
    LR_FLOOR,
    AdamState,
    ReductionPolicy,
    SchedulerState,
    TrainConfig,
    TrainingFailure,
    adam_step,
    attempt_steps,
    baseline_config,
    evaluate,
    lr_schedule,
    reduction_scheduler_tick,
    scan_flops,
    step_time_ms,
    top_k_mean,
    train_run,
)


def cfg(**kw):
    base = dict(depth=1, H=4, n=8, steps=60, batch=8, base_lr=1e-2, seed=0,
                task={"name": "teacher_lti", "r_true": 2, "L": 16, "n_train": 64, "n_test": 32},
                policy=ReductionPolicy(tau=0.0, enabled=False), track_every=0)
    base.update(kw)
    return TrainConfig(**base)


class TestLrSchedule:
    c = TrainConfig(depth=1, H=4, n=4, steps=1000, batch=1, base_lr=1e-3, warmup_fraction=0.1)

    def test_start(self):
        assert lr_schedule(0, self.c) == 1e-7

    def test_warmup_end(self):
        assert lr_schedule(100, self.c) == pytest.approx(1e-3, rel=1e-12)

    def test_final(self):
        assert abs(lr_schedule(999, self.c) - 1e-7) <= 1e-9

    def test_shape(self):
        lrs = [lr_schedule(s, self.c) for s in range(1000)]
        assert all(a < b for a, b in zip(lrs[:100], lrs[1:101]))
        assert all(a >= b for a, b in zip(lrs[100:], lrs[101:]))
        assert lrs[550] == pytest.approx(LR_FLOOR + (1e-3 - LR_FLOOR) * 0.5 * (1 + math.cos(math.pi * 450 / 899)))

    def test_constant(self):
        c = replace(self.c, lr_schedule="constant", base_lr=4e-4)
        assert {lr_schedule(s, c) for s in (0, 10, 999)} == {4e-4}


class TestAdam:
    def test_zero_gradient(self):
        p = {"embed.W": np.array([1.0, -2.0])}
        adam_step(p, {"embed.W": np.zeros(2)}, AdamState(), 0.1)
        assert np.array_equal(p["embed.W"], [1.0, -2.0])

    def test_first_step(self):
        p = {"embed.W": np.array([1.0])}
        adam_step(p, {"embed.W": np.array([1.0])}, AdamState(), 0.1)
        # bias-corrected first step is lr * g / (|g| + eps)
        assert p["embed.W"][0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-12)

    def test_weight_decay_only(self):
        p = {"embed.W": np.array([2.0])}
        adam_step(p, {"embed.W": np.zeros(1)}, AdamState(), 0.1, weight_decay=0.05)
        assert p["embed.W"][0] == pytest.approx(2.0 * (1 - 0.1 * 0.05))

    def test_recurrent_lr_factor_and_no_decay(self):
        p = {"blocks.0.nu": np.array([1.0]), "head.W": np.array([1.0])}
        g = {"blocks.0.nu": np.array([1.0]), "head.W": np.array([1.0])}
        adam_step(p, g, AdamState(), 0.1, lr_factor=0.5, weight_decay=0.1)
        assert p["blocks.0.nu"][0] == pytest.approx(1.0 - 0.05, abs=1e-8)
        assert p["head.W"][0] == pytest.approx(1.0 * (1 - 0.01) - 0.1, abs=1e-8)

    def test_non_finite_skips(self):
        p = {"embed.W": np.array([1.0]), "head.W": np.array([1.0])}
        st = AdamState()
        assert not adam_step(p, {"embed.W": np.array([1.0]), "head.W": np.array([np.inf])}, st, 0.1)
        assert p["embed.W"][0] == 1.0 and st.t == 0

    def test_reset_restarts_bias_correction(self):
        p = {"embed.W": np.array([0.0])}
        st = AdamState()
        for _ in range(5):
            adam_step(p, {"embed.W": np.array([1.0])}, st, 0.1)
        st.reset(["embed.W"])
        before = p["embed.W"][0]
        adam_step(p, {"embed.W": np.array([1.0])}, st, 0.1)
        assert before - p["embed.W"][0] == pytest.approx(0.1, rel=1e-6)


class TestAttempts:
    def test_equidistant_in_warmup(self):
        assert attempt_steps(ReductionPolicy(tau=0.1), 1000, 100) == [25, 50, 75, 100]

    def test_windowed(self):
        p = ReductionPolicy(tau=0.1, attempts={"kind": "windowed", "start": 1000, "end": 3000, "k": 2})
        assert attempt_steps(p, 50_000, 5000) == [2000, 3000]

    def test_fixed_interval(self):
        p = ReductionPolicy(tau=0.1, attempts={"kind": "fixed_interval", "every": 300})
        assert attempt_steps(p, 1000, 0) == [300, 600, 900]

    def test_disabled(self):
        assert attempt_steps(ReductionPolicy(tau=0.1, enabled=False), 1000, 100) == []

    def test_invalid(self):
        with pytest.raises(ConfigError):
            ReductionPolicy(tau=2.0)
        with pytest.raises(ConfigError):
            ReductionPolicy(attempts={"kind": "sometimes"})
        with pytest.raises(ConfigError):
            ReductionPolicy(frac_gate=0.0)


def model_with_negligible_tail(n=16, keep=4, H=3, seed=0):
    m = init_model(ModelConfig(d_in=2, d_out=2, H=H, n=n), seed=seed)
    m.blocks[0].B[keep:] = 0.0
    return m


class TestScheduler:
    def test_disabled_policy(self):
        m = model_with_negligible_tail()
        p = ReductionPolicy(tau=0.5, enabled=False)
        st = SchedulerState(attempt_steps(p, 100, 10))
        assert all(reduction_scheduler_tick(s, m, p, None, st) == [] for s in range(100))

    def test_executes_only_on_schedule(self):
        m = model_with_negligible_tail()
        p = ReductionPolicy(tau=1e-6)
        st = SchedulerState([10])
        assert reduction_scheduler_tick(9, m, p, None, st) == []
        ev = reduction_scheduler_tick(10, m, p, None, st)
        assert len(ev) == 1 and ev[0].executed and m.orders == [4]
        assert ev[0].r < p.frac_gate * ev[0].n_before

    def test_gate_blocks(self):
        m = init_model(ModelConfig(d_in=2, d_out=2, H=3, n=8), seed=1)
        p = ReductionPolicy(tau=1e-12)
        st = SchedulerState([5, 6])
        for s in (5, 6):
            ev = reduction_scheduler_tick(s, m, p, None, st)
            assert not ev[0].executed
        assert m.orders == [8]

    def test_min_steps_between(self):
        m = init_model(ModelConfig(d_in=2, d_out=2, H=3, n=16), seed=0)
        p = ReductionPolicy(tau=0.3, min_steps_between=50)
        st = SchedulerState([10, 20])
        assert reduction_scheduler_tick(10, m, p, None, st)[0].executed
        ev = reduction_scheduler_tick(20, m, p, None, st)[0]
        assert not ev.executed and "min_steps_between" in ev.diagnostic


class TestTrainRun:
    def test_tau_zero_keeps_order(self):
        rec = train_run(cfg(policy=ReductionPolicy(tau=0.0)))
        assert rec.final_orders == [8] and rec.executed_events == []
        assert len(rec.losses) == 60 and all(np.isfinite(rec.losses))

    def test_invariants_with_reduction(self):
        c = cfg(steps=100, n=16, policy=ReductionPolicy(tau=0.2))
        rec = train_run(c)
        allowed = set(attempt_steps(c.policy, c.steps, c.warmup_steps))
        assert {e.step for e in rec.events} <= allowed
        assert all(e.r < 0.95 * e.n_before for e in rec.executed_events)
        orders = [o[0] for o in rec.orders]
        assert all(a >= b for a, b in zip(orders, orders[1:]))
        assert rec.executed_events and rec.final_orders[0] < 16

    def test_deterministic(self):
        c = cfg(steps=30, dropout=0.1, policy=ReductionPolicy(tau=0.2), n=12)
        with threadpool_limits(1):
            a = train_run(c).losses
            b = train_run(c).losses
        assert a == b

    def test_artifacts(self, tmp_path):
        c = cfg(steps=20, eval_every=10, checkpoint_every=10, track_every=5,
                policy=ReductionPolicy(tau=0.2), n=12)
        rec = train_run(c, tmp_path)
        lines = (tmp_path / "metrics.ndjson").read_text().splitlines()
        assert len(lines) == 20
        assert set(json.loads(lines[0])) == {"step", "loss", "acc", "lr", "wall_ms", "orders"}
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["final_orders"] == rec.final_orders and summary["metric"] == "nmse"
        assert (tmp_path / "checkpoints" / "step_0000010" / "manifest.json").is_file()
        assert (tmp_path / "checkpoints" / "final" / "manifest.json").is_file()
        assert (tmp_path / "hsv_trajectory.csv").is_file()
        assert isinstance(json.loads((tmp_path / "reduction_events.json").read_text()), list)

    def test_failure_writes_postmortem(self, tmp_path):
        d = teacher_lti(0, r_true=2, L=8, n_train=16, n_test=8)
        d.train_x[:] = np.nan
        with pytest.raises(TrainingFailure) as err:
            train_run(cfg(steps=5), tmp_path, data=d)
        assert err.value.checkpoint and (tmp_path / "postmortem" / "manifest.json").is_file()

    def test_classification_eval(self):
        d = delayed_copy(0, L=8, k=2, V=3, n_train=64, n_test=30)
        rec = train_run(cfg(steps=5, task={"name": "delayed_copy"}), data=d)
        assert 0.0 <= rec.final_eval["acc"] <= 1.0
        assert rec.summary()["metric"] == "acc"


class TestHelpers:
    def test_top_k_mean(self):
        assert top_k_mean([0.1, 0.9, 0.5, 0.7, 0.3]) == pytest.approx(0.7)
        assert top_k_mean([0.1, 0.9, 0.5], k=2, higher_is_better=False) == pytest.approx(0.3)
        with pytest.raises(ValueError):
            top_k_mean([])

    def test_baseline_config(self):
        c = baseline_config(cfg(policy=ReductionPolicy(tau=0.1)), 5.6)
        assert c.n == 6 and not c.policy.enabled

    def test_flops_linear_in_n(self):
        assert scan_flops(128, 16, 256, 8) * 2 == scan_flops(256, 16, 256, 8)

    def test_step_time(self):
        d = teacher_lti(0, r_true=2, L=8, n_train=16, n_test=8)
        m = init_model(ModelConfig(d_in=1, d_out=1, H=2, n=4, pooling="none"))
        t = step_time_ms(m, d, 4, steps=5, warmup=1)
        assert t.shape == (5,) and np.all(t > 0)

    def test_evaluate_regression(self):
        d = teacher_lti(0, r_true=2, L=8, n_train=16, n_test=8)
        m = init_model(ModelConfig(d_in=1, d_out=1, H=2, n=4, pooling="none"))
        m.head_W[:] = 0.0
        assert evaluate(m, d)["nmse"] == pytest.approx(1.0)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            cfg(H=0)
        with pytest.raises(ConfigError):
            cfg(warmup_fraction=1.0)
        with pytest.raises(ConfigError):
            cfg(lr_schedule="step")
