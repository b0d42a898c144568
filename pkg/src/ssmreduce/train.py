"""Adam, learning-rate schedules, the reduction scheduler and the training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, SSMReduceError
from .lti import gramian_diagonal
from .reduction import reduce_system
from .ssm import (LruModel, ModelConfig, backward, extract_system, forward, init_model,
                  is_recurrent_param, loss_value, write_back)
from .tasks import Dataset, make_task
from .tracking import TrajectoryLog, hankel_operator, write_tracking_csv

log = logging.getLogger(__name__)

LR_FLOOR = 1e-7
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moments per flat parameter name.

    ``t`` counts applied updates. ``steps`` holds a per-tensor count so a
    tensor whose moments were reset restarts its bias correction.
    """

    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)

    def reset(self, names: Sequence[str]):
        for k in names:
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.steps.pop(k, None)


def adam_step(params, grads, state: AdamState, lr, lr_factor=1.0, weight_decay=0.0,
              recurrent=is_recurrent_param):
    """One AdamW update in place on the ``params`` dict. Returns False when skipped.

    Recurrent parameters use ``lr * lr_factor`` and no weight decay.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s; skipping update", k)
            return False
    state.t += 1
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = state.m.get(k)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
            state.steps[k] = 0
        t = state.steps.get(k, 0) + 1
        state.steps[k] = t
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * state.v[k] + (1 - BETA2) * g * g
        state.m[k], state.v[k] = m, v
        update = (m / (1 - BETA1 ** t)) / (np.sqrt(v / (1 - BETA2 ** t)) + ADAM_EPS)
        if recurrent(k):
            params[k] = p - lr * lr_factor * update
        else:
            params[k] = p * (1 - lr * weight_decay) - lr * update
    return True


# --------------------------------------------------------------------------
# configuration


@dataclass
class ReductionPolicy:
    tau: float = 0.0
    attempts: dict = field(default_factory=lambda: {"kind": "equidistant_in_warmup", "k": 4})
    frac_gate: float = 0.95
    min_steps_between: int = 0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]", "policy.tau")
        if not 0.0 < self.frac_gate <= 1.0:
            raise ConfigError("frac_gate must lie in (0, 1]", "policy.frac-gate")
        if self.min_steps_between < 0:
            raise ConfigError("must be >= 0", "policy.min-steps-between")
        kind = self.attempts.get("kind")
        if kind not in ("equidistant_in_warmup", "fixed_interval", "windowed"):
            raise ConfigError(f"unknown attempt schedule {kind!r}", "policy.attempts.kind")


@dataclass
class TrainConfig:
    depth: int
    H: int
    n: int
    steps: int
    batch: int
    base_lr: float
    lr_factor: float = 1.0
    weight_decay: float = 0.0
    dropout: float = 0.0
    warmup_fraction: float = 0.1
    seed: int = 0
    task: dict = field(default_factory=lambda: {"name": "teacher_lti"})
    policy: ReductionPolicy = field(default_factory=ReductionPolicy)
    # choices not fixed by the table of hyperparameters
    lr_schedule: str = "warmup_cosine"     # or "constant"
    norm: Optional[str] = None             # None: task default
    activation: Optional[str] = None
    pooling: Optional[str] = None
    r_min: float = 0.4
    r_max: float = 0.99
    max_phase: float = 2 * math.pi
    eval_every: int = 0
    eval_batch: int = 256
    checkpoint_every: int = 0
    snapshot_every: int = 0
    track_every: Optional[int] = None     # None: about 200 snapshots per run, 0: off
    tracked_r: Sequence[int] = (1, 2)
    scan_mode: str = "sequential"

    def __post_init__(self):
        for name in ("H", "n", "steps", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", name)
        if self.depth < 0:
            raise ConfigError("must be >= 0", "depth")
        if not self.base_lr > 0:
            raise ConfigError("must be > 0", "base-lr")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("must lie in [0, 1)", "warmup-fraction")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must lie in [0, 1)", "dropout")
        if self.lr_schedule not in ("warmup_cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.lr_schedule!r}", "lr-schedule")

    @property
    def warmup_steps(self):
        return int(round(self.warmup_fraction * self.steps))

    def to_dict(self):
        d = asdict(self)
        d["tracked_r"] = list(self.tracked_r)
        return d


def lr_schedule(step, cfg: TrainConfig):
    """Linear warmup from 1e-7 to ``base_lr``, then cosine decay back to 1e-7."""
    if cfg.lr_schedule == "constant":
        return cfg.base_lr
    W = cfg.warmup_steps
    if step < W:
        return LR_FLOOR + (cfg.base_lr - LR_FLOOR) * step / W
    span = cfg.steps - 1 - W
    frac = 1.0 if span <= 0 else min((step - W) / span, 1.0)
    return LR_FLOOR + (cfg.base_lr - LR_FLOOR) * 0.5 * (1.0 + math.cos(math.pi * frac))


def attempt_steps(policy: ReductionPolicy, steps: int, warmup_steps: int):
    """Strictly increasing step indices at which reduction is attempted."""
    if not policy.enabled:
        return []
    a = policy.attempts
    kind = a["kind"]
    if kind == "equidistant_in_warmup":
        k = int(a.get("k", 4))
        out = [i * warmup_steps // k for i in range(1, k + 1)] if warmup_steps > 0 else []
    elif kind == "fixed_interval":
        every = int(a["every"])
        if every < 1:
            raise ConfigError("must be >= 1", "policy.attempts.every")
        out = list(range(int(a.get("start", every)), steps, every))
    else:
        start, end, k = int(a["start"]), int(a["end"]), int(a.get("k", 2))
        if end <= start or k < 1:
            raise ConfigError("need end > start and k >= 1", "policy.attempts")
        out = [start + i * (end - start) // k for i in range(1, k + 1)]
    return sorted({s for s in out if 0 < s < steps})


# --------------------------------------------------------------------------
# reduction scheduler


@dataclass
class ReductionEvent:
    step: int
    block: int
    n_before: int
    r: int
    tau: float
    discarded_energy: float
    bound: float
    executed: bool
    diagnostic: str = ""

    def to_json(self):
        return asdict(self)


@dataclass
class SchedulerState:
    attempts: List[int]
    last_executed: Dict[int, int] = field(default_factory=dict)


def reduction_scheduler_tick(step, model: LruModel, policy: ReductionPolicy, logs=None,
                             state: Optional[SchedulerState] = None, optimizer_state=None):
    """Attempt a reduction of every block if ``step`` is scheduled.

    Executed reductions replace ``model.blocks[i]`` in place, reset the
    resized Adam moments and restart that block's trajectory log.
    """
    if not policy.enabled or state is None or step not in state.attempts:
        return []
    events = []
    for i, block in enumerate(model.blocks):
        last = state.last_executed.get(i)
        if last is not None and step - last < policy.min_steps_between:
            events.append(ReductionEvent(step, i, block.n, block.n, policy.tau, 0.0, 0.0, False,
                                         "min_steps_between not elapsed"))
            continue
        try:
            res = reduce_system(extract_system(block), policy.tau, policy.frac_gate, diagonal=True)
        except SSMReduceError as exc:
            events.append(ReductionEvent(step, i, block.n, block.n, policy.tau, 0.0, 0.0, False,
                                         f"{type(exc).__name__}: {exc}"))
            continue
        ev = ReductionEvent(step, i, res.n_before, res.r, policy.tau, res.discarded_energy,
                            res.error_bound, res.executed, res.diagnostic)
        if res.executed:
            try:
                model.blocks[i] = write_back(block, res.system, optimizer_state, i)
            except SSMReduceError as exc:
                ev.executed = False
                ev.diagnostic = f"{type(exc).__name__}: {exc}"
            else:
                state.last_executed[i] = step
                if logs is not None:
                    logs[i].restart()
        events.append(ev)
    return events


# --------------------------------------------------------------------------
# evaluation and aggregation


def evaluate(model: LruModel, data: Dataset, batch_size=256, mode="scan"):
    """Top-1 accuracy for classification, NMSE for regression, on the test split."""
    if data.loss == "cross_entropy":
        correct = total = 0
        loss_sum = 0.0
        for x, y in data.test_batches(batch_size):
            out, _ = forward(model, x, mode=mode)
            correct += int(np.sum(np.argmax(out, axis=-1) == y))
            per, _ = loss_value(out, y, data.loss)
            loss_sum += float(per.sum())
            total += len(y)
        return {"acc": correct / total, "loss": loss_sum / total}
    err = ref = 0.0
    for x, y in data.test_batches(batch_size):
        out, _ = forward(model, x, mode=mode)
        err += float(np.sum((out - y.reshape(out.shape)) ** 2))
        ref += float(np.sum(y ** 2))
    return {"nmse": err / ref if ref > 0 else float("nan"), "loss": err / data.test_y.size}


def batch_accuracy(outputs, y, loss):
    if loss != "cross_entropy":
        return None
    return float(np.mean(np.argmax(outputs, axis=-1) == y))


def top_k_mean(values, k=3, higher_is_better=True):
    """Mean of the best ``k`` values (all of them if fewer)."""
    v = sorted((float(x) for x in values), reverse=higher_is_better)
    if not v:
        raise ValueError("no values to aggregate")
    v = v[:k]
    return sum(v) / len(v)


# --------------------------------------------------------------------------
# the loop


@dataclass
class RunRecord:
    config: dict
    losses: List[float] = field(default_factory=list)
    accs: List[Optional[float]] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    wall_ms: List[float] = field(default_factory=list)
    orders: List[List[int]] = field(default_factory=list)
    events: List[ReductionEvent] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)
    final_orders: List[int] = field(default_factory=list)
    final_eval: dict = field(default_factory=dict)
    total_wall_s: float = 0.0
    tracking: List[TrajectoryLog] = field(default_factory=list)
    tracking_csv: Optional[str] = None
    model: Optional[LruModel] = None

    @property
    def final_mean_order(self):
        return float(np.mean(self.final_orders)) if self.final_orders else 0.0

    @property
    def executed_events(self):
        return [e for e in self.events if e.executed]

    def summary(self):
        metric = "acc" if "acc" in self.final_eval else "nmse"
        hist = [e[metric] for e in self.evals if metric in e] or [self.final_eval.get(metric)]
        hist = [h for h in hist if h is not None]
        better = metric == "acc"
        best = (max(hist) if better else min(hist)) if hist else None
        return {
            "final_orders": self.final_orders,
            "final_mean_order": self.final_mean_order,
            "initial_order": self.config.get("n"),
            "executed_reductions": len(self.executed_events),
            "attempted_reductions": len(self.events),
            "final_eval": self.final_eval,
            "metric": metric,
            "best_metric": best,
            "top3_metric": top_k_mean(hist, 3, better) if hist else None,
            "total_wall_s": self.total_wall_s,
            "median_step_ms": float(np.median(self.wall_ms)) if self.wall_ms else None,
            "steps": len(self.losses),
            "seed": self.config.get("seed"),
            "tracking_csv": self.tracking_csv,
        }


class TrainingFailure(SSMReduceError):
    """Training aborted; ``checkpoint`` is the post-mortem checkpoint path (or None)."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def build_model(cfg: TrainConfig, data: Dataset, rng):
    mc = ModelConfig(d_in=data.d_in, d_out=data.d_out, H=cfg.H, n=cfg.n, depth=cfg.depth,
                     norm=cfg.norm or "layer", activation=cfg.activation or "gelu",
                     pooling=cfg.pooling or data.pooling, dropout=cfg.dropout,
                     r_min=cfg.r_min, r_max=cfg.r_max, max_phase=cfg.max_phase)
    return init_model(mc, rng=rng)


def _snapshot(model: LruModel, logs, step):
    for i, block in enumerate(model.blocks):
        logs[i].append(hankel_operator(gramian_diagonal(extract_system(block)), step))


def train_run(cfg: TrainConfig, out_dir=None, data: Optional[Dataset] = None,
              model: Optional[LruModel] = None, progress=None) -> RunRecord:
    """Train from scratch (or from ``model``) following ``cfg``.

    With ``out_dir`` set, streams ``metrics.ndjson`` and ``evals.ndjson`` and
    writes checkpoints under ``checkpoints/`` and per-step snapshots under
    ``snapshots/``. The CLI writes the remaining summary artifacts.
    """
    from .io import save_checkpoint

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, batch_ss, drop_ss = ss.spawn(3)
    if data is None:
        data = make_task(cfg.task, seed=cfg.seed)
    if model is None:
        model = build_model(cfg, data, np.random.default_rng(init_ss))
    batch_rng = np.random.default_rng(batch_ss)
    drop_rng = np.random.default_rng(drop_ss)
    state = AdamState()
    sched = SchedulerState(attempt_steps(cfg.policy, cfg.steps, cfg.warmup_steps))
    track_every = cfg.track_every if cfg.track_every is not None else max(1, cfg.steps // 200)
    logs = [TrajectoryLog(block=i, tracked_r=tuple(cfg.tracked_r)) for i in range(len(model.blocks))]
    rec = RunRecord(config=cfg.to_dict(), tracking=logs, model=model)
    policy_json = asdict(cfg.policy)

    out = Path(out_dir) if out_dir is not None else None
    metrics_f = evals_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_f = open(out / "metrics.ndjson", "w")
        evals_f = open(out / "evals.ndjson", "w")

    def checkpoint(step, sub):
        if out is None:
            return None
        return str(save_checkpoint(model, out / sub, step=step, seed=cfg.seed, policy=policy_json,
                                   optimizer_state=state, extra={"task": cfg.task}))

    batches = data.batches(batch_rng, min(cfg.batch, data.n_train))
    t0 = time.perf_counter()
    step = 0
    try:
        for step in range(cfg.steps):
            events = reduction_scheduler_tick(step, model, cfg.policy, logs, sched, state)
            for ev in events:
                rec.events.append(ev)
                if ev.executed:
                    log.info("step %d block %d: %d -> %d states", step, ev.block, ev.n_before, ev.r)
            if track_every and step % track_every == 0:
                _snapshot(model, logs, step)
            if cfg.snapshot_every and step % cfg.snapshot_every == 0:
                checkpoint(step, f"snapshots/step_{step:07d}")

            x, y = next(batches)
            lr = lr_schedule(step, cfg)
            ts = time.perf_counter()
            bundle = backward(model, x, y, data.loss, train=True, rng=drop_rng, mode=cfg.scan_mode)
            params = model.params()
            if adam_step(params, bundle.grads, state, lr, cfg.lr_factor, cfg.weight_decay):
                model.set_params(params)
            wall = (time.perf_counter() - ts) * 1e3

            acc = batch_accuracy(bundle.outputs, y, data.loss)
            rec.losses.append(bundle.loss)
            rec.accs.append(acc)
            rec.lrs.append(lr)
            rec.wall_ms.append(wall)
            rec.orders.append(model.orders)
            if metrics_f:
                metrics_f.write(json.dumps({"step": step, "loss": bundle.loss, "acc": acc, "lr": lr,
                                            "wall_ms": wall, "orders": model.orders}) + "\n")
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0 and step + 1 < cfg.steps:
                ev = {"step": step + 1, **evaluate(model, data, cfg.eval_batch, cfg.scan_mode)}
                rec.evals.append(ev)
                if evals_f:
                    evals_f.write(json.dumps(ev) + "\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint(step + 1, f"checkpoints/step_{step + 1:07d}")
            if progress:
                progress(step, rec)
        final = {"step": cfg.steps, **evaluate(model, data, cfg.eval_batch, cfg.scan_mode)}
    except (SSMReduceError, FloatingPointError, np.linalg.LinAlgError, OSError) as exc:
        path = checkpoint(step, "postmortem")
        raise TrainingFailure(f"training failed at step {step}: {exc}", path) from exc
    finally:
        if metrics_f:
            metrics_f.close()
            evals_f.close()
    if track_every:
        _snapshot(model, logs, cfg.steps)
    if cfg.snapshot_every:
        checkpoint(cfg.steps, f"snapshots/step_{cfg.steps:07d}")
    rec.evals.append(final)
    rec.final_eval = final
    rec.final_orders = model.orders
    rec.total_wall_s = time.perf_counter() - t0
    if out is not None:
        with open(out / "evals.ndjson", "a") as f:
            f.write(json.dumps(final) + "\n")
        checkpoint(cfg.steps, "checkpoints/final")
        write_run_artifacts(rec, out)
    return rec


def write_run_artifacts(rec: RunRecord, out: Path):
    out = Path(out)
    with open(out / "reduction_events.json", "w") as f:
        json.dump([e.to_json() for e in rec.events], f, indent=2)
    if rec.tracking and any(lg.records for lg in rec.tracking):
        path = out / "hsv_trajectory.csv"
        write_tracking_csv(rec.tracking, path)
        rec.tracking_csv = path.name
    with open(out / "summary.json", "w") as f:
        json.dump(rec.summary(), f, indent=2)


# --------------------------------------------------------------------------
# matched-dimension baseline and timing


def baseline_config(cfg: TrainConfig, mean_order: float) -> TrainConfig:
    """Same run, no reduction, every block initialized at ``round(mean_order)`` states."""
    n = max(1, int(round(mean_order)))
    return replace(cfg, n=n, policy=replace(cfg.policy, enabled=False))


def step_time_ms(model: LruModel, data: Dataset, batch, steps=100, mode="scan", seed=0, warmup=5):
    """Wall time of ``steps`` forward/backward/Adam steps on a scratch copy of ``model``."""
    model = model.copy()
    rng = np.random.default_rng(seed)
    batches = data.batches(rng, min(batch, data.n_train))
    state = AdamState()
    times = []
    for i in range(warmup + steps):
        x, y = next(batches)
        ts = time.perf_counter()
        bundle = backward(model, x, y, data.loss, train=False, mode=mode)
        params = model.params()
        adam_step(params, bundle.grads, state, 1e-4)
        model.set_params(params)
        if i >= warmup:
            times.append((time.perf_counter() - ts) * 1e3)
    return np.asarray(times)


def scan_flops(n, H, L, batch, depth=1):
    """Analytic real-FLOP count of the recurrent part of one forward pass.

    Per state and time step: one complex multiply-add for the recurrence (8),
    the input map ``B u`` with real ``u`` (4H) and the readout ``Re(C s)`` (4H).
    """
    return int(depth * batch * L * n * (8 + 8 * H))
