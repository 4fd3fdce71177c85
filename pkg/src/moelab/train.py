"""Deterministic training loop: AdamW with per-group LR scales and a
cosine schedule with linear warmup over the first 1% of steps.

Divergence (any non-finite loss or gradient) is a first-class outcome:
the run stops early, keeps its partial trace, and flags the record.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .model import ModelConfig, TransformerModel, build_model, config_digest, total_loss
from .tensor import backward


class DivergedError(RuntimeError):
    """Raised when a step sees non-finite gradients; the step is not applied."""


@dataclass
class OptState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(step: int, total_steps: int, peak_lr: float) -> float:
    """Linear warmup over ceil(1% of steps), then cosine decay to zero."""
    if total_steps < 100:
        raise ValueError(f"total_steps must be >= 100, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(0.01 * total_steps)
    if step <= warmup:
        return peak_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(groups, opt: OptState, scheduled_lr: float, record_updates: dict | None = None):
    """One AdamW update; effective LR per group is scheduled_lr * lr_scale.

    Gradients are checked for finiteness before any parameter moves, and
    are cleared after the update. `record_updates`, when given, collects
    the applied update array per tensor node_id (used by the linearity
    audit, which asserts updates scale exactly with the LR).
    """
    for g in groups:
        for t in g.tensors:
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise DivergedError(f"non-finite gradient in group {g.name}")
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for g in groups:
        lr_eff = scheduled_lr * g.rule.lr_scale
        for t in g.tensors:
            grad = t.grad
            if grad is None and t.node_id not in opt.m and opt.weight_decay == 0.0:
                continue
            if t.node_id not in opt.m:
                opt.m[t.node_id] = np.zeros_like(t.values)
                opt.v[t.node_id] = np.zeros_like(t.values)
            m, v = opt.m[t.node_id], opt.v[t.node_id]
            if grad is None:
                m *= opt.beta1
                v *= opt.beta2
            else:
                m *= opt.beta1
                m += (1.0 - opt.beta1) * grad
                v *= opt.beta2
                v += (1.0 - opt.beta2) * grad * grad
            denom = v / bc2
            np.sqrt(denom, out=denom)
            denom += opt.eps
            update = m / denom
            update *= lr_eff / bc1
            if opt.weight_decay:
                t.values -= lr_eff * opt.weight_decay * t.values
            t.values -= update
            if record_updates is not None:
                record_updates[t.node_id] = update
            t.grad = None


@dataclass
class TracePoint:
    step: int
    tokens: int
    loss: float
    lr: float
    aux_z: float
    aux_lb: float


@dataclass
class RunResult:
    final_loss: float | None  # tail-mean total loss; None when diverged
    diverged: bool
    steps_run: int
    tokens_seen: int
    trace: list
    wall_time: float
    config_hash: str

    def trace_rows(self):
        yield ("step", "tokens", "loss", "lr", "aux_z", "aux_lb")
        for p in self.trace:
            yield (p.step, p.tokens, f"{p.loss:.6f}", f"{p.lr:.8g}", f"{p.aux_z:.6f}", f"{p.aux_lb:.6f}")


def train(
    cfg: ModelConfig,
    corpus: Corpus,
    total_tokens: int,
    batch_size: int = 32,
    trace_every: int = 10,
    opt: OptState | None = None,
    data_seed: int | None = None,
) -> RunResult:
    tokens_per_step = batch_size * cfg.seq_len
    total_steps = total_tokens // tokens_per_step
    if total_steps < 100:
        raise ValueError(
            f"{total_tokens} tokens at {tokens_per_step}/step give {total_steps} steps; "
            "need >= 100 for the warmup schedule"
        )
    model, groups = build_model(cfg)
    opt = opt or OptState()
    data_seed = cfg.seed if data_seed is None else data_seed
    losses = []
    trace = []
    diverged = False
    t0 = time.time()
    step = 0
    # Overflow on the way to a detected divergence is expected; divergence
    # itself is caught explicitly through the finiteness checks below.
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(total_steps):
            x, y = corpus.batch(data_seed, step, batch_size, cfg.seq_len)
            out = model.forward(x)
            loss, ce, z, lb = total_loss(out, y, cfg.moe)
            loss_val = float(loss.values)
            lr = lr_at(step, total_steps, cfg.base_lr)
            if not math.isfinite(loss_val):
                diverged = True
                trace.append(TracePoint(step, step * tokens_per_step, loss_val, lr, z, lb))
                break
            losses.append(loss_val)
            if step % trace_every == 0 or step == total_steps - 1:
                trace.append(TracePoint(step, (step + 1) * tokens_per_step, loss_val, lr, z, lb))
            backward(loss)
            try:
                adamw_step(groups, opt, lr)
            except DivergedError:
                diverged = True
                break
    steps_run = step + 1 if total_steps else 0
    if diverged or not losses:
        final = None
    else:
        tail = max(1, math.ceil(0.05 * len(losses)))
        final = float(np.mean(losses[-tail:]))
    return RunResult(
        final_loss=final,
        diverged=diverged,
        steps_run=steps_run,
        tokens_seen=len(losses) * tokens_per_step,
        trace=trace,
        wall_time=time.time() - t0,
        config_hash=config_digest(cfg),
    )
