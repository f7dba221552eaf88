"""Training recipe: loss, optimizer, warmup schedule, loop, evaluation.

Defaults follow the full-scale recipe (lr 1e-4, betas (0.9, 0.95), weight
decay 1.0, 2000 warmup steps, batch 768); desk runs override batch size
and step counts through the manifest. The loss supervises z_H only, once
per cycle, with both states detached between cycles.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .model import AirModel, save_checkpoint
from .recurrence import RecurrenceConfig, run_cycle, final_state_tokens
from .tasks import encode_puzzle


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1.0
    warmup_steps: int = 2000
    batch_size: int = 768
    steps: int = 2000
    seed: int = 0
    eval_every: int = 100
    eval_count: int = 64
    optimizer: str = "adam_atan2"   # or "adamw"
    loss: str = "stablemax_ce"      # or "softmax_ce"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.optimizer not in ("adam_atan2", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("stablemax_ce", "softmax_ce"):
            raise ValueError(f"unknown loss {self.loss!r}")


def stablemax_ce(logits, targets):
    return T.stablemax_cross_entropy(logits, targets)


def softmax_ce(logits, targets):
    return T.softmax_cross_entropy(logits, targets)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr over warmup_steps, constant afterwards."""
    if step < 1:
        raise ValueError("steps are 1-based")
    return cfg.lr * min(1.0, step / cfg.warmup_steps)


class AdamAtan2:
    """Adam variant whose update direction is atan2(m_hat, sqrt(v_hat)).

    Epsilon-free; the update magnitude is bounded by lr * pi/2 per entry.
    Decoupled weight decay shrinks parameters before the update is added.
    The plain AdamW rule is available for recipe ablations.
    """

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr_t: float):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            if cfg.weight_decay:
                p.data *= 1.0 - lr_t * cfg.weight_decay
            if cfg.optimizer == "adam_atan2":
                p.data -= lr_t * np.arctan2(m_hat, np.sqrt(v_hat))
            else:
                p.data -= lr_t * m_hat / (np.sqrt(v_hat) + 1e-8)


def adam_atan2_step(params: dict, optimizer: AdamAtan2, lr_t: float):
    """Single optimizer step over parameters whose .grad is populated."""
    optimizer.step(lr_t)
    return params


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)   # rows: step, loss, exact_match, lr
    checkpoints: list = field(default_factory=list)
    final_accuracy: float = 0.0
    peak_accuracy: float = 0.0


def _dataset_ids(dataset):
    inputs = np.stack([encode_puzzle(p)[0] for p in dataset])
    targets = np.stack([encode_puzzle(p)[1] for p in dataset])
    return inputs, targets


def evaluate_exact_match(model: AirModel, dataset, rcfg: RecurrenceConfig, batch_size: int = 128) -> float:
    """Fraction of puzzles whose final decoded z_H matches the target at
    every position."""
    if not dataset:
        raise ValueError("evaluate_exact_match: empty dataset")
    inputs, targets = _dataset_ids(dataset)
    hits = 0
    for lo in range(0, len(dataset), batch_size):
        batch_in = inputs[lo:lo + batch_size]
        batch_tg = targets[lo:lo + batch_size]
        decoded = final_state_tokens(model, batch_in, rcfg)
        hits += int((decoded == batch_tg).all(axis=1).sum())
    return hits / len(dataset)


def supervised_step(model: AirModel, tokens: np.ndarray, targets: np.ndarray,
                    rcfg: RecurrenceConfig, loss_name: str = "stablemax_ce"):
    """Forward all cycles with per-cycle supervision of z_H; returns the
    mean per-cycle loss tensor ready for backward()."""
    loss_fn = stablemax_ce if loss_name == "stablemax_ce" else softmax_ce
    base_s = tokens.shape[1]
    x_tilde = model.encode_input(tokens)
    states = model.init_states(tokens.shape[0], base_s)
    total = None
    for _cycle in range(rcfg.max_cycles):
        states, _ = run_cycle(model, states, x_tilde, rcfg)
        z = states.z_h
        if z.shape[1] != base_s:
            z = T.narrow(z, 1, z.shape[1] - base_s, base_s)
        logits, _ = model.decode_head(z)
        cycle_loss = loss_fn(logits, targets)
        total = cycle_loss if total is None else total + cycle_loss
        states = type(states)(z_h=states.z_h.detach(), z_l=states.z_l.detach(),
                              h0=states.h0, l0=states.l0)
    return T.scale(total, 1.0 / rcfg.max_cycles)


def train(model: AirModel, dataset, tcfg: TrainConfig, rcfg: RecurrenceConfig,
          out_dir: str | None = None, log=None) -> TrainResult:
    """Optimize the model on ``dataset``; the last eval_count records are
    held out for exact-match evaluation. Emits one metric row per eval and
    a checkpoint alongside each metric row when out_dir is given."""
    if not dataset:
        raise ValueError("train: empty dataset")
    if rcfg.freeze != "none":
        raise ValueError("training with a frozen state is not supported")
    n_eval = min(tcfg.eval_count, max(1, len(dataset) // 5))
    eval_set = dataset[-n_eval:]
    train_set = dataset[:-n_eval] or dataset
    inputs, targets = _dataset_ids(train_set)

    rng = np.random.Generator(np.random.PCG64(tcfg.seed))
    optimizer = AdamAtan2(model.named_parameters(), tcfg)
    result = TrainResult()
    order = rng.permutation(len(train_set))
    cursor = 0
    loss_sum, loss_n = 0.0, 0

    for step in range(1, tcfg.steps + 1):
        if cursor + tcfg.batch_size > len(order):
            order = rng.permutation(len(train_set))
            cursor = 0
        take = order[cursor:cursor + tcfg.batch_size]
        cursor += tcfg.batch_size

        loss = supervised_step(model, inputs[take], targets[take], rcfg, tcfg.loss)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "diagnostic.ckpt"), model, step=step)
            raise FloatingPointError(f"non-finite loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        lr_t = lr_schedule(step, tcfg)
        optimizer.step(lr_t)
        loss_sum += loss_val
        loss_n += 1

        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            acc = evaluate_exact_match(model, eval_set, rcfg)
            row = {"step": step, "loss": loss_sum / max(loss_n, 1), "exact_match": acc, "lr": lr_t}
            result.metrics.append(row)
            loss_sum, loss_n = 0.0, 0
            if log:
                log(f"step {step}: loss {row['loss']:.4f} exact_match {acc:.3f} lr {lr_t:.2e}")
            if out_dir:
                path = os.path.join(out_dir, f"step{step:06d}.ckpt")
                save_checkpoint(path, model, step=step)
                result.checkpoints.append(path)

    result.final_accuracy = result.metrics[-1]["exact_match"] if result.metrics else 0.0
    result.peak_accuracy = max((r["exact_match"] for r in result.metrics), default=0.0)
    return result


def write_metrics_csv(path, metrics):
    """Metric log with the fixed header step,loss,exact_match,lr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "exact_match", "lr"])
        for row in metrics:
            writer.writerow([row["step"], f"{row['loss']:.6g}", f"{row['exact_match']:.6g}", f"{row['lr']:.6g}"])
