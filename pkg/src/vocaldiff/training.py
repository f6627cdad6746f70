"""Training loop: batching, validation split, early stopping, CSV logging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .diffusion import TrainConfig, loss_snr, train_step, v_target
from .optim import AdamWState, cosine_lr
from .rng import substream
from .schedule import Schedule, build_cosine_schedule, forward_diffuse
from .unet import ModelParams, encode_vocal, unet_forward

EVAL_EVERY = 200
PATIENCE = 5
VAL_PROBES = 8


@dataclass
class TrainResult:
    steps_run: int
    train_losses: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    stopped_early: bool = False


def split_pairs(pairs, fraction: float):
    """Deterministic train/validation split; the tail floor(f*N) pairs
    become validation (0 validation pairs disables early stopping)."""
    n_val = int(len(pairs) * fraction)
    if n_val == 0:
        return list(pairs), []
    return list(pairs[:-n_val]), list(pairs[-n_val:])


def validation_loss(params: ModelParams, val_pairs, cfg: TrainConfig,
                    sched: Schedule) -> float:
    """SNR-weighted loss on a fixed probe grid, comparable across calls.

    Timesteps are spread evenly over (0, T]; noise draws come from a
    stream reseeded per call so successive evaluations see identical
    probes and differ only through the parameters.
    """
    rng = substream(cfg.seed, "val")
    ts = [max(1, (i + 1) * sched.num_steps // VAL_PROBES)
          for i in range(VAL_PROBES)]
    total = 0.0
    count = 0
    for pair in val_pairs:
        cond = encode_vocal(pair.z_v, params)
        for t in ts:
            eps = rng.standard_normal(pair.z_a.shape).astype(np.float32)
            x_t = forward_diffuse(pair.z_a, eps, t, sched)
            v_true = v_target(pair.z_a, eps, t, sched)
            v_pred = unet_forward(x_t, t, cond, params, sched)
            total += loss_snr(v_pred, v_true, t, sched).item()
            count += 1
    return total / count


def run_training(pairs, cfg: TrainConfig, params: ModelParams,
                 ckpt_path=None, log_path=None,
                 eval_every: int = EVAL_EVERY, patience: int = PATIENCE,
                 log_fn=None) -> TrainResult:
    """Drive train_step for cfg.steps steps over the given corpus.

    Learning rate anneals along a cosine from cfg.lr to cfg.lr/100.  The
    checkpoint is written on each best-validation improvement and again at
    the end; the CSV log gets one row per step with the latest known
    validation loss.
    """
    sched = build_cosine_schedule(cfg.timesteps)
    train_pairs, val_pairs = split_pairs(pairs, cfg.validation_fraction)
    opt = AdamWState(params.tensors)
    train_rng = substream(cfg.seed, "train")
    order_rng = substream(cfg.seed, "order")
    result = TrainResult(steps_run=0)
    best_val = np.inf
    bad_evals = 0
    last_val: Optional[float] = None

    log = open(log_path, "w") if log_path is not None else None
    try:
        if log:
            log.write("step,train_loss,val_loss\n")
        for step in range(1, cfg.steps + 1):
            lr = cosine_lr(step - 1, max(cfg.steps - 1, 1), cfg.lr)
            take = min(cfg.batch, len(train_pairs))
            idx = order_rng.choice(len(train_pairs), size=take,
                                   replace=cfg.batch > len(train_pairs))
            batch = [train_pairs[i] for i in idx]
            loss, opt = train_step(batch, params, opt, cfg, sched,
                                   train_rng, lr=lr)
            result.train_losses.append(loss)
            result.steps_run = step

            if val_pairs and (step % eval_every == 0 or step == cfg.steps):
                val = validation_loss(params, val_pairs, cfg, sched)
                last_val = val
                result.val_history.append((step, val))
                if log_fn:
                    log_fn(f"step {step}: train {loss:.5g} val {val:.5g}")
                if val < best_val:
                    best_val = val
                    bad_evals = 0
                    if ckpt_path is not None:
                        save_checkpoint(ckpt_path, params, step, cfg,
                                        extra=_extra(pairs))
                else:
                    bad_evals += 1
            if log:
                val_cell = "" if last_val is None else f"{last_val:.8g}"
                log.write(f"{step},{loss:.8g},{val_cell}\n")
            if val_pairs and bad_evals >= patience:
                result.stopped_early = True
                if log_fn:
                    log_fn(f"early stop at step {step}: no improvement in "
                           f"{patience} evaluations")
                break
    finally:
        if log:
            log.close()
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, params, result.steps_run, cfg,
                        extra=_extra(pairs))
    return result


def _extra(pairs) -> dict:
    return {"length": pairs[0].length} if pairs else {}
