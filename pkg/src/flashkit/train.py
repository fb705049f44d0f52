"""Training loop and checkpoints.

Runs are deterministic for a (config, seed) pair: the batch stream, MLM
masking, and initialization all derive from the seed, so two runs produce
identical loss traces and a resumed run continues the exact trace of the
uninterrupted one.

Checkpoint format ("flashkit-npz-v1"): a single .npz holding
  meta/format, meta/config (ModelConfig JSON), meta/seed, meta/step,
  param/<name>, opt_m/<name>, opt_v/<name>
Array names echo the model's parameter table; loading rebuilds the model
from the config echo and overwrites every parameter by name.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import data as data_mod
from .model import Model, ModelConfig, build_model, lm_loss, mlm_loss
from .optim import OptimConfig, OptimState, adamw_step, clip_local
from .tensor import backward, record_tape

CHECKPOINT_FORMAT = "flashkit-npz-v1"


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint: Optional[str] = None
    model: Optional[Model] = None
    state: Optional[OptimState] = None


def save_checkpoint(path, model: Model, state: OptimState, step: int) -> None:
    arrays = {
        "meta/format": np.array(CHECKPOINT_FORMAT),
        "meta/config": np.array(model.cfg.to_json()),
        "meta/seed": np.array(model.seed),
        "meta/step": np.array(step),
    }
    for name, p in model.params().items():
        arrays[f"param/{name}"] = p.data
        arrays[f"opt_m/{name}"] = state.m[name]
        arrays[f"opt_v/{name}"] = state.v[name]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, dtype=np.float64) -> tuple[Model, OptimState, int]:
    with np.load(path, allow_pickle=False) as z:
        fmt = str(z["meta/format"])
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format {fmt!r} in {path}")
        cfg = ModelConfig.from_json(str(z["meta/config"]))
        seed = int(z["meta/seed"])
        step = int(z["meta/step"])
        model = build_model(cfg, seed, dtype=dtype)
        state = OptimState.for_params(model.params())
        for name, p in model.params().items():
            p.data = z[f"param/{name}"].astype(dtype)
            state.m[name] = z[f"opt_m/{name}"].astype(dtype)
            state.v[name] = z[f"opt_v/{name}"].astype(dtype)
        state.step = step
    return model, state, step


def _mlm_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x313A, step])


def train_run(cfg: ModelConfig, corpus: bytes, steps: int, seed: int,
              optim_cfg: Optional[OptimConfig] = None, batch_size: int = 4,
              checkpoint_path: Optional[str] = None, checkpoint_every: int = 0,
              resume_from: Optional[str] = None, dtype=np.float64,
              log_every: int = 0,
              on_step: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Train for `steps` optimizer steps; returns loss/lr traces.

    `resume_from` restores parameters, moments and the step counter from a
    checkpoint and continues the same batch stream (earlier windows are
    skipped), so the tail of the trace matches an uninterrupted run.
    """
    optim_cfg = optim_cfg or OptimConfig(total_steps=steps)
    if resume_from:
        model, state, start_step = load_checkpoint(resume_from, dtype=dtype)
        cfg = model.cfg
    else:
        model = build_model(cfg, seed, dtype=dtype)
        state = OptimState.for_params(model.params())
        start_step = 0
    params = model.params()

    chunk = cfg.chunk if cfg.kind == "flash" else None
    batches = data_mod.make_batches(corpus, batch_size, cfg.context, seed, chunk=chunk)
    for _ in range(start_step):
        next(batches)  # fast-forward the deterministic stream
    workers = int(os.environ.get("FLASHKIT_THREADS", "1"))
    prefetcher = None
    if workers > 1:
        prefetcher = data_mod.Prefetcher(batches)
        batches = prefetcher

    result = TrainResult(model=model, state=state)
    t_start = time.perf_counter()
    try:
        for step in range(start_step + 1, steps + 1):
            batch = next(batches)
            with record_tape() as tape:
                if cfg.causal:
                    loss = lm_loss(model, batch.tokens, batch.segment_ids)
                else:
                    loss = mlm_loss(model, batch.tokens, _mlm_rng(seed, step),
                                    batch.segment_ids)
                backward(tape, loss)
            grads = {name: p.grad for name, p in params.items()}
            grads = clip_local(grads, optim_cfg.clip)
            lr = adamw_step(params, grads, state, optim_cfg)
            loss_val = loss.item()
            result.losses.append(loss_val)
            result.lrs.append(lr)
            if on_step:
                on_step(step, loss_val, lr)
            if log_every and (step % log_every == 0 or step == steps):
                rate = (step - start_step) / (time.perf_counter() - t_start)
                print(f"step {step:6d}  loss {loss_val:7.4f}  lr {lr:.2e}  "
                      f"{rate:.2f} steps/s", flush=True)
            if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, state, step)
                result.checkpoint = checkpoint_path
    finally:
        if prefetcher is not None:
            prefetcher.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, state, steps)
        result.checkpoint = checkpoint_path
    return result
