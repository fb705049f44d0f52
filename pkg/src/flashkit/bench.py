"""Latency benchmarking across context lengths and log-log slope fitting.

The protocol fixes a token budget per step and shrinks the batch as the
context grows (batch = tokens/T, floored at 1), so a model with per-token
cost independent of T shows a flat per-step latency while a quadratic one
grows. Once the floor is hit the effective tokens per step grow with T,
which is what separates linear from quadratic kinds on the top lengths.
Two warmup iterations are always discarded; repeats are aggregated to
median and p90 on a monotonic clock.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .model import ModelConfig, build_model, lm_loss
from .optim import OptimConfig, OptimState, adamw_step, clip_local
from .tensor import backward, record_tape

CSV_HEADER = "kind,T,C,d,layers,batch,repeats,median_ms,p90_ms,precision"


@dataclass
class BenchRecord:
    kind: str
    T: int
    C: int
    d: int
    layers: int
    batch: int
    repeats: int
    median_ms: float
    p90_ms: float
    precision: str

    def csv_row(self) -> str:
        return (f"{self.kind},{self.T},{self.C},{self.d},{self.layers},{self.batch},"
                f"{self.repeats},{self.median_ms:.3f},{self.p90_ms:.3f},{self.precision}")


def write_csv(records: Iterable[BenchRecord], fh) -> None:
    fh.write(CSV_HEADER + "\n")
    for rec in records:
        fh.write(rec.csv_row() + "\n")


def bench_latency(kind: str, lengths: list[int], d: int = 64, layers: int = 2,
                  chunk: int = 64, repeats: int = 5, warmup: int = 2,
                  tokens_per_step: int = 1024, seed: int = 0,
                  dtype=np.float32, mode: str = "train",
                  log=sys.stderr) -> list[BenchRecord]:
    """Time one training step (or a forward pass) of `kind` at each length.

    Out-of-memory at a length skips that record with a note and continues.
    """
    if repeats < 5:
        raise ValueError("need at least 5 repeats after warmup")
    precision = np.dtype(dtype).name
    records = []
    for t in lengths:
        batch = max(1, tokens_per_step // t)
        try:
            cfg = ModelConfig(d=d, layers=layers, context=t, chunk=chunk, kind=kind)
            model = build_model(cfg, seed, dtype=dtype)
            params = model.params()
            opt_cfg = OptimConfig(warmup_steps=1, total_steps=10 ** 9)
            state = OptimState.for_params(params)
            tokens = np.random.default_rng([seed, t]).integers(0, 256, size=(batch, t))

            def step():
                if mode == "train":
                    with record_tape() as tape:
                        loss = lm_loss(model, tokens)
                        backward(tape, loss)
                    grads = {k: p.grad for k, p in params.items()}
                    adamw_step(params, clip_local(grads, opt_cfg.clip), state, opt_cfg)
                else:
                    model.forward(tokens)

            for _ in range(warmup):
                step()
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                step()
                times.append(time.perf_counter() - t0)
        except MemoryError:
            print(f"bench: skipping kind={kind} T={t} (out of memory)", file=log, flush=True)
            continue
        times_ms = np.asarray(times) * 1e3
        records.append(BenchRecord(
            kind=kind, T=t, C=chunk, d=d, layers=layers, batch=batch,
            repeats=repeats,
            median_ms=float(np.percentile(times_ms, 50)),
            p90_ms=float(np.percentile(times_ms, 90)),
            precision=precision,
        ))
        print(f"bench: kind={kind} T={t} batch={batch} median="
              f"{records[-1].median_ms:.1f}ms", file=log, flush=True)
    return records


def fit_log_slope(lengths, times) -> tuple[float, float]:
    """Least-squares slope and R^2 of log(time) against log(length)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if len(set(lengths.tolist())) < 3:
        raise ValueError("slope fit needs at least 3 distinct lengths")
    x = np.log(lengths)
    y = np.log(times)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2


def fit_exponent(records: list[BenchRecord]) -> tuple[float, float]:
    return fit_log_slope([r.T for r in records], [r.median_ms for r in records])
