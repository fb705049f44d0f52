"""AdamW with decoupled weight decay, warmup/linear-decay schedule, and
per-tensor ("local") gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimConfig:
    lr_peak: float = 7e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip: float = 0.1
    warmup_steps: int = 100
    total_steps: int = 2000


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @staticmethod
    def for_params(params: dict[str, Tensor]) -> "OptimState":
        return OptimState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def lr_schedule(step: int, cfg: OptimConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then linear decay to 0 at total."""
    if step <= 0:
        return 0.0
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    span = cfg.total_steps - cfg.warmup_steps
    return cfg.lr_peak * (cfg.total_steps - step) / span


def clip_local(grads: dict[str, np.ndarray], threshold: float = 0.1) -> dict[str, np.ndarray]:
    """Rescale each tensor's gradient independently so its L2 norm <= threshold."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    out = {}
    for name, g in grads.items():
        norm = float(np.linalg.norm(g))
        out[name] = g * (threshold / norm) if norm > threshold else g
    return out


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimState, cfg: OptimConfig) -> float:
    """One update: bias-corrected moments, decoupled decay. Returns the lr used."""
    state.step += 1
    t = state.step
    lr = lr_schedule(t, cfg)
    b1, b2 = cfg.betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = p.data - lr * update
    return lr
