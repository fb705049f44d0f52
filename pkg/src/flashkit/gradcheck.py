"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor, backward, record_tape

REL_ERR_FLOOR = 1e-8


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    probes: int = 4,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max per-parameter relative error between tape gradients and central
    differences.

    `f` must be a deterministic closure over `params` returning a scalar
    Tensor. For each parameter the analytic directional derivative
    <grad, u> is compared with (f(p + eps*u) - f(p - eps*u)) / 2eps over
    `probes` unit directions: the first aligned with the gradient itself
    (catches any scale or sign error at full conditioning), the rest
    random (catch errors orthogonal to the gradient). The parameter's
    error is max_i |a_i - cd_i| / max(max_i |a_i|, max_i |cd_i|, floor),
    i.e. relative to the strongest probe response rather than to each
    probe alone — a single f() evaluation carries ~1e-16 relative
    round-off, so probes that are nearly orthogonal to a small gradient
    measure only that noise. Floor 1e-8 avoids 0/0 when everything
    vanishes.
    """
    params = list(params)
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    with record_tape() as tape:
        for p in params:
            tape.watch(p)
        loss = f()
        base = loss.item()
        if not np.isfinite(base):
            raise RuntimeError(f"finite-difference check aborted: f() is {base}")
        backward(tape, loss)
    analytic = [np.array(p.grad, copy=True) for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        directions = []
        gnorm = float(np.linalg.norm(grad))
        if gnorm > 0:
            directions.append(grad / gnorm)
        while len(directions) < probes:
            u = rng.normal(size=p.data.shape)
            directions.append(u / max(np.linalg.norm(u), 1e-12))
        pairs = []
        saved = p.data.copy()
        for u in directions:
            p.data = saved + eps * u
            up = f().item()
            p.data = saved - eps * u
            down = f().item()
            p.data = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise RuntimeError("finite-difference check aborted: non-finite probe value")
            pairs.append((float(np.vdot(grad, u)), (up - down) / (2.0 * eps)))
        a = np.array([x for x, _ in pairs])
        cd = np.array([x for _, x in pairs])
        denom = max(np.max(np.abs(a)), np.max(np.abs(cd)), REL_ERR_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - cd))) / denom)
    return worst
