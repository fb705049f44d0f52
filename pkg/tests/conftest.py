import numpy as np


def randomize_params(tensors, rng, std=1.0):
    """Overwrite parameter values with O(std) noise for gradient checks.

    Paper-scale init (weights at std 0.02) leaves a fresh block dominated by
    its residual: most parameter gradients sit near the float64 FD noise
    floor. Checking backward rules needs well-scaled values instead.
    """
    for t in tensors:
        t.data = rng.normal(0.0, std, size=t.data.shape)
