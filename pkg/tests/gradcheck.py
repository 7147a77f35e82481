"""Central finite differences over every entry of every tensor."""

from __future__ import annotations

import numpy as np


def fd_grad(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-4) -> dict[str, np.ndarray]:
    work = {n: np.array(a, dtype=np.float64) for n, a in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss_fn(work)
            flat[idx] = orig - eps
            down = loss_fn(work)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; exact zeros on both sides count as agreement."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)
