"""Central-difference gradient checks in float64."""
import numpy as np

EPS = 1e-6


def rel_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (np.maximum(np.abs(a), np.abs(n)) + 1e-6)))


def check(loss_fn, params, max_entries=40, seed=0):
    """Max relative error between backward() and finite differences.

    ``loss_fn()`` rebuilds the graph from ``params`` (dict or list of Tensors)
    and returns a scalar Tensor. At most ``max_entries`` random entries per
    parameter are probed.
    """
    tensors = list(params.values()) if isinstance(params, dict) else list(params)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(n, max_entries), replace=False)
        num = np.empty(picks.size)
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + EPS
            up = float(loss_fn().data)
            flat[i] = old - EPS
            down = float(loss_fn().data)
            flat[i] = old
            num[j] = (up - down) / (2 * EPS)
        worst = max(worst, rel_error(g.reshape(-1)[picks], num))
    return worst
