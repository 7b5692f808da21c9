"""Central finite-difference gradient checking for torch objectives."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor], *,
                    eps: float = 1e-6, max_entries: int = 32, seed: int = 0) -> float:
    """Largest relative error between autograd and central differences.

    ``fn`` is evaluated with no arguments and must return a scalar that
    depends on ``tensors`` (which need ``requires_grad``).  At most
    ``max_entries`` randomly chosen entries per tensor are perturbed.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    out = fn()
    analytic = torch.autograd.grad(out, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        picks = rng.choice(flat.numel(), size=min(max_entries, flat.numel()), replace=False)
        numeric, exact = [], []
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = float(fn())
                flat[i] = orig - eps
                down = float(fn())
                flat[i] = orig
            numeric.append((up - down) / (2 * eps))
            exact.append(float(g.view(-1)[i]))
        worst = max(worst, float(np.max(relative_error(exact, numeric))))
    return worst
