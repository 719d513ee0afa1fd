"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor, backward


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` wrt entries of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    idx_iter = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in idx_iter:
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = f()
        arr[idx] = orig - eps
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    floor: float = 1e-6, scale_floor: float = 0.0) -> float:
    """Worst relative error between tape gradients and finite differences.

    ``loss_fn`` must rebuild the loss from the current ``param.data`` each
    call.  With ``max_entries`` only a random subset of entries per parameter
    is probed.  ``scale_floor`` raises the per-tensor denominator floor to
    that fraction of the tensor's largest analytic gradient, so entries far
    below the tensor's gradient scale are judged against that scale rather
    than against finite-difference roundoff.
    """
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        all_idx = list(np.ndindex(p.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in pick]
        else:
            idx = all_idx
        fl = max(floor, scale_floor * float(np.max(np.abs(analytic)))) if analytic.size else floor
        num = numeric_grad(lambda: loss_fn().item(), p.data, eps, idx)
        sel = tuple(np.array(idx).T) if idx and p.ndim else ()
        if p.ndim == 0:
            worst = max(worst, relative_error(np.atleast_1d(analytic), np.atleast_1d(num), fl))
        else:
            worst = max(worst, relative_error(analytic[sel], num[sel], fl))
    return worst
