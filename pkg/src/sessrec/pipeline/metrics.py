"""Categorization accuracy and group-based refinement of buy predictions."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..schema import N_EXPOSED

THRESHOLD = 0.5


def categorization_accuracy(preds, truths) -> float:
    """Fraction of users whose nine predicted bits all match the truth."""
    p = np.asarray(preds).astype(np.int64).reshape(-1, N_EXPOSED)
    t = np.asarray(truths).astype(np.int64).reshape(-1, N_EXPOSED)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predictions for {len(t)} labels")
    if len(p) == 0:
        return 0.0
    return float(np.all(p == t, axis=1).mean())


def threshold(probs, cut: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(probs) >= cut).astype(np.int64)


def refine(bits: Sequence[int], group_probs: Sequence[float]) -> tuple[int, ...]:
    """Rewrite one buy vector according to the most likely group.

    ====== ==============================
    group  output
    ====== ==============================
    0      all zeros
    1      keep bits 1-3, zero the rest
    2      bits 1-3 forced to one, keep 4-9
    3      bits 1-6 forced to one, keep 7-9
    ====== ==============================

    The group-2 row keeps bits 7-9 as predicted, so its output can still
    break the unlock order when session 2 is incomplete.
    """
    out = refine_array(np.asarray(bits)[None, :], np.asarray(group_probs)[None, :])
    return tuple(int(b) for b in out[0])


def refine_array(bits: np.ndarray, group_probs: np.ndarray) -> np.ndarray:
    """Vectorised :func:`refine` over ``[M, 9]`` bits and ``[M, 4]`` group scores."""
    y = np.array(bits, dtype=np.int64, copy=True).reshape(-1, N_EXPOSED)
    g = np.argmax(np.asarray(group_probs).reshape(len(y), -1), axis=1)
    y[g == 0] = 0
    y[g == 1, 3:] = 0
    y[g == 2, :3] = 1
    y[g == 3, :6] = 1
    return y
