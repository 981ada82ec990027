"""Training objectives.

All buy losses sum the per-item BCE over the nine items and average over the
batch. The session-aware variant reweights each item by its role:

=========  ======================  ==================
group      items                   weight
=========  ======================  ==================
0          all nine                lambda4
1          session 1 (frontier)    lambda2 if bought else lambda3
           sessions 2-3            lambda4
2          session 1               lambda1
           session 2 (frontier)    lambda2 / lambda3
           session 3               lambda4
3          sessions 1-2            lambda1
           session 3 (frontier)    lambda2 / lambda3
=========  ======================  ==================
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional

import numpy as np

from . import ndgrad as G
from .ndgrad import Tensor
from .schema import N_EXPOSED, SESSION_LEN, group_of_array, valid_mask


@dataclass
class LossWeights:
    buy: float = 0.8
    group: float = 0.1
    click: float = 0.1
    weak_positive: float = 0.5     # lambda1
    strong_positive: float = 1.0   # lambda2
    strong_negative: float = 1.0   # lambda3
    weak_negative: float = 0.5     # lambda4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(truth, like: Tensor) -> np.ndarray:
    y = np.asarray(truth, dtype=like.dtype)
    return y.reshape(like.shape)


def loss_buy(pred: Tensor, truth) -> Tensor:
    """Batch mean of the summed per-item BCE; ``pred`` is ``[B, 9]``."""
    y = _labels(truth, pred)
    per_entry = G.sum_(G.bce_elementwise(pred, y), axis=-1)
    return G.mean(per_entry)


def loss_group(pred_g: Tensor, truth_g) -> Tensor:
    """Batch mean of ``-log pred_g[truth]``."""
    return G.mean(G.cross_entropy_row(pred_g, np.asarray(truth_g, dtype=np.int64)))


def loss_click(pred_c: Tensor, truth_c) -> Tensor:
    return G.mean(G.bce_elementwise(pred_c, _labels(truth_c, pred_c)))


def reweight_matrix(truth: np.ndarray, w: LossWeights) -> np.ndarray:
    """Per-item loss weights ``[B, 9]`` from the true buy vectors."""
    y = np.asarray(truth).reshape(-1, N_EXPOSED)
    if not valid_mask(y).all():
        raise ValueError("reweighted loss needs unlock-valid label vectors")
    groups = group_of_array(y)
    session = np.arange(N_EXPOSED) // SESSION_LEN           # 0, 0, 0, 1, 1, 1, 2, 2, 2
    frontier = (groups - 1)[:, None]                        # -1 for group 0
    strong = np.where(y > 0, w.strong_positive, w.strong_negative)
    out = np.where(session < frontier, w.weak_positive, w.weak_negative)
    out = np.where(session == frontier, strong, out)
    return out.astype(np.float64)


def loss_buy_reweight(pred: Tensor, truth, weights: LossWeights) -> Tensor:
    y = _labels(truth, pred)
    wmat = reweight_matrix(y, weights).astype(pred.dtype).reshape(pred.shape)
    per_entry = G.sum_(G.mul(G.bce_elementwise(pred, y), wmat), axis=-1)
    return G.mean(per_entry)


STAGE_PARTS = {
    "buy": ("buy",),
    "buy+group": ("buy", "group"),
    "reweight+group": ("buy", "group"),
    "reweight+group+click": ("buy", "group", "click"),
}


def loss_combined(parts: Mapping[str, Optional[Tensor]], weights: LossWeights, stage: str) -> Tensor:
    """Weighted sum of the parts a training stage uses.

    ``parts["buy"]`` is whichever buy loss the stage trains with (vanilla or
    reweighted); the stage only decides which parts must be present.
    """
    if stage not in STAGE_PARTS:
        raise ValueError(f"unknown loss stage {stage!r}")
    scale = {"buy": weights.buy, "group": weights.group, "click": weights.click}
    total = None
    for name in STAGE_PARTS[stage]:
        part = parts.get(name)
        if part is None:
            raise KeyError(f"stage {stage!r} needs a {name!r} loss")
        term = G.mul(part, scale[name]) if stage != "buy" else part
        total = term if total is None else G.add(total, term)
    return total
