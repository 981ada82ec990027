"""Within-session shuffling for training augmentation and test-time averaging."""

from __future__ import annotations

import itertools
from dataclasses import replace
from typing import Callable, Optional, Union

import numpy as np

from ..model import Batch
from ..schema import N_EXPOSED, N_SESSIONS, SESSION_LEN, Entry

_SESSION_PERMS = np.array(list(itertools.permutations(range(SESSION_LEN))))


def all_session_permutations() -> np.ndarray:
    """The 216 slot permutations ``[216, 9]`` that only move items inside a session.

    Row ``p`` means new slot ``j`` holds the item from old slot ``p[j]``.
    Row 0 is the identity.
    """
    rows = []
    for a, b, c in itertools.product(_SESSION_PERMS, repeat=N_SESSIONS):
        rows.append(np.concatenate([a, b + SESSION_LEN, c + 2 * SESSION_LEN]))
    return np.array(rows, dtype=np.int64)


def random_session_permutations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent within-session permutations, shape ``[n, 9]``."""
    picks = rng.integers(len(_SESSION_PERMS), size=(n, N_SESSIONS))
    offsets = np.arange(N_SESSIONS) * SESSION_LEN
    return (_SESSION_PERMS[picks] + offsets[None, :, None]).reshape(n, N_EXPOSED)


def shuffle_within_sessions(entry: Entry, rng: np.random.Generator,
                            perm: Optional[np.ndarray] = None) -> tuple[Entry, np.ndarray]:
    """Permute exposed items (and their labels) inside each session.

    Returns the shuffled entry and the permutation used.
    """
    perm = random_session_permutations(rng, 1)[0] if perm is None else np.asarray(perm)
    exposed = tuple(entry.exposed[k] for k in perm)
    labels = None if entry.labels is None else tuple(entry.labels[k] for k in perm)
    return replace(entry, exposed=exposed, labels=labels), perm


def permute_batch(batch: Batch, perms: np.ndarray) -> Batch:
    """Apply one permutation per row (``perms`` is ``[B, 9]`` or ``[9]``)."""
    perms = np.broadcast_to(perms, (len(batch), N_EXPOSED))
    rows = np.arange(len(batch))[:, None]
    labels = None if batch.labels is None else batch.labels[rows, perms]
    return Batch(batch.portrait, batch.clicks, batch.click_mask,
                 batch.exposed[rows, perms], labels, batch.entry_ids)


def unpermute(values: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Map outputs of a permuted batch back to the original slot order."""
    perms = np.broadcast_to(perms, values.shape)
    out = np.empty_like(values)
    out[np.arange(len(values))[:, None], perms] = values
    return out


TTAMode = Union[str, int]


def predict_tta(batch: Batch, forward: Callable[[Batch], tuple], mode: TTAMode = "none",
                rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Average buy and group probabilities over shuffled copies of ``batch``.

    ``forward(batch)`` returns ``(buy [B, 9], group [B, 4] or None)`` as numpy.
    ``mode`` is ``"none"``, ``"full"`` (all 216 permutations) or an integer K:
    the original order plus K random draws.
    """
    if mode == "none" or mode == 0:
        return forward(batch)
    if mode == "full":
        perm_sets = list(all_session_permutations())
    else:
        k = int(mode)
        rng = np.random.default_rng(0) if rng is None else rng
        perm_sets = [np.arange(N_EXPOSED)] + [random_session_permutations(rng, len(batch)) for _ in range(k)]
    buy_sum, group_sum = None, None
    for perms in perm_sets:
        buy, group = forward(permute_batch(batch, perms))
        buy = unpermute(np.asarray(buy, dtype=np.float64), perms)
        buy_sum = buy if buy_sum is None else buy_sum + buy
        if group is not None:
            group = np.asarray(group, dtype=np.float64)
            group_sum = group if group_sum is None else group_sum + group
    n = len(perm_sets)
    return buy_sum / n, None if group_sum is None else group_sum / n
