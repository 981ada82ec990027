"""Users, items, sessions, buy labels and groups.

Nine items are exposed per user in three sessions of three. A session is
locked until every item of the previous session has been bought, which makes
only some 9-bit buy vectors possible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

N_PORTRAIT = 10
N_EXPOSED = 9
SESSION_LEN = 3
N_SESSIONS = 3
N_GROUPS = 4
DEFAULT_SESSION_SIZES = (39, 108, 234)

# Unique portrait values per feature in the competition train set.
PORTRAIT_CARDINALITY = (3, 1363, 20, 10, 195, 49, 3, 11, 2, 2164)

# Value sets of the three discrete item features.
ITEM_F1_VALUES = (1, 2, 3, 4)
ITEM_F2_VALUES = tuple(range(10))
ITEM_F3_VALUES = (1, 2)
PRICE_RANGE = (150, 16621)


class SchemaError(ValueError):
    pass


# -- labels and groups ---------------------------------------------------------

def is_valid(y: Sequence[int]) -> bool:
    """True iff a 9-bit buy vector respects the session unlock order."""
    bits = [int(b) for b in y]
    if len(bits) != N_EXPOSED or any(b not in (0, 1) for b in bits):
        return False
    for s in range(1, N_SESSIONS):
        if any(bits[s * SESSION_LEN:(s + 1) * SESSION_LEN]) and not all(bits[:s * SESSION_LEN]):
            return False
    return True


def group_of(y: Sequence[int]) -> int:
    """Group by buy count: 0 -> 0, 1-3 -> 1, 4-6 -> 2, 7-9 -> 3."""
    n = int(np.sum(y))
    return (n + SESSION_LEN - 1) // SESSION_LEN


def group_of_array(y: np.ndarray) -> np.ndarray:
    """Vectorised :func:`group_of` over the last axis."""
    return (np.asarray(y).sum(axis=-1) + SESSION_LEN - 1) // SESSION_LEN


def valid_mask(y: np.ndarray) -> np.ndarray:
    """Vectorised :func:`is_valid` over rows of a ``[..., 9]`` 0/1 array."""
    y = np.asarray(y).astype(bool)
    s1, s2, s3 = y[..., 0:3], y[..., 3:6], y[..., 6:9]
    ok2 = ~s2.any(-1) | s1.all(-1)
    ok3 = ~s3.any(-1) | (s1.all(-1) & s2.all(-1))
    return ok2 & ok3


def frontier_session(group: int) -> Optional[int]:
    """Index of the last unlocked session with purchases for a group (None for group 0)."""
    return None if group == 0 else group - 1


# -- items ---------------------------------------------------------------------

@dataclass(frozen=True)
class ItemCatalog:
    """Item table indexed by item id 1..V (row 0 is unused padding)."""

    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    f4: np.ndarray
    f5: np.ndarray
    price: np.ndarray
    session: np.ndarray

    def __post_init__(self):
        n = len(self.session)
        for name in ("f1", "f2", "f3", "f4", "f5", "price"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"catalog column {name} has wrong length")
        sess = self.session[1:]
        if len(sess) and (np.any(np.diff(sess) < 0) or sess[0] != 1 or sess[-1] != N_SESSIONS
                          or set(np.unique(sess)) != {1, 2, 3}):
            raise SchemaError("sessions must partition item ids into contiguous ranges 1, 2, 3")
        if np.any((self.f4[1:] < 0) | (self.f4[1:] > 1) | (self.f5[1:] < 0) | (self.f5[1:] > 1)):
            raise SchemaError("f4/f5 must lie in [0, 1]")
        if np.any(self.price[1:] < 1):
            raise SchemaError("price must be >= 1")

    @property
    def size(self) -> int:
        return len(self.session) - 1

    def ids(self, session: Optional[int] = None) -> np.ndarray:
        all_ids = np.arange(1, self.size + 1)
        return all_ids if session is None else all_ids[self.session[1:] == session]

    def session_sizes(self) -> tuple[int, ...]:
        return tuple(int((self.session[1:] == s).sum()) for s in range(1, N_SESSIONS + 1))

    def contains(self, item_id: int) -> bool:
        return 1 <= item_id <= self.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ItemCatalog):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("f1", "f2", "f3", "f4", "f5", "price", "session"))

    __hash__ = None


# -- entries -------------------------------------------------------------------

@dataclass(frozen=True)
class Entry:
    entry_id: int
    portrait: tuple[int, ...]
    clicks: tuple[int, ...]
    exposed: tuple[int, ...]
    labels: Optional[tuple[int, ...]] = None

    @property
    def group(self) -> Optional[int]:
        return None if self.labels is None else group_of(self.labels)

    def validate(self, catalog: ItemCatalog, strict_labels: bool = True) -> None:
        if len(self.portrait) != N_PORTRAIT:
            raise SchemaError(f"entry {self.entry_id}: expected {N_PORTRAIT} portrait codes")
        if len(self.exposed) != N_EXPOSED:
            raise SchemaError(f"entry {self.entry_id}: expected {N_EXPOSED} exposed items")
        for item in (*self.clicks, *self.exposed):
            if not catalog.contains(item):
                raise SchemaError(f"entry {self.entry_id}: unknown item id {item}")
        for j, item in enumerate(self.exposed):
            if catalog.session[item] != j // SESSION_LEN + 1:
                raise SchemaError(
                    f"entry {self.entry_id}: exposed slot {j + 1} holds item {item} "
                    f"from session {catalog.session[item]}"
                )
        if strict_labels and self.labels is not None and not is_valid(self.labels):
            raise SchemaError(f"entry {self.entry_id}: label {self.labels} violates session unlock order")


# -- discretisation --------------------------------------------------------------

@dataclass(frozen=True)
class Discretizer:
    """Maps reals to bins ``[0, n_bins)`` by sorted interior edges."""

    edges: tuple[float, ...]

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1

    def __call__(self, x):
        return discretize(self, x)


def fit_discretizer(values, n_bins: int) -> Discretizer:
    """Quantile bins; edges sit halfway between neighbouring sorted values.

    A quantile that falls inside a run of ties moves to the nearest unused
    split between distinct values, so heavily tied data gets fewer bins.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise SchemaError("cannot fit a discretizer on no values")
    if n_bins < 1:
        raise SchemaError("n_bins must be positive")
    splits = np.flatnonzero(v[1:] > v[:-1]) + 1   # i where v[i-1] < v[i]
    chosen: list[int] = []
    for k in range(1, n_bins):
        free = splits[splits > chosen[-1]] if chosen else splits
        if free.size == 0:
            break
        target = k * v.size / n_bins
        chosen.append(int(free[np.argmin(np.abs(free - target))]))
    edges = tuple(float(0.5 * (v[i - 1] + v[i])) for i in chosen)
    return Discretizer(edges)


def discretize(d: Discretizer, x):
    out = np.searchsorted(np.asarray(d.edges, dtype=np.float64), np.asarray(x, dtype=np.float64), side="right")
    return int(out) if np.ndim(out) == 0 else out


# -- train/validation keys -------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def entry_split_key(portrait: Sequence[int]) -> int:
    """64-bit FNV-1a over the portrait codes, each as 8 little-endian signed bytes."""
    h = _FNV_OFFSET
    for code in portrait:
        for byte in int(code).to_bytes(8, "little", signed=True):
            h ^= byte
            h = (h * _FNV_PRIME) & _MASK64
    return h
