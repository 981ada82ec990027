"""Synthetic corpus generator and the text corpus format.

Every user carries a hidden propensity (which decides how far they get
through the sessions), a taste vector and a price sensitivity. Portrait codes
and click histories are noisy views of those latents, so a model can recover
them. Each entry is generated from its own seeded stream, which makes the
corpus a pure function of the config and independent of generation order.

Corpus directory layout::

    items.csv   item_id,f1,f2,f3,f4,f5,price,session
    train.txt   entry_id|p1:...:p10|c1,c2,...|i1,...,i9|y1...y9
    test.txt    same, label field is ?????????
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .schema import (
    DEFAULT_SESSION_SIZES,
    ITEM_F1_VALUES,
    ITEM_F2_VALUES,
    ITEM_F3_VALUES,
    N_EXPOSED,
    N_PORTRAIT,
    N_SESSIONS,
    PORTRAIT_CARDINALITY,
    PRICE_RANGE,
    SESSION_LEN,
    Entry,
    ItemCatalog,
    SchemaError,
    entry_split_key,
)

log = logging.getLogger(__name__)

# Buyers per group in the competition train set.
COMPETITION_GROUP_COUNTS = (30912, 50267, 38191, 140717)
DEFAULT_GROUP_MIX = tuple(c / sum(COMPETITION_GROUP_COUNTS) for c in COMPETITION_GROUP_COUNTS)
# Share of clicks per session in the competition train set.
COMPETITION_SESSION_CLICKS = (4606977, 3608173, 2220648)

UNLABELED = "?" * N_EXPOSED


class CorpusFormatError(ValueError):
    """A corpus file could not be parsed."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass
class GenConfig:
    n_train: int = 20000
    n_test: int = 4000
    group_mix: tuple = DEFAULT_GROUP_MIX
    session_sizes: tuple = DEFAULT_SESSION_SIZES
    # buy-count distribution inside the frontier session, per group 1..3
    frontier_counts: tuple = ((0.45, 0.40, 0.15), (0.45, 0.40, 0.15), (0.25, 0.30, 0.45))
    mean_clicks: float = 40.0
    click_dispersion: float = 0.5
    max_clicks: int = 200
    session_click_share: tuple = tuple(c / sum(COMPETITION_SESSION_CLICKS) for c in COMPETITION_SESSION_CLICKS)
    bought_click_share: float = 0.3
    exposed_click_share: float = 0.1
    duplicate_rate: float = 0.05
    taste_dim: int = 3
    affinity_scale: float = 2.5
    propensity_noise: float = 0.3
    taste_noise: float = 0.25
    basket_hint_accuracy: float = 0.85
    seed: int = 0

    def __post_init__(self):
        self.group_mix = tuple(float(x) for x in self.group_mix)
        self.session_sizes = tuple(int(x) for x in self.session_sizes)
        self.frontier_counts = tuple(tuple(float(p) for p in row) for row in self.frontier_counts)
        self.session_click_share = tuple(float(x) for x in self.session_click_share)
        if len(self.group_mix) != 4 or abs(sum(self.group_mix) - 1.0) > 1e-6 or min(self.group_mix) < 0:
            raise ValueError(f"group_mix must be 4 non-negative probabilities summing to 1, got {self.group_mix}")
        if len(self.session_sizes) != N_SESSIONS or min(self.session_sizes) < SESSION_LEN:
            raise ValueError("each session needs at least 3 items")
        for row in self.frontier_counts:
            if len(row) != SESSION_LEN or abs(sum(row) - 1.0) > 1e-6:
                raise ValueError("frontier_counts rows must be 3 probabilities summing to 1")

    @classmethod
    def from_dict(cls, values: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**values)


@dataclass
class LatentUser:
    propensity: float
    taste: np.ndarray
    price_sensitivity: float
    basket_size: int
    group: int


@dataclass
class Corpus:
    catalog: ItemCatalog
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)


# -- catalog -------------------------------------------------------------------

def generate_catalog(cfg: GenConfig) -> ItemCatalog:
    rng = np.random.default_rng([cfg.seed, 0])
    n = sum(cfg.session_sizes)
    session = np.concatenate([[0]] + [np.full(k, s + 1) for s, k in enumerate(cfg.session_sizes)])
    lo, hi = np.log(PRICE_RANGE[0]), np.log(PRICE_RANGE[1])
    # later sessions lean towards the expensive end of the log range
    shape = {1: (1.5, 3.0), 2: (2.0, 2.0), 3: (3.0, 1.5)}
    u = np.concatenate([rng.beta(*shape[s + 1], size=k) for s, k in enumerate(cfg.session_sizes)])
    price = np.clip(np.rint(np.exp(lo + (hi - lo) * u)), *PRICE_RANGE).astype(np.int64)

    def pad(col, dtype):
        return np.concatenate([np.zeros(1, dtype), np.asarray(col, dtype)])

    return ItemCatalog(
        f1=pad(rng.choice(ITEM_F1_VALUES, n), np.int64),
        f2=pad(rng.choice(ITEM_F2_VALUES, n), np.int64),
        f3=pad(rng.choice(ITEM_F3_VALUES, n), np.int64),
        f4=pad(rng.random(n), np.float64),
        f5=pad(rng.random(n), np.float64),
        price=pad(price, np.int64),
        session=session.astype(np.int64),
    )


def item_feature_matrix(catalog: ItemCatalog) -> np.ndarray:
    """One-hot discrete features plus f4 and f5; row 0 (padding) is zeros."""
    cols = [
        np.eye(len(ITEM_F1_VALUES))[np.clip(catalog.f1 - 1, 0, None)],
        np.eye(len(ITEM_F2_VALUES))[catalog.f2],
        np.eye(len(ITEM_F3_VALUES))[np.clip(catalog.f3 - 1, 0, None)],
        catalog.f4[:, None],
        catalog.f5[:, None],
    ]
    phi = np.concatenate(cols, axis=1)
    phi[0] = 0.0
    return phi


class _Planted:
    """Catalog-level quantities shared by every entry of one corpus."""

    def __init__(self, cfg: GenConfig, catalog: ItemCatalog):
        self.cfg = cfg
        self.catalog = catalog
        phi = item_feature_matrix(catalog)
        rng = np.random.default_rng([cfg.seed, 4])
        w = rng.normal(size=(phi.shape[1], cfg.taste_dim))
        self.item_taste = phi @ w
        self.item_taste[1:] -= self.item_taste[1:].mean(axis=0)
        self.item_taste[1:] /= self.item_taste[1:].std(axis=0) + 1e-12
        logp = np.log(np.maximum(catalog.price, 1).astype(np.float64))
        self.log_price = (logp - logp[1:].mean()) / (logp[1:].std() + 1e-12)
        self.session_items = [catalog.ids(s) for s in range(1, N_SESSIONS + 1)]
        self.cum_mix = np.cumsum(cfg.group_mix)[:-1]

    def affinity(self, user: LatentUser, items: np.ndarray) -> np.ndarray:
        return self.item_taste[items] @ user.taste - user.price_sensitivity * self.log_price[items]


def _normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _quantize(value: float, cardinality: int) -> int:
    return min(int(_normal_cdf(value) * cardinality), cardinality - 1)


class _Generator:
    def __init__(self, cfg: GenConfig, catalog: ItemCatalog):
        self.cfg = cfg
        self.planted = _Planted(cfg, catalog)
        self._roots: dict[int, int] = {}
        self._users: dict[int, tuple[LatentUser, tuple]] = {}
        self._draws: dict[int, tuple] = {}

    # identity ------------------------------------------------------------
    def root_of(self, entry_id: int) -> int:
        """Entry whose user this entry belongs to (itself unless duplicated)."""
        if entry_id in self._roots:
            return self._roots[entry_id]
        rng = np.random.default_rng([self.cfg.seed, 1, entry_id])
        root = entry_id
        if entry_id > 0 and rng.random() < self.cfg.duplicate_rate:
            root = self.root_of(int(rng.integers(0, entry_id)))
        self._roots[entry_id] = root
        return root

    def user(self, root: int) -> tuple[LatentUser, tuple]:
        if root in self._users:
            return self._users[root]
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 2, root])
        z = float(rng.normal())
        taste = rng.normal(size=cfg.taste_dim)
        rho = float(rng.normal(scale=0.5))
        group = int(np.searchsorted(self.planted.cum_mix, _normal_cdf(z), side="right"))
        basket = 0
        if group > 0:
            basket = int(rng.choice(SESSION_LEN, p=cfg.frontier_counts[group - 1])) + 1
        user = LatentUser(z, taste, rho, basket, group)

        noisy = lambda v, s: v + float(rng.normal(scale=s))  # noqa: E731
        card = PORTRAIT_CARDINALITY
        t = np.resize(taste, 3)
        if rng.random() < cfg.basket_hint_accuracy:
            hint = 9 + int(rng.integers(2)) if group == 0 else 3 * (basket - 1) + int(rng.integers(3))
        else:
            hint = int(rng.integers(card[7]))
        portrait = (
            _quantize(noisy(t[2], cfg.taste_noise), card[0]),
            int(rng.integers(card[1])),
            _quantize(noisy(z, cfg.propensity_noise), card[2]),
            _quantize(noisy(t[0], cfg.taste_noise), card[3]),
            int(rng.integers(card[4])),
            _quantize(noisy(rho / 0.5, 0.3), card[5]),
            _quantize(noisy(t[1], cfg.taste_noise), card[6]),
            min(hint, card[7] - 1),
            int(noisy(t[1], cfg.taste_noise) > 0),
            int(rng.integers(card[9])),
        )
        self._users[root] = (user, portrait)
        return self._users[root]

    # per-entry draws -------------------------------------------------------
    def exposure_and_labels(self, entry_id: int) -> tuple[tuple, tuple]:
        if entry_id in self._draws:
            return self._draws[entry_id]
        user, _ = self.user(self.root_of(entry_id))
        rng = np.random.default_rng([self.cfg.seed, 3, entry_id])
        exposed = np.concatenate([rng.choice(items, SESSION_LEN, replace=False)
                                  for items in self.planted.session_items])
        labels = np.zeros(N_EXPOSED, dtype=np.int64)
        if user.group > 0:
            front = user.group - 1
            labels[:front * SESSION_LEN] = 1
            slots = np.arange(front * SESSION_LEN, (front + 1) * SESSION_LEN)
            logits = self.cfg.affinity_scale * self.planted.affinity(user, exposed[slots])
            # Plackett-Luce draw of the basket via Gumbel top-k
            keys = logits + rng.gumbel(size=SESSION_LEN)
            chosen = slots[np.argsort(-keys, kind="stable")[:user.basket_size]]
            labels[chosen] = 1
        out = (tuple(int(i) for i in exposed), tuple(int(b) for b in labels))
        self._draws[entry_id] = out
        return out

    def clicks(self, root: int) -> tuple:
        cfg, planted = self.cfg, self.planted
        user, _ = self.user(root)
        exposed, labels = self.exposure_and_labels(root)
        rng = np.random.default_rng([cfg.seed, 5, root])
        mean = cfg.mean_clicks * math.exp(0.4 * user.propensity - 0.08)
        r = cfg.click_dispersion
        n = min(int(rng.negative_binomial(r, r / (r + mean))), cfg.max_clicks)
        if n == 0:
            return ()
        bought = [i for i, y in zip(exposed, labels) if y]
        share = cfg.bought_click_share if bought else 0.0
        kind = rng.random(n)
        out = np.empty(n, dtype=np.int64)
        pick_bought = kind < share
        out[pick_bought] = np.asarray(bought or [0])[rng.integers(max(len(bought), 1), size=pick_bought.sum())]
        # the first session is always unlocked, so its exposed items are clickable
        pick_exposed = ~pick_bought & (kind < share + cfg.exposed_click_share)
        out[pick_exposed] = np.asarray(exposed[:SESSION_LEN])[rng.integers(SESSION_LEN, size=pick_exposed.sum())]
        rest = np.flatnonzero(~pick_bought & ~pick_exposed)
        sessions = rng.choice(N_SESSIONS, size=rest.size, p=cfg.session_click_share)
        for s, items in enumerate(planted.session_items):
            slot = rest[sessions == s]
            if slot.size:
                logits = planted.affinity(user, items)
                p = np.exp(logits - logits.max())
                out[slot] = rng.choice(items, size=slot.size, p=p / p.sum())
        return tuple(int(i) for i in out)

    def entry(self, entry_id: int, labeled: bool = True) -> Entry:
        root = self.root_of(entry_id)
        _, portrait = self.user(root)
        exposed, labels = self.exposure_and_labels(entry_id)
        return Entry(entry_id, portrait, self.clicks(root), exposed, labels if labeled else None)


def generate_entries(cfg: GenConfig, catalog: ItemCatalog, start: int = 0,
                     count: Optional[int] = None, labeled: bool = True) -> list[Entry]:
    """Entries ``start .. start+count-1`` (default: the training range)."""
    gen = _Generator(cfg, catalog)
    count = cfg.n_train if count is None else count
    return [gen.entry(e, labeled) for e in range(start, start + count)]


def generate_corpus(cfg: GenConfig) -> tuple[Corpus, list[Entry]]:
    """Build the corpus plus the hidden labels of its test entries."""
    catalog = generate_catalog(cfg)
    gen = _Generator(cfg, catalog)
    train = [gen.entry(e) for e in range(cfg.n_train)]
    test_truth = [gen.entry(e) for e in range(cfg.n_train, cfg.n_train + cfg.n_test)]
    test = [Entry(e.entry_id, e.portrait, e.clicks, e.exposed, None) for e in test_truth]
    return Corpus(catalog, train, test), test_truth


# -- file format ---------------------------------------------------------------

ITEMS_HEADER = "# item_id,f1,f2,f3,f4,f5,price,session"
ENTRIES_HEADER = "# entry_id|portrait|clicks|exposed|labels"


def format_entry(e: Entry) -> str:
    labels = UNLABELED if e.labels is None else "".join(str(int(b)) for b in e.labels)
    return "|".join((
        str(e.entry_id),
        ":".join(str(c) for c in e.portrait),
        ",".join(str(c) for c in e.clicks),
        ",".join(str(i) for i in e.exposed),
        labels,
    ))


def write_items(path, catalog: ItemCatalog) -> None:
    lines = [ITEMS_HEADER]
    for i in range(1, catalog.size + 1):
        lines.append(",".join((
            str(i), str(catalog.f1[i]), str(catalog.f2[i]), str(catalog.f3[i]),
            repr(float(catalog.f4[i])), repr(float(catalog.f5[i])),
            str(catalog.price[i]), str(catalog.session[i]),
        )))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_entries(path, entries: Iterable[Entry]) -> None:
    lines = [ENTRIES_HEADER] + [format_entry(e) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _data_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def read_items(path) -> ItemCatalog:
    rows = []
    for lineno, line in _data_lines(path):
        parts = line.split(",")
        if len(parts) != 8:
            raise CorpusFormatError(path, lineno, f"expected 8 fields, got {len(parts)}")
        try:
            item = int(parts[0])
            row = (int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]),
                   float(parts[5]), int(parts[6]), int(parts[7]))
        except ValueError as exc:
            raise CorpusFormatError(path, lineno, str(exc)) from None
        if item != len(rows) + 1:
            raise CorpusFormatError(path, lineno, f"item ids must run 1..V in order, got {item}")
        rows.append(row)
    if not rows:
        raise CorpusFormatError(path, 0, "no items")
    cols = list(zip(*rows))
    ints = lambda c: np.concatenate([[0], np.asarray(c, np.int64)])  # noqa: E731
    floats = lambda c: np.concatenate([[0.0], np.asarray(c, np.float64)])  # noqa: E731
    try:
        return ItemCatalog(ints(cols[0]), ints(cols[1]), ints(cols[2]), floats(cols[3]),
                           floats(cols[4]), ints(cols[5]), ints(cols[6]))
    except SchemaError as exc:
        raise CorpusFormatError(path, 0, str(exc)) from None


def _int_list(text: str, sep: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(sep)) if text else ()


def parse_entry(line: str) -> Entry:
    parts = line.split("|")
    if len(parts) != 5:
        raise ValueError(f"expected 5 '|'-separated fields, got {len(parts)}")
    entry_id = int(parts[0])
    portrait = _int_list(parts[1], ":")
    clicks = _int_list(parts[2], ",")
    exposed = _int_list(parts[3], ",")
    raw = parts[4]
    if raw == UNLABELED:
        labels = None
    elif len(raw) == N_EXPOSED and set(raw) <= {"0", "1"}:
        labels = tuple(int(c) for c in raw)
    else:
        raise ValueError(f"label field must be 9 characters of 0/1 or '{UNLABELED}', got {raw!r}")
    if len(portrait) != N_PORTRAIT:
        raise ValueError(f"expected {N_PORTRAIT} portrait codes, got {len(portrait)}")
    if len(exposed) != N_EXPOSED:
        raise ValueError(f"expected {N_EXPOSED} exposed items, got {len(exposed)}")
    return Entry(entry_id, portrait, clicks, exposed, labels)


def read_entries(path, catalog: ItemCatalog, strict_labels: bool = True) -> list[Entry]:
    """Parse and validate an entries file.

    With ``strict_labels=False`` label vectors that break the unlock order are
    accepted, which is needed to read back model predictions.
    """
    out = []
    for lineno, line in _data_lines(path):
        try:
            entry = parse_entry(line)
            entry.validate(catalog, strict_labels)
        except ValueError as exc:
            raise CorpusFormatError(path, lineno, str(exc)) from None
        out.append(entry)
    return out


def write_corpus(path, corpus: Corpus) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_items(root / "items.csv", corpus.catalog)
    write_entries(root / "train.txt", corpus.train)
    write_entries(root / "test.txt", corpus.test)


def read_corpus(path) -> Corpus:
    root = Path(path)
    catalog = read_items(root / "items.csv")
    train = read_entries(root / "train.txt", catalog)
    test_path = root / "test.txt"
    test = read_entries(test_path, catalog) if test_path.exists() else []
    return Corpus(catalog, train, test)


# -- train / validation split ------------------------------------------------------

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def split_train_val(entries: Sequence[Entry], ratio: float = 0.85,
                    seed: int = 0) -> tuple[list[Entry], list[Entry]]:
    """Split by user: entries with identical portraits always land together."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    train, val = [], []
    salt = _splitmix64(seed & 0xFFFFFFFFFFFFFFFF)
    for e in entries:
        u = _splitmix64(entry_split_key(e.portrait) ^ salt) / 2.0**64
        (train if u < ratio else val).append(e)
    return train, val
