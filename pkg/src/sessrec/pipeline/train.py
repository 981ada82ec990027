"""Training, evaluation, prediction and the A-G ablation."""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import ndgrad as G
from ..datagen import Corpus, split_train_val
from ..losses import loss_buy, loss_buy_reweight, loss_click, loss_combined, loss_group
from ..model import (
    Batch,
    FeatureEncoder,
    encode_entries,
    forward_click,
    init_params,
    item_token_table,
    predict_batch,
)
from ..ndgrad import CheckpointError, Tensor
from ..schema import N_EXPOSED, N_GROUPS, Entry, ItemCatalog
from .augment import permute_batch, predict_tta, random_session_permutations
from .config import DESCRIPTIONS, LETTERS, RunConfig
from .metrics import categorization_accuracy, refine_array, threshold

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""


@dataclass
class EvalReport:
    accuracy: float
    per_group_accuracy: dict
    group_accuracy: Optional[float]
    n_entries: int
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = -1
    baseline_accuracy: Optional[float] = None
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    run: RunConfig
    params: dict
    encoder: FeatureEncoder

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        G.save_tensors(path, {k: v.data for k, v in self.params.items()})
        meta = {
            "run": self.run.to_dict(),
            "encoder": self.encoder.to_dict(),
            "catalog_size": self.encoder.catalog.size,
        }
        meta_path(path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path, catalog: ItemCatalog) -> "Checkpoint":
        path = Path(path)
        try:
            meta = json.loads(meta_path(path).read_text())
        except FileNotFoundError:
            raise CheckpointError(f"missing checkpoint metadata {meta_path(path)}") from None
        if meta["catalog_size"] != catalog.size:
            raise CheckpointError(
                f"checkpoint was trained on {meta['catalog_size']} items, corpus has {catalog.size}")
        run = RunConfig.from_dict(meta["run"])
        encoder = FeatureEncoder.from_dict(catalog, meta["encoder"])
        arrays = G.load_tensors(path)
        expect = init_params(run.model, encoder, with_click=run.uses_click)
        if set(arrays) != set(expect):
            raise CheckpointError(f"checkpoint parameters do not match a config-{run.letter} model")
        for name, t in expect.items():
            if arrays[name].shape != t.shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape}, model expects {t.shape}")
        params = {k: Tensor(arrays[k], requires_grad=True, dtype=np.float32, name=k) for k in expect}
        return cls(run, params, encoder)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


# -- inference -----------------------------------------------------------------------

def _forward_fn(ckpt: Checkpoint) -> Callable[[Batch], tuple]:
    def forward(batch: Batch):
        out = predict_batch(ckpt.params, batch, ckpt.encoder, ckpt.run.model)
        return out.buy.data, None if out.group is None else out.group.data
    return forward


def predict_probs(ckpt: Checkpoint, batch: Batch, tta="none", seed: int = 0,
                  workers: int = 1) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Buy and group probabilities for a whole batch, in chunks.

    Chunks are independent, so ``workers > 1`` evaluates them concurrently on
    the frozen parameters.
    """
    forward = _forward_fn(ckpt)
    size = ckpt.run.eval_batch
    chunks = [np.arange(s, min(s + size, len(batch))) for s in range(0, len(batch), size)]

    def run(i):
        rng = np.random.default_rng([seed, i])
        return predict_tta(batch.take(chunks[i]), forward, tta, rng)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(chunks))))
    else:
        results = [run(i) for i in range(len(chunks))]
    if not results:
        return np.zeros((0, N_EXPOSED)), np.zeros((0, N_GROUPS))
    buy = np.concatenate([r[0] for r in results])
    group = None if results[0][1] is None else np.concatenate([r[1] for r in results])
    return buy, group


def decide(ckpt: Checkpoint, buy: np.ndarray, group: Optional[np.ndarray]) -> np.ndarray:
    bits = threshold(buy)
    if ckpt.run.uses_group and group is not None:
        bits = refine_array(bits, group)
    return bits


def evaluate_batch(ckpt: Checkpoint, batch: Batch, tta="none", workers: int = 1) -> EvalReport:
    buy, group = predict_probs(ckpt, batch, tta, workers=workers)
    bits = decide(ckpt, buy, group)
    truth = batch.labels.astype(np.int64)
    groups = batch.groups
    per_group = {}
    for g in range(N_GROUPS):
        sel = groups == g
        if sel.any():
            per_group[g] = categorization_accuracy(bits[sel], truth[sel])
    group_acc = None
    if ckpt.run.uses_group and group is not None:
        group_acc = float((group.argmax(axis=1) == groups).mean())
    return EvalReport(categorization_accuracy(bits, truth), per_group, group_acc, len(batch))


def validation_entries(run: RunConfig, corpus: Corpus) -> list[Entry]:
    return split_train_val(corpus.train, run.val_ratio, run.split_seed)[1]


def evaluate(ckpt: Checkpoint, entries: Sequence[Entry], tta=None, workers: int = 1) -> EvalReport:
    """Score labeled ``entries``; ``tta`` defaults to the run's own setting."""
    tta = ckpt.run.tta_mode if tta is None else tta
    batch = encode_entries(entries, ckpt.run.model.max_clicks, ckpt.run.model.user_vocab)
    if batch.labels is None:
        raise ValueError("evaluation needs labeled entries")
    return evaluate_batch(ckpt, batch, tta, workers)


def predict(ckpt: Checkpoint, entries: Sequence[Entry], tta=None, workers: int = 1) -> list[Entry]:
    """Copies of ``entries`` carrying predicted buy vectors."""
    tta = ckpt.run.tta_mode if tta is None else tta
    batch = encode_entries(entries, ckpt.run.model.max_clicks, ckpt.run.model.user_vocab)
    buy, group = predict_probs(ckpt, batch, tta, workers=workers)
    bits = decide(ckpt, buy, group)
    return [Entry(e.entry_id, e.portrait, e.clicks, e.exposed, tuple(int(b) for b in row))
            for e, row in zip(entries, bits)]


def majority_baseline(train: Sequence[Entry], val: Sequence[Entry]) -> tuple[tuple, float]:
    """Most frequent training label vector and its accuracy on ``val``."""
    top = Counter(e.labels for e in train).most_common(1)[0][0]
    truth = np.array([e.labels for e in val])
    return top, categorization_accuracy(np.tile(top, (len(val), 1)), truth)


# -- training ---------------------------------------------------------------------------

class ClickSampler:
    """(user, history prefix, target) pairs: one clicked target, one unclicked."""

    def __init__(self, entries: Sequence[Entry], n_items: int, max_clicks: int):
        self.clicks = [np.asarray(e.clicks, dtype=np.int64) for e in entries]
        self.clicked = [set(e.clicks) for e in entries]
        self.portrait = np.array([e.portrait for e in entries], dtype=np.int64).reshape(-1, 10)
        self.n_items = n_items
        self.max_clicks = max_clicks

    def sample(self, idx: np.ndarray, rng: np.random.Generator):
        rows, hist, target, label = [], [], [], []
        h = self.max_clicks
        for i in idx:
            c = self.clicks[i]
            if len(c) == 0 or len(self.clicked[i]) >= self.n_items:
                continue
            t = int(rng.integers(len(c)))
            prefix = np.zeros(h, np.int64)
            recent = c[max(0, t - h):t]
            prefix[:len(recent)] = recent
            neg = int(rng.integers(1, self.n_items + 1))
            while neg in self.clicked[i]:
                neg = int(rng.integers(1, self.n_items + 1))
            for item, y in ((int(c[t]), 1.0), (neg, 0.0)):
                rows.append(i)
                hist.append(prefix)
                target.append(item)
                label.append(y)
        if not rows:
            return None
        return (self.portrait[rows], np.array(hist), np.array(target, np.int64),
                np.array(label, np.float32))


def step_loss(run: RunConfig, params: dict, encoder: FeatureEncoder, batch: Batch,
              clicks=None) -> tuple[Tensor, dict]:
    """Active training objective for ``run`` on one batch (call inside a tape)."""
    cfg = run.model
    items = None
    if cfg.variant == "transformer":
        items = item_token_table(params, encoder)
    out = predict_batch(params, batch, encoder, cfg, items)
    parts: dict[str, Tensor] = {}
    if run.uses_reweight:
        parts["buy"] = loss_buy_reweight(out.buy, batch.labels, run.loss)
    else:
        parts["buy"] = loss_buy(out.buy, batch.labels)
    if run.uses_group:
        parts["group"] = loss_group(out.group, batch.groups)
    if run.uses_click:
        if clicks is None:
            parts["click"] = Tensor(np.zeros((), dtype=out.buy.dtype))
        else:
            portrait, hist, target, label = clicks
            pred = forward_click(params, portrait, hist, target, encoder, cfg, items=items)
            parts["click"] = loss_click(pred, label)
    return loss_combined(parts, run.loss, run.loss_stage), parts


def _snapshot(params: dict) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype, name=k) for k, v in params.items()}


def train(run: RunConfig, corpus: Corpus, progress: Optional[Callable[[str], None]] = None
          ) -> tuple[Checkpoint, EvalReport]:
    """Fit one configuration and return its best-validation checkpoint."""
    started = time.perf_counter()
    say = progress or log.info
    train_entries, val_entries = split_train_val(corpus.train, run.val_ratio, run.split_seed)
    if run.max_train:
        train_entries = train_entries[:run.max_train]
    cfg = run.model
    encoder = FeatureEncoder.fit(corpus.catalog, cfg.n_bins)
    tb = encode_entries(train_entries, cfg.max_clicks, cfg.user_vocab)
    vb = encode_entries(val_entries, cfg.max_clicks, cfg.user_vocab)
    params = init_params(cfg, encoder, seed=run.seed, with_click=run.uses_click)
    opt = G.Adam(params, lr=run.lr)
    sampler = ClickSampler(train_entries, corpus.catalog.size, cfg.max_clicks) if run.uses_click else None
    rng = np.random.default_rng([run.seed, 7])

    best_acc, best_params, best_epoch = -1.0, None, -1
    loss_curve, val_curve = [], []
    for epoch in range(run.epochs):
        order = rng.permutation(len(tb))
        total, steps = 0.0, 0
        for start in range(0, len(order), run.batch_size):
            idx = order[start:start + run.batch_size]
            batch = tb.take(idx)
            if run.train_augment:
                batch = permute_batch(batch, random_session_permutations(rng, len(idx)))
            clicks = sampler.sample(idx, rng) if sampler else None
            opt.zero_grad()
            try:
                with G.Tape():
                    loss, _ = step_loss(run, params, encoder, batch, clicks)
                G.backward(loss)
            except G.NonFiniteError as exc:
                raise NumericalError(f"config {run.letter}, epoch {epoch + 1}, step {steps + 1}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"config {run.letter}, epoch {epoch + 1}: loss is {value}")
            opt.step()
            total += value
            steps += 1
        loss_curve.append(total / max(steps, 1))
        acc = evaluate_batch(Checkpoint(run, params, encoder), vb, "none").accuracy
        val_curve.append(acc)
        if acc > best_acc:
            best_acc, best_params, best_epoch = acc, _snapshot(params), epoch
        say(f"[{run.letter}] epoch {epoch + 1}/{run.epochs} loss {loss_curve[-1]:.4f} val acc {acc:.4f}")

    ckpt = Checkpoint(run, best_params if best_params is not None else params, encoder)
    report = evaluate_batch(ckpt, vb, run.tta_mode, run.workers)
    report.train_loss = loss_curve
    report.val_accuracy = val_curve
    report.best_epoch = best_epoch
    if train_entries and val_entries:
        report.baseline_accuracy = majority_baseline(train_entries, val_entries)[1]
    report.seconds = time.perf_counter() - started
    return ckpt, report


# -- ablation ------------------------------------------------------------------------------

@dataclass
class AblationRow:
    letter: str
    description: str
    validation: list
    test: list

    @staticmethod
    def _fmt(xs):
        if not xs:
            return "n/a"
        return f"{np.mean(xs):.5f} ± {np.std(xs):.5f}"

    def line(self) -> str:
        return f"{self.letter}  {self.description:<52} | {self._fmt(self.validation):>19} | {self._fmt(self.test):>19}"


def ablate(corpus: Corpus, base: RunConfig, seeds: Sequence[int],
           test_truth: Optional[Sequence[Entry]] = None,
           progress: Optional[Callable[[str], None]] = None) -> list[AblationRow]:
    """Train configurations A-F per seed; G re-scores F's checkpoint with TTA."""
    rows = {letter: AblationRow(letter, DESCRIPTIONS[letter], [], []) for letter in LETTERS}
    for seed in seeds:
        for letter in LETTERS[:-1]:
            run = RunConfig(**{**base.to_dict(), "letter": letter, "seed": seed})
            ckpt, report = train(run, corpus, progress)
            rows[letter].validation.append(report.accuracy)
            if test_truth:
                rows[letter].test.append(evaluate(ckpt, test_truth, "none").accuracy)
            if letter == "F":
                g_ckpt = Checkpoint(run.with_letter("G"), ckpt.params, ckpt.encoder)
                val = validation_entries(run, corpus)
                rows["G"].validation.append(evaluate(g_ckpt, val).accuracy)
                if test_truth:
                    rows["G"].test.append(evaluate(g_ckpt, test_truth).accuracy)
    return [rows[letter] for letter in LETTERS]


def format_ablation(rows: Sequence[AblationRow]) -> str:
    head = f"   {'Model':<52} | {'validation':>19} | {'test':>19}"
    return "\n".join([head, "-" * len(head)] + [r.line() for r in rows])
