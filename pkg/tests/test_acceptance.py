"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``. The end-to-end
training checks (criteria 8 and 9) take roughly 20 minutes on one CPU.
"""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from sessrec import ndgrad as G
from sessrec.datagen import DEFAULT_GROUP_MIX, GenConfig, generate_corpus, split_train_val, write_corpus
from sessrec.losses import LossWeights, loss_buy, loss_buy_reweight
from sessrec.model import FeatureEncoder, ModelConfig, encode_entries, init_params, predict_batch
from sessrec.ndgrad.gradcheck import check_gradients
from sessrec.pipeline import (
    Checkpoint,
    RunConfig,
    ablate,
    all_session_permutations,
    categorization_accuracy,
    permute_batch,
    predict,
    predict_tta,
    refine,
    train,
)
from sessrec.pipeline.train import format_ablation, step_loss, ClickSampler
from sessrec.schema import is_valid, valid_mask

from conftest import ACCEPTANCE, TinySetup
from test_ndgrad import _op_cases

ALL_BITS = list(itertools.product((0, 1), repeat=9))
VALID = [v for v in ALL_BITS if is_valid(v)]


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
    assert passed, detail


# -- 1 ---------------------------------------------------------------------------------

def test_c1_gradient_suite():
    started = time.perf_counter()
    failures, checks = [], 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for name, params, fn in _op_cases(rng):
            checks += 1
            try:
                check_gradients(lambda: fn(params), params, rtol=1e-4, atol=1e-3)
            except AssertionError as exc:
                failures.append(f"{name}/seed{seed}: {exc}")
        setup = TinySetup(seed, layers=2)
        clicks = ClickSampler(setup.entries, setup.catalog.size, setup.cfg.max_clicks).sample(
            np.arange(len(setup.entries)), np.random.default_rng(seed))
        checks += 1
        try:
            check_gradients(lambda: step_loss(setup.run, setup.params, setup.encoder, setup.batch, clicks)[0],
                            setup.params, rtol=1e-4, atol=1e-3, max_entries=6,
                            rng=np.random.default_rng(seed))
        except AssertionError as exc:
            failures.append(f"config-F loss/seed{seed}: {exc}")
    seconds = time.perf_counter() - started
    record("C1 gradient suite", not failures and seconds < 120,
           f"{checks} checks over 20 seeds, {len(failures)} failures, {seconds:.1f}s"
           + (f"; first: {failures[0]}" if failures else ""))


# -- 2 ---------------------------------------------------------------------------------

def _eq7_oracle(bits, g):
    y = list(bits)
    if g == 0:
        return [0] * 9
    if g == 1:
        return y[:3] + [0] * 6
    if g == 2:
        return [1, 1, 1] + y[3:9]
    return [1] * 6 + y[6:9]


def test_c2a_refinement_matches_rule():
    started = time.perf_counter()
    mismatches = sum(list(refine(bits, np.eye(4)[g])) != _eq7_oracle(bits, g)
                     for bits in ALL_BITS for g in range(4))
    seconds = time.perf_counter() - started
    record("C2a refinement rule", mismatches == 0 and seconds < 1.0,
           f"2048 cases, {mismatches} mismatches, {seconds:.3f}s")


def test_c2b_refinement_outputs_unlock_valid():
    # Kept as stated even though the literal group-2 row cannot satisfy it:
    # [1,1,1, y4..y6, y7..y9] is invalid whenever session 2 is incomplete but
    # session 3 is not empty.
    outs = np.array([refine(bits, np.eye(4)[g]) for bits in ALL_BITS for g in range(4)])
    invalid = int((~valid_mask(outs)).sum())
    record("C2b refinement validity", invalid == 0,
           f"{invalid} of 2048 refined vectors break the unlock order (all from the group-2 row)")


# -- 3 ---------------------------------------------------------------------------------

def _bce(p, y):
    p = min(max(p, 1e-7), 1 - 1e-7)
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def _weight(y, j, w):
    n = sum(y)
    group = 0 if n == 0 else (n + 2) // 3
    session = j // 3 + 1
    if group == 0 or session > group:
        return w.weak_negative
    if session < group:
        return w.weak_positive
    return w.strong_positive if y[j] else w.strong_negative


def test_c3_loss_oracle():
    rng = np.random.default_rng(3)
    w = LossWeights()
    ones = LossWeights(weak_positive=1, strong_positive=1, strong_negative=1, weak_negative=1)
    worst_oracle = worst_ones = 0.0
    for _ in range(1000):
        y = VALID[rng.integers(len(VALID))]
        p = rng.uniform(0, 1, size=9)
        pt = G.Tensor(p[None], dtype=np.float64)
        oracle = sum(_weight(y, j, w) * _bce(p[j], y[j]) for j in range(9))
        worst_oracle = max(worst_oracle, abs(float(loss_buy_reweight(pt, [y], w).data) - oracle))
        worst_ones = max(worst_ones, abs(float(loss_buy_reweight(pt, [y], ones).data)
                                         - float(loss_buy(pt, [y]).data)))
    record("C3 loss oracle", worst_oracle <= 1e-6 and worst_ones <= 1e-9,
           f"max |diff| vs oracle {worst_oracle:.2e}, vs plain loss at unit weights {worst_ones:.2e}")


# -- 4 ---------------------------------------------------------------------------------

def test_c4_metric():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 50))
        truth = [VALID[i] for i in rng.integers(len(VALID), size=m)]
        preds = [tuple(b ^ (rng.random() < 0.05) for b in t) for t in truth]
        hits = 0
        for p, t in zip(preds, truth):
            if all(a == b for a, b in zip(p, t)):
                hits += 1
        mismatches += categorization_accuracy(preds, truth) != hits / m
    one_wrong = categorization_accuracy([[1, 1, 1, 1, 0, 0, 0, 0, 0]], [[1, 1, 1, 0, 0, 0, 0, 0, 0]])
    record("C4 categorization accuracy", mismatches == 0 and one_wrong == 0.0,
           f"1000 sets, {mismatches} mismatches; single wrong item scores {one_wrong}")


# -- 5 ---------------------------------------------------------------------------------

def test_c5_tta_invariance():
    corpus, _ = generate_corpus(GenConfig(n_train=50, n_test=0, seed=5))
    cfg = ModelConfig.desk()
    enc = FeatureEncoder.fit(corpus.catalog)
    params = init_params(cfg, enc, seed=5)
    batch = encode_entries(corpus.train, cfg.max_clicks)

    def forward(b):
        out = predict_batch(params, b, enc, cfg)
        return out.buy.data, out.group.data

    ref_buy, ref_group = predict_tta(batch, forward, "full")
    rng = np.random.default_rng(5)
    perms = all_session_permutations()[rng.integers(216, size=len(batch))]
    buy, group = predict_tta(permute_batch(batch, perms), forward, "full")
    # align by item: slot j of the permuted input holds original slot perms[:, j]
    aligned = np.take_along_axis(ref_buy, perms, axis=1)
    worst = max(np.abs(buy - aligned).max(), np.abs(group - ref_group).max())
    record("C5 TTA invariance", worst <= 1e-5, f"50 entries, max coordinate diff {worst:.2e}")


# -- 6 and 7 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def big_corpus():
    cfg = GenConfig(n_train=50_000, n_test=0)
    return cfg, generate_corpus(cfg)[0]


def test_c6_generator_fidelity(big_corpus, tmp_path):
    cfg, corpus = big_corpus
    groups = np.bincount([e.group for e in corpus.train], minlength=4) / len(corpus.train)
    l1 = float(np.abs(groups - DEFAULT_GROUP_MIX).sum())
    all_valid = all(is_valid(e.labels) for e in corpus.train)
    clicks = np.concatenate([np.asarray(e.clicks, dtype=np.int64) for e in corpus.train])
    per_session = np.bincount(corpus.catalog.session[clicks], minlength=4)[1:]
    decreasing = bool(per_session[0] > per_session[1] > per_session[2])
    write_corpus(tmp_path / "a", corpus)
    write_corpus(tmp_path / "b", generate_corpus(cfg)[0])
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                    for f in ("items.csv", "train.txt", "test.txt"))
    record("C6 generator fidelity", l1 < 0.02 and all_valid and decreasing and identical,
           f"L1 {l1:.4f}, all valid {all_valid}, session clicks {per_session.tolist()}, "
           f"byte-identical {identical}")


def test_c7_split(big_corpus):
    _, corpus = big_corpus
    straddles, fractions = 0, []
    for seed in range(10):
        train_part, val_part = split_train_val(corpus.train, 0.85, seed)
        in_train = {e.portrait for e in train_part}
        straddles += sum(e.portrait in in_train for e in val_part)
        fractions.append(len(train_part) / len(corpus.train))
    ok = straddles == 0 and all(abs(f - 0.85) <= 0.02 for f in fractions)
    record("C7 split", ok, f"straddling entries {straddles}, train fraction "
           f"{min(fractions):.4f}..{max(fractions):.4f}")


# -- 8 and 9 -----------------------------------------------------------------------------

# 24,000 generated training entries split 5:1 gives about 20,000 train / 4,000 validation.
E2E_GEN = GenConfig(n_train=24_000, n_test=4_000, seed=0)
E2E_VAL_RATIO = 20 / 24
ABLATION_EPOCHS = 3


@pytest.fixture(scope="module")
def e2e():
    corpus, truth = generate_corpus(E2E_GEN)
    run = RunConfig(letter="F", val_ratio=E2E_VAL_RATIO, seed=0)
    started = time.process_time()
    with threadpool_limits(1):
        ckpt, report = train(run, corpus, progress=print)
    return corpus, truth, ckpt, report, time.process_time() - started


def test_c8_end_to_end(e2e):
    _, _, _, report, cpu = e2e
    margin = report.accuracy - report.baseline_accuracy
    ok = margin >= 0.05 and report.group_accuracy > 0.5 and cpu < 1800
    record("C8a config F end to end", ok,
           f"val acc {report.accuracy:.4f} vs majority {report.baseline_accuracy:.4f} "
           f"(+{margin:.4f}), group head {report.group_accuracy:.4f}, "
           f"{report.n_entries} val entries, CPU {cpu / 60:.1f} min")


def test_c8_ablation(e2e):
    corpus, truth, _, _, _ = e2e
    base = RunConfig(val_ratio=E2E_VAL_RATIO, epochs=ABLATION_EPOCHS)
    with threadpool_limits(1):
        rows = ablate(corpus, base, [0, 1, 2], truth, progress=print)
    print(format_ablation(rows))
    means = {r.letter: float(np.mean(r.validation)) for r in rows}
    shaped = [r.letter for r in rows] == list("ABCDEFG") and all(len(r.validation) == 3 for r in rows)
    record("C8b ablation", shaped and means["E"] >= means["C"] - 0.01,
           f"{ABLATION_EPOCHS} epochs x 3 seeds; mean val acc "
           + ", ".join(f"{k} {v:.4f}" for k, v in means.items()))


def test_c9_persistence(e2e, tmp_path):
    corpus, truth, ckpt, _, _ = e2e
    with threadpool_limits(1):
        ckpt.save(tmp_path / "f.ckpt")
        back = Checkpoint.load(tmp_path / "f.ckpt", corpus.catalog)
        before = predict(ckpt, truth, "none")
        after = predict(back, truth, "none")
        tta_before = predict(replace(ckpt, run=ckpt.run.with_letter("G")), truth)
        tta_after = predict(replace(back, run=back.run.with_letter("G")), truth)
    same = before == after and tta_before == tta_after
    record("C9 persistence", same, f"{len(truth)} test decisions identical after reload: {same}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-v"]))
