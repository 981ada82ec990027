import numpy as np
import pytest

from sessrec.datagen import (
    DEFAULT_GROUP_MIX,
    CorpusFormatError,
    GenConfig,
    generate_catalog,
    generate_corpus,
    generate_entries,
    read_corpus,
    read_entries,
    split_train_val,
    write_corpus,
    write_entries,
)
from sessrec.schema import PRICE_RANGE, Entry, discretize, fit_discretizer, is_valid


@pytest.fixture(scope="module")
def small():
    cfg = GenConfig(n_train=3000, n_test=200, seed=11)
    corpus, truth = generate_corpus(cfg)
    return cfg, corpus, truth


def test_default_mix_matches_group_counts():
    assert np.allclose(DEFAULT_GROUP_MIX, (0.1188, 0.1933, 0.1469, 0.5411), atol=1e-4)


def test_catalog_shape_and_prices():
    cat = generate_catalog(GenConfig())
    assert cat.size == 381
    assert cat.session_sizes() == (39, 108, 234)
    prices = cat.price[1:]
    assert prices.min() >= PRICE_RANGE[0] and prices.max() <= PRICE_RANGE[1]
    assert set(cat.f1[1:]) <= {1, 2, 3, 4}
    assert set(cat.f2[1:]) <= set(range(10))
    assert set(cat.f3[1:]) <= {1, 2}


@pytest.mark.parametrize("seed", range(10))
def test_later_sessions_cost_more(seed):
    cat = generate_catalog(GenConfig(seed=seed))
    assert np.median(cat.price[cat.ids(3)]) > np.median(cat.price[cat.ids(1)])


def test_forced_group_zero():
    cfg = GenConfig(group_mix=(1.0, 0.0, 0.0, 0.0), n_train=300, n_test=0)
    entries = generate_entries(cfg, generate_catalog(cfg), 0, 300, labeled=True)
    assert all(e.labels == (0,) * 9 for e in entries)


def test_labels_valid_and_schema_clean(small):
    _, corpus, truth = small
    for e in corpus.train + truth:
        assert is_valid(e.labels)
        e.validate(corpus.catalog)
    assert all(e.labels is None for e in corpus.test)


def test_group_histogram_close_to_mix(small):
    _, corpus, _ = small
    hist = np.bincount([e.group for e in corpus.train], minlength=4) / len(corpus.train)
    assert np.abs(hist - DEFAULT_GROUP_MIX).sum() < 0.05


def test_buy_count_dip_inside_groups(small):
    _, corpus, _ = small
    counts = np.bincount([sum(e.labels) for e in corpus.train], minlength=10)
    assert counts[3] < min(counts[1], counts[2])
    assert counts[6] < min(counts[4], counts[5])


def test_session_click_volume_decreases(small):
    _, corpus, _ = small
    per_session = np.zeros(3)
    for e in corpus.train:
        if e.clicks:
            per_session += np.bincount(corpus.catalog.session[list(e.clicks)], minlength=4)[1:]
    assert per_session[0] > per_session[1] > per_session[2]


def test_clicks_favour_bought_items(small):
    _, corpus, _ = small
    bought_rate, other_rate = [], []
    for e in corpus.train:
        clicked = set(e.clicks)
        for item, y in zip(e.exposed, e.labels):
            (bought_rate if y else other_rate).append(item in clicked)
    assert np.mean(bought_rate) > np.mean(other_rate)


def test_round_trip(tmp_path, small):
    _, corpus, _ = small
    write_corpus(tmp_path, corpus)
    back = read_corpus(tmp_path)
    assert back.catalog == corpus.catalog
    assert back.train == corpus.train
    assert back.test == corpus.test


def test_regeneration_is_byte_identical(tmp_path):
    cfg = GenConfig(n_train=400, n_test=50, seed=5)
    for name in ("a", "b"):
        corpus, _ = generate_corpus(cfg)
        write_corpus(tmp_path / name, corpus)
    for f in ("items.csv", "train.txt", "test.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_entries_do_not_depend_on_generation_order():
    cfg = GenConfig(seed=2)
    cat = generate_catalog(cfg)
    whole = generate_entries(cfg, cat, 0, 60, labeled=True)
    tail = generate_entries(cfg, cat, 40, 20, labeled=True)
    assert whole[40:] == tail


def test_truncated_file_names_line(tmp_path, small):
    _, corpus, _ = small
    write_corpus(tmp_path, corpus)
    lines = (tmp_path / "train.txt").read_text().splitlines()
    lines[5] = lines[5][: len(lines[5]) // 3]
    (tmp_path / "train.txt").write_text("\n".join(lines[:6]) + "\n")
    with pytest.raises(CorpusFormatError) as info:
        read_corpus(tmp_path)
    assert info.value.lineno == 6
    assert ":6:" in str(info.value)


def test_invalid_label_rejected(tmp_path, small):
    _, corpus, _ = small
    e = corpus.train[0]
    bad = Entry(e.entry_id, e.portrait, e.clicks, e.exposed, (0, 0, 0, 0, 0, 0, 1, 0, 0))
    write_entries(tmp_path / "bad.txt", [bad])
    with pytest.raises(CorpusFormatError, match="unlock"):
        read_entries(tmp_path / "bad.txt", corpus.catalog)
    assert read_entries(tmp_path / "bad.txt", corpus.catalog, strict_labels=False) == [bad]


def test_unknown_item_rejected(tmp_path, small):
    _, corpus, _ = small
    e = corpus.train[0]
    write_entries(tmp_path / "bad.txt", [Entry(e.entry_id, e.portrait, (5000,), e.exposed, e.labels)])
    with pytest.raises(CorpusFormatError, match="unknown item"):
        read_entries(tmp_path / "bad.txt", corpus.catalog)


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        GenConfig(group_mix=(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        GenConfig.from_dict({"no_such_field": 1})


def test_split_colocates_duplicates_across_seeds(small):
    _, corpus, _ = small
    by_portrait = {}
    for e in corpus.train:
        by_portrait.setdefault(e.portrait, []).append(e.entry_id)
    dups = [ids for ids in by_portrait.values() if len(ids) > 1]
    assert dups, "generator should emit some duplicate users"
    sides = []
    for seed in range(10):
        train, _ = split_train_val(corpus.train, 0.85, seed)
        in_train = {e.entry_id for e in train}
        for ids in dups:
            assert len({i in in_train for i in ids}) == 1
        sides.append(frozenset(in_train))
    assert len(set(sides)) > 1


def test_split_fraction_on_distinct_portraits():
    rng = np.random.default_rng(0)
    entries = [Entry(i, tuple(int(c) for c in rng.integers(0, 10**6, 10)), (), (1,) * 9)
               for i in range(10_000)]
    train, val = split_train_val(entries, 0.85, seed=3)
    assert len(train) + len(val) == 10_000
    assert abs(len(train) / 10_000 - 0.85) < 0.02
    with pytest.raises(ValueError):
        split_train_val(entries, 1.0)


def test_item_features_carry_label_signal(small):
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import roc_auc_score

    _, corpus, _ = small
    cat = corpus.catalog
    ids = cat.ids()
    cols = [cat.f1, cat.f2, cat.f3]
    for name in ("f4", "f5", "price"):
        vals = getattr(cat, name)
        cols.append(discretize(fit_discretizer(vals[ids], 16), vals))
    onehot = np.concatenate([np.eye(int(c.max()) + 1)[c] for c in cols], axis=1)
    items = np.array([e.exposed for e in corpus.train]).reshape(-1)
    labels = np.array([e.labels for e in corpus.train]).reshape(-1)
    x = onehot[items]
    half = len(x) // 2
    clf = LogisticRegression(max_iter=1000).fit(x[:half], labels[:half])
    auc = roc_auc_score(labels[half:], clf.predict_proba(x[half:])[:, 1])
    assert auc > 0.6
