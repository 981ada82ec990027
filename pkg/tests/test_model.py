from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sessrec import ndgrad as G
from sessrec.model import (
    FeatureEncoder,
    ModelConfig,
    embed_entry,
    encode_entries,
    forward_buy_group,
    forward_click,
    forward_mlp_baseline,
    init_params,
    item_token_table,
    predict_batch,
)
from sessrec.ndgrad.gradcheck import check_gradients
from sessrec.schema import PORTRAIT_CARDINALITY, SchemaError

from conftest import TinySetup, tiny_model


def test_config_presets():
    full = ModelConfig.full()
    assert (full.d_model, full.layers, full.heads, full.d_qkv, full.mlp_width) == (128, 3, 4, 32, 64)
    desk = ModelConfig.desk()
    assert desk.d_model < full.d_model
    assert desk.seq_len == 10 + desk.max_clicks + 9
    assert full.mlp_input_width() == 320
    with pytest.raises(ValueError):
        ModelConfig(variant="rnn")


def test_encoder_codes(tiny):
    codes = tiny.encoder.item_codes
    assert codes.shape == (tiny.catalog.size + 1, 6)
    assert np.all(codes[0] == 0)
    assert np.all(codes[1:] >= 1)
    back = FeatureEncoder.from_dict(tiny.catalog, tiny.encoder.to_dict())
    assert np.array_equal(back.item_codes, codes)


def test_output_contract(tiny):
    out = predict_batch(tiny.params, tiny.batch, tiny.encoder, tiny.cfg)
    assert out.buy.shape == (4, 9)
    assert out.group.shape == (4, 4)
    assert np.all((out.buy.data > 0) & (out.buy.data < 1))
    assert np.allclose(out.group.data.sum(axis=1), 1.0, atol=1e-6)


def test_click_truncation_keeps_most_recent():
    e = TinySetup(2).entries[0]
    long = replace(e, clicks=tuple(range(1, 13)))
    batch = encode_entries([long], 5, tiny_model().user_vocab)
    assert batch.clicks[0].tolist() == [8, 9, 10, 11, 12]
    assert not batch.click_mask.any()


def test_zero_clicks_fully_masked(tiny):
    e = replace(tiny.entries[0], clicks=())
    seq = embed_entry(e, tiny.params, tiny.encoder, tiny.cfg)
    assert seq.mask[0, 10:10 + tiny.cfg.max_clicks].all()
    out = forward_buy_group(seq, tiny.params, tiny.cfg)
    assert np.all(np.isfinite(out.buy.data))


def test_padding_content_is_ignored(tiny):
    # Same entries, but padded click slots point at a real item: output must not move.
    batch = encode_entries([replace(e, clicks=e.clicks[:2]) for e in tiny.entries],
                           tiny.cfg.max_clicks, tiny.cfg.user_vocab)
    dirty = type(batch)(batch.portrait, np.where(batch.click_mask, 3, batch.clicks), batch.click_mask,
                        batch.exposed, batch.labels, batch.entry_ids)
    a = predict_batch(tiny.params, batch, tiny.encoder, tiny.cfg)
    b = predict_batch(tiny.params, dirty, tiny.encoder, tiny.cfg)
    assert np.array_equal(a.buy.data, b.buy.data)
    assert np.array_equal(a.group.data, b.group.data)


def test_unknown_portrait_code(tiny):
    bad = replace(tiny.entries[0], portrait=(99,) * 10)
    with pytest.raises(SchemaError, match="vocabulary"):
        encode_entries([bad], 5, tiny.cfg.user_vocab)


def test_deterministic_forward(tiny):
    a = predict_batch(tiny.params, tiny.batch, tiny.encoder, tiny.cfg)
    b = predict_batch(tiny.params, tiny.batch, tiny.encoder, tiny.cfg)
    assert np.array_equal(a.buy.data, b.buy.data)


def _click(setup, params):
    b = setup.batch
    return forward_click(params, b.portrait, b.clicks, b.exposed[:, 0], setup.encoder, setup.cfg).data


def test_click_output_in_unit_interval(tiny):
    p = _click(tiny, tiny.params)
    assert p.shape == (4,)
    assert np.all((p > 0) & (p < 1))


def test_embedding_sharing_contract(tiny):
    base_buy = predict_batch(tiny.params, tiny.batch, tiny.encoder, tiny.cfg).buy.data
    base_click = _click(tiny, tiny.params)

    bumped = dict(tiny.params)
    w = tiny.params["buy.block0.mlp.fc1.w"]
    noise = np.random.default_rng(1).normal(size=w.shape)
    bumped["buy.block0.mlp.fc1.w"] = G.Tensor(w.data + noise, requires_grad=True)
    assert np.array_equal(_click(tiny, bumped), base_click)
    assert not np.allclose(predict_batch(bumped, tiny.batch, tiny.encoder, tiny.cfg).buy.data, base_buy)

    bumped = dict(tiny.params)
    t = tiny.params["shared.item.id"]
    bumped["shared.item.id"] = G.Tensor(t.data + np.random.default_rng(0).normal(size=t.shape),
                                        requires_grad=True)
    assert not np.allclose(_click(tiny, bumped), base_click)
    assert not np.allclose(predict_batch(bumped, tiny.batch, tiny.encoder, tiny.cfg).buy.data, base_buy)


def test_click_network_has_own_backbone(tiny):
    names = set(tiny.params)
    assert "click.block0.attn.q.w" in names and "buy.block0.attn.q.w" in names
    assert not any(n.startswith("click.item") or n.startswith("click.user") for n in names)


def test_mlp_baseline_shapes_and_zero_click_pool():
    s = TinySetup(1, letter="A")
    assert s.cfg.variant == "mlp_baseline"
    assert s.params["buy.mlp.fc1.w"].shape == (s.cfg.mlp_input_width(), 6)
    assert s.params["buy.mlp.fc1.w"].shape[0] == (10 + 1 + 9) * 4
    no_clicks = encode_entries([replace(e, clicks=()) for e in s.entries], s.cfg.max_clicks, s.cfg.user_vocab)
    pooled = G.mean_pool(G.embedding_lookup(item_token_table(s.params, s.encoder), no_clicks.clicks),
                         no_clicks.click_mask)
    assert np.all(pooled.data == 0.0)
    out = forward_mlp_baseline(s.params, no_clicks, s.encoder, s.cfg)
    assert out.shape == (4, 9)


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_buy_and_group_outputs(seed):
    s = TinySetup(seed, layers=2)

    def total():
        out = predict_batch(s.params, s.batch, s.encoder, s.cfg)
        return G.add(G.sum_(out.buy), G.sum_(G.mul(out.group, np.arange(4.0))))

    check_gradients(total, s.params, max_entries=6, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_click(seed):
    s = TinySetup(seed, layers=2)
    b = s.batch

    def total():
        return G.sum_(forward_click(s.params, b.portrait, b.clicks, b.exposed[:, 4], s.encoder, s.cfg))

    check_gradients(total, s.params, max_entries=6, rng=np.random.default_rng(seed))


@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_mlp_baseline(seed):
    s = TinySetup(seed, letter="A")
    check_gradients(lambda: G.sum_(forward_mlp_baseline(s.params, s.batch, s.encoder, s.cfg)),
                    s.params, max_entries=8, rng=np.random.default_rng(seed))


@given(st.integers(0, 10_000), st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_forward_is_finite(entry_seed, param_seed):
    s = TinySetup(entry_seed, n=3, dtype=np.float32)
    params = init_params(s.cfg, s.encoder, seed=param_seed)
    out = predict_batch(params, s.batch, s.encoder, s.cfg)
    assert np.all(np.isfinite(out.buy.data)) and np.all(np.isfinite(out.group.data))


def test_desk_preset_runs_on_real_vocab(desk_corpus):
    corpus, _ = desk_corpus
    cfg = ModelConfig.desk()
    enc = FeatureEncoder.fit(corpus.catalog)
    params = init_params(cfg, enc, seed=0)
    assert params["shared.user.f2"].shape == (PORTRAIT_CARDINALITY[1], cfg.d_model)
    batch = encode_entries(corpus.train[:8], cfg.max_clicks)
    out = predict_batch(params, batch, enc, cfg)
    assert out.buy.dtype == np.float32
    assert np.all(np.isfinite(out.buy.data))
