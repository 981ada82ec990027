"""Embedding layers, transformer backbones and prediction heads.

Parameters live in one flat ``name -> Tensor`` dict. Names are namespaced:

* ``shared.*``  embedding tables used by both networks
* ``buy.*``     buy/group backbone and heads (or the MLP baseline)
* ``click.*``   auxiliary click-prediction backbone and head

A buy-network sequence is ``[10 user tokens | H click tokens | 9 targets]``;
the click network sees ``[10 user tokens | H click tokens | 1 target]``.
Each item token is the sum of its id embedding and six feature embeddings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import ndgrad as G
from .ndgrad import Tensor
from .schema import (
    N_EXPOSED,
    N_GROUPS,
    N_PORTRAIT,
    PORTRAIT_CARDINALITY,
    SESSION_LEN,
    Discretizer,
    Entry,
    ItemCatalog,
    SchemaError,
    discretize,
    fit_discretizer,
)

N_ITEM_FEATURES = 6
Params = dict


@dataclass
class ModelConfig:
    d_model: int = 128
    layers: int = 3
    heads: int = 4
    d_qkv: int = 32
    mlp_width: int = 64
    max_clicks: int = 64
    variant: str = "transformer"
    mlp_emb: int = 16
    mlp_hidden: tuple = (256, 64)
    n_bins: int = 16
    user_vocab: tuple = PORTRAIT_CARDINALITY

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        self.user_vocab = tuple(int(v) for v in self.user_vocab)
        if self.variant not in ("transformer", "mlp_baseline"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        if len(self.user_vocab) != N_PORTRAIT:
            raise ValueError("user_vocab needs one size per portrait feature")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=32, layers=2, heads=2, d_qkv=8, mlp_width=64, max_clicks=32)
        base.update(overrides)
        return cls(**base)

    @property
    def seq_len(self) -> int:
        return N_PORTRAIT + self.max_clicks + N_EXPOSED

    @property
    def click_seq_len(self) -> int:
        return N_PORTRAIT + self.max_clicks + 1

    @property
    def emb_dim(self) -> int:
        return self.mlp_emb if self.variant == "mlp_baseline" else self.d_model

    def mlp_input_width(self) -> int:
        return (N_PORTRAIT + 1 + N_EXPOSED) * self.mlp_emb

    def to_dict(self) -> dict:
        return asdict(self)


# -- feature encoding ---------------------------------------------------------------

@dataclass
class FeatureEncoder:
    """Integer codes for every item feature; code 0 is reserved for padding."""

    catalog: ItemCatalog
    discretizers: dict
    item_codes: np.ndarray = field(init=False)

    def __post_init__(self):
        c = self.catalog
        d = self.discretizers
        codes = np.stack([
            c.f1,
            c.f2 + 1,
            c.f3,
            discretize(d["f4"], c.f4) + 1,
            discretize(d["f5"], c.f5) + 1,
            discretize(d["price"], c.price) + 1,
        ], axis=1).astype(np.int64)
        codes[0] = 0
        self.item_codes = codes

    @classmethod
    def fit(cls, catalog: ItemCatalog, n_bins: int = 16) -> "FeatureEncoder":
        ids = catalog.ids()
        return cls(catalog, {
            "f4": fit_discretizer(catalog.f4[ids], n_bins),
            "f5": fit_discretizer(catalog.f5[ids], n_bins),
            "price": fit_discretizer(catalog.price[ids], n_bins),
        })

    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(int(self.item_codes[:, k].max()) + 1 for k in range(N_ITEM_FEATURES))

    def to_dict(self) -> dict:
        return {k: list(v.edges) for k, v in self.discretizers.items()}

    @classmethod
    def from_dict(cls, catalog: ItemCatalog, edges: Mapping[str, Sequence[float]]) -> "FeatureEncoder":
        return cls(catalog, {k: Discretizer(tuple(float(x) for x in v)) for k, v in edges.items()})


@dataclass
class Batch:
    """Numpy view of a list of entries, ready for the networks."""

    portrait: np.ndarray          # [B, 10] int
    clicks: np.ndarray            # [B, H] int, 0 = padding
    click_mask: np.ndarray        # [B, H] bool, True on padding
    exposed: np.ndarray           # [B, 9] int
    labels: Optional[np.ndarray]  # [B, 9] float or None
    entry_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.entry_ids)

    def take(self, idx) -> "Batch":
        return Batch(self.portrait[idx], self.clicks[idx], self.click_mask[idx],
                     self.exposed[idx], None if self.labels is None else self.labels[idx],
                     self.entry_ids[idx])

    @property
    def groups(self) -> np.ndarray:
        return ((self.labels.sum(axis=1) + SESSION_LEN - 1) // SESSION_LEN).astype(np.int64)


def encode_entries(entries: Sequence[Entry], max_clicks: int,
                   user_vocab: Sequence[int] = PORTRAIT_CARDINALITY) -> Batch:
    """Pack entries; click histories keep the most recent ``max_clicks`` items."""
    n = len(entries)
    portrait = np.zeros((n, N_PORTRAIT), np.int64)
    clicks = np.zeros((n, max_clicks), np.int64)
    exposed = np.zeros((n, N_EXPOSED), np.int64)
    labeled = n > 0 and all(e.labels is not None for e in entries)
    labels = np.zeros((n, N_EXPOSED), np.float32) if labeled else None
    for r, e in enumerate(entries):
        portrait[r] = e.portrait
        recent = e.clicks[-max_clicks:] if max_clicks else ()
        clicks[r, :len(recent)] = recent
        exposed[r] = e.exposed
        if labeled:
            labels[r] = e.labels
    vocab = np.asarray(user_vocab)
    bad = (portrait < 0) | (portrait >= vocab)
    if bad.any():
        r, k = np.argwhere(bad)[0]
        raise SchemaError(f"entry {entries[r].entry_id}: portrait feature {k + 1} code "
                          f"{portrait[r, k]} outside vocabulary of size {vocab[k]}")
    return Batch(portrait, clicks, clicks == 0, exposed, labels,
                 np.array([e.entry_id for e in entries], np.int64))


# -- parameter initialisation --------------------------------------------------------------

def _linear(rng, params, name, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    params[f"{name}.b"] = rng.uniform(-bound, bound, size=(fan_out,))


def _embedding(rng, rows, dim):
    return rng.normal(scale=0.02, size=(rows, dim))


def _backbone(rng, params, prefix, cfg: ModelConfig, seq_len: int):
    d, width = cfg.d_model, cfg.heads * cfg.d_qkv
    params[f"{prefix}.pos"] = _embedding(rng, seq_len, d)
    for layer in range(cfg.layers):
        p = f"{prefix}.block{layer}"
        for ln in ("ln1", "ln2"):
            params[f"{p}.{ln}.g"] = np.ones(d)
            params[f"{p}.{ln}.b"] = np.zeros(d)
        for proj in ("q", "k", "v"):
            _linear(rng, params, f"{p}.attn.{proj}", d, width)
        _linear(rng, params, f"{p}.attn.o", width, d)
        _linear(rng, params, f"{p}.mlp.fc1", d, cfg.mlp_width)
        _linear(rng, params, f"{p}.mlp.fc2", cfg.mlp_width, d)
    params[f"{prefix}.ln_f.g"] = np.ones(d)
    params[f"{prefix}.ln_f.b"] = np.zeros(d)


def init_params(cfg: ModelConfig, encoder: FeatureEncoder, seed: int = 0,
                with_click: bool = True, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    dim = cfg.emb_dim
    raw: dict[str, np.ndarray] = {}
    for k, vocab in enumerate(cfg.user_vocab):
        raw[f"shared.user.f{k + 1}"] = _embedding(rng, vocab, dim)
    raw["shared.item.id"] = _embedding(rng, encoder.catalog.size + 1, dim)
    for k, vocab in enumerate(encoder.vocab_sizes()):
        raw[f"shared.item.f{k + 1}"] = _embedding(rng, vocab, dim)
    if cfg.variant == "mlp_baseline":
        widths = (cfg.mlp_input_width(), *cfg.mlp_hidden, N_EXPOSED)
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            _linear(rng, raw, f"buy.mlp.fc{i + 1}", a, b)
    else:
        _backbone(rng, raw, "buy", cfg, cfg.seq_len)
        _linear(rng, raw, "buy.head", cfg.d_model, 1)
        _linear(rng, raw, "buy.group", cfg.d_model, N_GROUPS)
        if with_click:
            _backbone(rng, raw, "click", cfg, cfg.click_seq_len)
            _linear(rng, raw, "click.head", cfg.d_model, 1)
    return {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()}


# -- embeddings ------------------------------------------------------------------------

def item_token_table(params: Params, encoder: FeatureEncoder) -> Tensor:
    """Token vector for every item id (row 0 is the padding token)."""
    table = params["shared.item.id"]
    for k in range(N_ITEM_FEATURES):
        table = G.add(table, G.embedding_lookup(params[f"shared.item.f{k + 1}"], encoder.item_codes[:, k]))
    return table


def user_tokens(params: Params, portrait: np.ndarray, cfg: ModelConfig) -> Tensor:
    """``[B, 10, D]`` portrait embeddings through one stacked lookup."""
    tables = [params[f"shared.user.f{k + 1}"] for k in range(N_PORTRAIT)]
    offsets = np.concatenate([[0], np.cumsum([t.shape[0] for t in tables])[:-1]])
    return G.embedding_lookup(G.concat(tables, axis=0), portrait + offsets)


@dataclass
class TokenSequence:
    tokens: Tensor            # [B, N, D], positional embedding included
    mask: np.ndarray          # [B, N] True on padding
    target_positions: np.ndarray


def embed_batch(params: Params, batch: Batch, encoder: FeatureEncoder, cfg: ModelConfig,
                items: Optional[Tensor] = None) -> TokenSequence:
    items = item_token_table(params, encoder) if items is None else items
    b = len(batch)
    users = user_tokens(params, batch.portrait, cfg)
    clicks = G.embedding_lookup(items, batch.clicks)
    targets = G.embedding_lookup(items, batch.exposed)
    tokens = G.add(G.concat([users, clicks, targets], axis=1), params["buy.pos"])
    mask = np.concatenate([np.zeros((b, N_PORTRAIT), bool), batch.click_mask,
                           np.zeros((b, N_EXPOSED), bool)], axis=1)
    start = N_PORTRAIT + cfg.max_clicks
    return TokenSequence(tokens, mask, np.arange(start, start + N_EXPOSED))


def embed_entry(entry: Entry, params: Params, encoder: FeatureEncoder, cfg: ModelConfig) -> TokenSequence:
    return embed_batch(params, encode_entries([entry], cfg.max_clicks, cfg.user_vocab), encoder, cfg)


# -- transformer -------------------------------------------------------------------------

def _dense(params, name, x):
    return G.add(G.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def transformer(params: Params, prefix: str, x: Tensor, mask: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Pre-LN blocks followed by a final LayerNorm."""
    for layer in range(cfg.layers):
        p = f"{prefix}.block{layer}"
        h = G.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        attn = {
            "wq": params[f"{p}.attn.q.w"], "bq": params[f"{p}.attn.q.b"],
            "wk": params[f"{p}.attn.k.w"], "bk": params[f"{p}.attn.k.b"],
            "wv": params[f"{p}.attn.v.w"], "bv": params[f"{p}.attn.v.b"],
            "wo": params[f"{p}.attn.o.w"], "bo": params[f"{p}.attn.o.b"],
        }
        x = G.add(x, G.multi_head_self_attention(h, attn, mask, heads=cfg.heads))
        h = G.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        x = G.add(x, _dense(params, f"{p}.mlp.fc2", G.gelu(_dense(params, f"{p}.mlp.fc1", h))))
    return G.layer_norm(x, params[f"{prefix}.ln_f.g"], params[f"{prefix}.ln_f.b"])


@dataclass
class PredictionBundle:
    buy: Tensor    # [B, 9] probabilities
    group: Optional[Tensor] = None   # [B, 4] probabilities


def forward_buy_group(seq: TokenSequence, params: Params, cfg: ModelConfig) -> PredictionBundle:
    y = transformer(params, "buy", seq.tokens, seq.mask, cfg)
    b = y.shape[0]
    targets = G.take(y, seq.target_positions, axis=1)
    buy = G.sigmoid(G.reshape(_dense(params, "buy.head", targets), (b, N_EXPOSED)))
    group = G.softmax(_dense(params, "buy.group", G.mean_pool(y, seq.mask)), axis=-1)
    return PredictionBundle(buy, group)


def forward_click(params: Params, portrait: np.ndarray, history: np.ndarray, target: np.ndarray,
                  encoder: FeatureEncoder, cfg: ModelConfig,
                  items: Optional[Tensor] = None) -> Tensor:
    """Probability ``[B]`` that each user clicks ``target`` given a padded ``history``."""
    items = item_token_table(params, encoder) if items is None else items
    b = len(target)
    users = user_tokens(params, portrait, cfg)
    hist = G.embedding_lookup(items, history)
    tgt = G.embedding_lookup(items, np.asarray(target).reshape(b, 1))
    tokens = G.add(G.concat([users, hist, tgt], axis=1), params["click.pos"])
    mask = np.concatenate([np.zeros((b, N_PORTRAIT), bool), history == 0, np.zeros((b, 1), bool)], axis=1)
    y = transformer(params, "click", tokens, mask, cfg)
    out = _dense(params, "click.head", G.take(y, [tokens.shape[1] - 1], axis=1))
    return G.sigmoid(G.reshape(out, (b,)))


def forward_mlp_baseline(params: Params, batch: Batch, encoder: FeatureEncoder, cfg: ModelConfig) -> Tensor:
    """Config-A network: concatenated embeddings through a ReLU MLP, 9 sigmoids."""
    items = item_token_table(params, encoder)
    b = len(batch)
    users = user_tokens(params, batch.portrait, cfg)
    pooled = G.mean_pool(G.embedding_lookup(items, batch.clicks), batch.click_mask)
    targets = G.embedding_lookup(items, batch.exposed)
    e = cfg.mlp_emb
    x = G.concat([
        G.reshape(users, (b, N_PORTRAIT * e)),
        pooled,
        G.reshape(targets, (b, N_EXPOSED * e)),
    ], axis=1)
    n_layers = len(cfg.mlp_hidden) + 1
    for i in range(1, n_layers + 1):
        x = _dense(params, f"buy.mlp.fc{i}", x)
        if i < n_layers:
            x = G.relu(x)
    return G.sigmoid(x)


def predict_batch(params: Params, batch: Batch, encoder: FeatureEncoder, cfg: ModelConfig,
                  items: Optional[Tensor] = None) -> PredictionBundle:
    """Run whichever buy network ``cfg`` describes."""
    if cfg.variant == "mlp_baseline":
        return PredictionBundle(forward_mlp_baseline(params, batch, encoder, cfg))
    return forward_buy_group(embed_batch(params, batch, encoder, cfg, items), params, cfg)
