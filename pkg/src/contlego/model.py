"""Transformer encoder classifiers with optional cross-layer weight sharing.

Two families: independent per-layer weights (BERT-style) and a single block
reused at every depth (ALBERT-style).  The classifier maps each position's
hidden state to logits over the group elements; attention matrices can be
captured for analysis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "ModelConfig",
    "TransformerModel",
    "init_model",
    "forward",
    "predict_assignments",
    "minimal_configs",
    "full_config",
]


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    num_heads: int
    hidden_dim: int
    vocab_size: int
    num_classes: int
    max_positions: int = 33  # token length of a 6-clause example
    ffn_dim: int | None = None
    weight_sharing: bool = False
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict  # name -> Tensor
    blocks: list = field(default_factory=list)  # per-depth block name prefixes

    def parameters(self) -> dict:
        return self.params

    def encoder_parameter_count(self) -> int:
        return sum(
            p.data.size for n, p in self.params.items() if n.startswith("block")
        )

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _block_param_names(prefix: str) -> list:
    return [
        f"{prefix}.attn.wq", f"{prefix}.attn.bq",
        f"{prefix}.attn.wk", f"{prefix}.attn.bk",
        f"{prefix}.attn.wv", f"{prefix}.attn.bv",
        f"{prefix}.attn.wo", f"{prefix}.attn.bo",
        f"{prefix}.ln1.g", f"{prefix}.ln1.b",
        f"{prefix}.ffn.w1", f"{prefix}.ffn.b1",
        f"{prefix}.ffn.w2", f"{prefix}.ffn.b2",
        f"{prefix}.ln2.g", f"{prefix}.ln2.b",
    ]


def init_model(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> TransformerModel:
    """All weight matrices ~ N(0, init_std^2); biases 0; layer-norm gains 1."""
    d, f = config.hidden_dim, config.ffn_dim
    std = config.init_std

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params = {
        "tok_emb": w(config.vocab_size, d),
        "pos_emb": w(config.max_positions, d),
        "emb_ln.g": ones(d),
        "emb_ln.b": zeros(d),
        "head.w": w(d, config.num_classes),
        "head.b": zeros(config.num_classes),
    }
    n_blocks = 1 if config.weight_sharing else config.num_layers
    for b in range(n_blocks):
        p = f"block{b}"
        params[f"{p}.attn.wq"] = w(d, d)
        params[f"{p}.attn.bq"] = zeros(d)
        params[f"{p}.attn.wk"] = w(d, d)
        params[f"{p}.attn.bk"] = zeros(d)
        params[f"{p}.attn.wv"] = w(d, d)
        params[f"{p}.attn.bv"] = zeros(d)
        params[f"{p}.attn.wo"] = w(d, d)
        params[f"{p}.attn.bo"] = zeros(d)
        params[f"{p}.ln1.g"] = ones(d)
        params[f"{p}.ln1.b"] = zeros(d)
        params[f"{p}.ffn.w1"] = w(d, f)
        params[f"{p}.ffn.b1"] = zeros(f)
        params[f"{p}.ffn.w2"] = w(f, d)
        params[f"{p}.ffn.b2"] = zeros(d)
        params[f"{p}.ln2.g"] = ones(d)
        params[f"{p}.ln2.b"] = zeros(d)
    blocks = [f"block{0 if config.weight_sharing else i}" for i in range(config.num_layers)]
    return TransformerModel(config=config, params=params, blocks=blocks)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def forward(
    model: TransformerModel,
    tokens: np.ndarray,
    pad_id: int | None = None,
    capture_attention: bool = False,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
):
    """Token ids (B, S) -> logits Tensor (B, S, num_classes).

    Returns (logits, attention) where attention is a (B, L, H, S, S) array of
    row-stochastic maps when captured, else None.  PAD positions (if any) are
    masked out of the attention keys.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, S = tokens.shape
    if S > cfg.max_positions:
        raise ValueError(f"input length {S} exceeds max_positions {cfg.max_positions}")
    P = model.params
    H, dh = cfg.num_heads, cfg.head_dim

    emb = ag.add(
        ag.embedding_lookup(P["tok_emb"], tokens),
        ag.embedding_lookup(P["pos_emb"], np.arange(S)),
    )
    # keep activations flattened to (B*S, d) so projections run as one GEMM
    x = ag.reshape(emb, (B * S, cfg.hidden_dim))
    x = ag.layer_norm(x, P["emb_ln.g"], P["emb_ln.b"])
    key_mask = None
    if pad_id is not None and (tokens == pad_id).any():
        # additive mask, broadcast over (B, H, S_query, S_key)
        key_mask = np.where(tokens == pad_id, -1e9, 0.0)[:, None, None, :].astype(emb.dtype)

    drop = cfg.dropout if train else 0.0
    if drop > 0.0 and dropout_rng is None:
        raise ValueError("dropout requires a dropout_rng in training mode")

    captured = [] if capture_attention else None
    for prefix in model.blocks:
        q = _linear(x, P[f"{prefix}.attn.wq"], P[f"{prefix}.attn.bq"])
        k = _linear(x, P[f"{prefix}.attn.wk"], P[f"{prefix}.attn.bk"])
        v = _linear(x, P[f"{prefix}.attn.wv"], P[f"{prefix}.attn.bv"])
        # (B*S, d) -> (B, H, S, dh)
        q = ag.transpose(ag.reshape(q, (B, S, H, dh)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(k, (B, S, H, dh)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(v, (B, S, H, dh)), (0, 2, 1, 3))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if key_mask is not None:
            scores = ag.add(scores, Tensor(key_mask))
        attn = ag.softmax(scores)
        if capture_attention:
            captured.append(attn.data.copy())
        ctx = ag.matmul(attn, v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B * S, H * dh))
        attn_out = _linear(ctx, P[f"{prefix}.attn.wo"], P[f"{prefix}.attn.bo"])
        if drop > 0.0:
            attn_out = ag.dropout(attn_out, drop, dropout_rng)
        x = ag.layer_norm(
            ag.add(x, attn_out), P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"]
        )
        h = ag.gelu(_linear(x, P[f"{prefix}.ffn.w1"], P[f"{prefix}.ffn.b1"]))
        h = _linear(h, P[f"{prefix}.ffn.w2"], P[f"{prefix}.ffn.b2"])
        if drop > 0.0:
            h = ag.dropout(h, drop, dropout_rng)
        x = ag.layer_norm(ag.add(x, h), P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])

    logits = ag.reshape(_linear(x, P["head.w"], P["head.b"]), (B, S, cfg.num_classes))
    attention = None
    if capture_attention:
        # (B, L, H, S, S)
        attention = np.stack(captured, axis=1)
    return logits, attention


def predict_assignments(model: TransformerModel, tokens, labels, canonical_positions,
                        logits=None):
    """Per-clause predictions in canonical order.

    ``tokens``/``labels`` are (S,) or (B, S) arrays (labels use -1 at
    unlabeled positions); ``canonical_positions`` gives, per presentation
    slot, the canonical clause index.  Returns (predicted, correct): arrays of
    shape (B, T) indexed by canonical clause t.  Pass precomputed ``logits``
    (the Tensor from forward) to skip the internal forward pass.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    labels = np.atleast_2d(np.asarray(labels))
    canon = np.atleast_2d(np.asarray(canonical_positions))
    if logits is None:
        with ag.no_grad():
            logits, _ = forward(model, tokens)
    pred = logits.data.argmax(axis=-1)
    B = tokens.shape[0]
    T = canon.shape[1]
    mask = labels != -1
    if not (mask.sum(axis=1) == T).all():
        raise ValueError("labeled position count does not match clause count")
    if B > 1 and (mask == mask[0]).all():
        # labeled slots sit at the same positions for every example
        slots = np.flatnonzero(mask[0])
        rows = np.arange(B)[:, None]
        predicted = np.full((B, T), -1, dtype=np.int64)
        correct = np.zeros((B, T), dtype=bool)
        predicted[rows, canon] = pred[:, slots]
        correct[rows, canon] = pred[:, slots] == labels[:, slots]
        return predicted, correct
    predicted = np.full((B, T), -1, dtype=np.int64)
    correct = np.zeros((B, T), dtype=bool)
    for b in range(B):
        slots = np.flatnonzero(mask[b])
        for slot, pos in enumerate(slots):
            t = canon[b, slot]
            predicted[b, t] = pred[b, pos]
            correct[b, t] = pred[b, pos] == labels[b, pos]
    return predicted, correct


def minimal_configs(vocab_size: int, num_classes: int, hidden_dim: int = 128):
    """The (unshared, shared) minimal pair: 6 layers, 1 head each."""
    common = dict(
        num_layers=6,
        num_heads=1,
        hidden_dim=hidden_dim,
        vocab_size=vocab_size,
        num_classes=num_classes,
    )
    return (
        ModelConfig(weight_sharing=False, **common),
        ModelConfig(weight_sharing=True, **common),
    )


def full_config(vocab_size: int, num_classes: int, weight_sharing: bool, hidden_dim: int = 144):
    """Large preset: 12 layers, 12 heads (hidden_dim must divide by 12)."""
    return ModelConfig(
        num_layers=12,
        num_heads=12,
        hidden_dim=hidden_dim,
        vocab_size=vocab_size,
        num_classes=num_classes,
        weight_sharing=weight_sharing,
    )
