"""Small post-norm transformer encoder with exact backpropagation.

Layer structure: self-attention + residual + layer-norm, then feed-forward +
residual + layer-norm. Masked positions get zero attention weight. When an
adapter composition is attached, each layer's second layer-norm input is
replaced by the composed adapter output (see the adapters module); at
adapter initialization this is a bit-exact identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .tokenization import CLS_ID, MASK_ID, PAD_ID, SEP_ID, Vocab, tokenize
from .validation import ensure

NEG_INF = -1e9
IGNORE_LABEL = -1


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 256
    vocab_size: int = 0
    per_segment_cap: int = 128
    dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        ensure(self.hidden % self.heads == 0, "hidden must be divisible by heads")
        ensure(self.max_len >= 2, "max_len must be at least 2")
        ensure(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_obj(self) -> dict:
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ffn": self.ffn,
            "max_len": self.max_len,
            "vocab_size": self.vocab_size,
            "per_segment_cap": self.per_segment_cap,
            "dropout": self.dropout,
            "dtype": self.dtype,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


def parameter_count(config: EncoderConfig) -> int:
    """Closed-form parameter count: embeddings, per-layer blocks, pooling head."""
    h, f, L = config.hidden, config.ffn, config.layers
    embeddings = config.vocab_size * h + config.max_len * h + 2 * h
    attention = 4 * (h * h + h)
    ffn = h * f + f + f * h + h
    norms = 4 * h
    pooling = h * h + h
    return embeddings + L * (attention + ffn + norms) + pooling


@dataclass
class EncodedBatch:
    ids: np.ndarray  # (B, T) int64
    mask: np.ndarray  # (B, T) 0/1
    segments: np.ndarray  # (B, T) 0/1

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def encode_pair(
    a: str,
    b: Optional[str],
    vocab: Vocab,
    max_len: int,
    per_segment_cap: Optional[int] = 128,
) -> tuple[list[int], list[int], list[int]]:
    """Token ids, segment ids, and attention mask for CLS a SEP [b SEP].

    Each segment is tail-truncated to per_segment_cap tokens, then the whole
    sequence is truncated to max_len and padded with PAD/mask 0.
    """
    ensure(max_len >= 3, "max_len must be at least 3 for CLS + token + SEP")
    cap = per_segment_cap if per_segment_cap is not None else max_len
    tok_a = vocab.encode_tokens(tokenize(a))[:cap]
    ids = [CLS_ID] + tok_a + [SEP_ID]
    segments = [0] * len(ids)
    if b is not None:
        tok_b = vocab.encode_tokens(tokenize(b))[:cap]
        ids += tok_b + [SEP_ID]
        segments += [1] * (len(tok_b) + 1)
    ids = ids[:max_len]
    segments = segments[:max_len]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    segments += [0] * pad
    mask += [0] * pad
    return ids, segments, mask


def encode_batch(
    texts: list[tuple[str, Optional[str]]],
    vocab: Vocab,
    max_len: int,
    per_segment_cap: Optional[int] = 128,
) -> EncodedBatch:
    ids, segs, masks = [], [], []
    for a, b in texts:
        i, s, m = encode_pair(a, b, vocab, max_len, per_segment_cap)
        ids.append(i)
        segs.append(s)
        masks.append(m)
    return EncodedBatch(
        ids=np.asarray(ids, dtype=np.int64),
        mask=np.asarray(masks, dtype=np.int64),
        segments=np.asarray(segs, dtype=np.int64),
    )


def encode_history(
    turn_texts: list[str], vocab: Vocab, max_len: int
) -> tuple[list[int], list[int], list[int]]:
    """Dialog history as CLS + utterances joined by SEP, truncated from the front."""
    ensure(max_len >= 3, "max_len must be at least 3")
    stream: list[int] = []
    for text in turn_texts:
        stream.extend(vocab.encode_tokens(tokenize(text)))
        stream.append(SEP_ID)
    stream = stream[-(max_len - 1) :]
    ids = [CLS_ID] + stream
    mask = [1] * len(ids)
    segments = [0] * len(ids)
    pad = max_len - len(ids)
    ids += [PAD_ID] * pad
    segments += [0] * pad
    mask += [0] * pad
    return ids, segments, mask


class EncoderModel:
    """Named-parameter transformer encoder; parameters addressable by name."""

    def __init__(self, config: EncoderConfig, vocab: Vocab, params: dict[str, Parameter]):
        ensure(config.vocab_size == len(vocab), "config vocab_size must match the vocabulary")
        self.config = config
        self.vocab = vocab
        self.params = params
        self.adapters = None  # composition attached by the adapters module

    # -- construction

    @classmethod
    def init(cls, config: EncoderConfig, vocab: Vocab, seed: int) -> "EncoderModel":
        if config.vocab_size != len(vocab):
            config = replace(config, vocab_size=len(vocab))
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        h, f = config.hidden, config.ffn
        std = 0.02

        def normal(shape):
            return rng.normal(0.0, std, size=shape).astype(dt)

        params: dict[str, Parameter] = {}

        def p(name, data):
            params[name] = Parameter(name, data)

        p("emb.token", normal((config.vocab_size, h)))
        p("emb.position", normal((config.max_len, h)))
        p("emb.segment", normal((2, h)))
        for i in range(config.layers):
            for proj in ("wq", "wk", "wv", "wo"):
                p(f"layer{i}.attn.{proj}", normal((h, h)))
            for bias in ("bq", "bk", "bv", "bo"):
                p(f"layer{i}.attn.{bias}", np.zeros(h, dtype=dt))
            p(f"layer{i}.ffn.w1", normal((h, f)))
            p(f"layer{i}.ffn.b1", np.zeros(f, dtype=dt))
            p(f"layer{i}.ffn.w2", normal((f, h)))
            p(f"layer{i}.ffn.b2", np.zeros(h, dtype=dt))
            p(f"layer{i}.ln1.gamma", np.ones(h, dtype=dt))
            p(f"layer{i}.ln1.beta", np.zeros(h, dtype=dt))
            p(f"layer{i}.ln2.gamma", np.ones(h, dtype=dt))
            p(f"layer{i}.ln2.beta", np.zeros(h, dtype=dt))
        p("pool.w", normal((h, h)))
        p("pool.b", np.zeros(h, dtype=dt))
        return cls(config, vocab, params)

    # -- parameter management

    def named_parameters(self) -> dict[str, Parameter]:
        out = dict(self.params)
        if self.adapters is not None:
            out.update(self.adapters.named_parameters())
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.named_parameters().values() if p.trainable]

    def trainable_count(self) -> int:
        return sum(p.data.size for p in self.trainable_parameters())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            p.data = state[name].copy()

    def share_view(self) -> "EncoderModel":
        """New model object sharing the same parameter tensors."""
        view = EncoderModel(self.config, self.vocab, self.params)
        view.adapters = self.adapters
        return view

    # -- forward pass

    def forward(
        self,
        batch: EncodedBatch,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, Tensor]:
        """Hidden states (B, T, h) and the pooled summary vector (B, h).

        Pooling is a learned tanh projection of the mean over non-pad
        final-layer states. Mean pooling keeps the summary input-dependent
        even at random init, where a lone start-token state is dominated by
        its input-independent residual and stalls contrastive training.
        Dropout applies in train mode only (a generator is then required).
        """
        cfg = self.config
        ensure(int(batch.ids.max(initial=0)) < cfg.vocab_size, "token id out of vocab range")
        if train and cfg.dropout > 0.0:
            ensure(rng is not None, "train-mode forward needs a random generator for dropout")
        dt = cfg.np_dtype
        B, T = batch.ids.shape
        ensure(T <= cfg.max_len, "sequence longer than max_len")

        x = ag.add(
            ag.add(
                ag.embedding(self.params["emb.token"], batch.ids),
                ag.embedding(self.params["emb.position"], np.arange(T)),
            ),
            ag.embedding(self.params["emb.segment"], batch.segments),
        )
        x = self._dropout(x, train, rng)

        mask_bias = np.where(batch.mask[:, None, None, :] == 1, 0.0, NEG_INF).astype(dt)
        for i in range(cfg.layers):
            x = self._layer(i, x, mask_bias, train, rng)

        weights = (batch.mask / batch.mask.sum(axis=1, keepdims=True)).astype(dt)
        summary = ag.sum_(ag.mul(x, weights[:, :, None]), axis=1)
        pooled = ag.tanh(ag.add(ag.matmul(summary, self.params["pool.w"]), self.params["pool.b"]))
        return x, pooled

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        rate = self.config.dropout
        if not train or rate <= 0.0:
            return x
        keep = (rng.random(x.shape) >= rate).astype(self.config.np_dtype) / (1.0 - rate)
        return ag.mul(x, Tensor(keep, requires_grad=False))

    def _layer(self, i: int, x: Tensor, mask_bias: np.ndarray, train: bool, rng) -> Tensor:
        cfg = self.config
        P = self.params
        B, T, h = x.shape
        nh, dh = cfg.heads, cfg.hidden // cfg.heads

        def heads(t: Tensor) -> Tensor:
            return ag.swapaxes(ag.reshape(t, (B, T, nh, dh)), 1, 2)

        q = heads(ag.add(ag.matmul(x, P[f"layer{i}.attn.wq"]), P[f"layer{i}.attn.bq"]))
        k = heads(ag.add(ag.matmul(x, P[f"layer{i}.attn.wk"]), P[f"layer{i}.attn.bk"]))
        v = heads(ag.add(ag.matmul(x, P[f"layer{i}.attn.wv"]), P[f"layer{i}.attn.bv"]))

        scores = ag.mul(ag.matmul(q, ag.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        scores = ag.add(scores, Tensor(mask_bias, requires_grad=False))
        probs = ag.softmax(scores, axis=-1)
        ctx = ag.reshape(ag.swapaxes(ag.matmul(probs, v), 1, 2), (B, T, h))
        attn_out = ag.add(ag.matmul(ctx, P[f"layer{i}.attn.wo"]), P[f"layer{i}.attn.bo"])
        attn_out = self._dropout(attn_out, train, rng)
        a = ag.layer_norm(
            ag.add(x, attn_out), P[f"layer{i}.ln1.gamma"], P[f"layer{i}.ln1.beta"]
        )

        f1 = ag.gelu(ag.add(ag.matmul(a, P[f"layer{i}.ffn.w1"]), P[f"layer{i}.ffn.b1"]))
        f2 = ag.add(ag.matmul(f1, P[f"layer{i}.ffn.w2"]), P[f"layer{i}.ffn.b2"])
        f2 = self._dropout(f2, train, rng)
        pre = ag.add(a, f2)

        if self.adapters is not None:
            h_norm = ag.layer_norm(pre, P[f"layer{i}.ln2.gamma"], P[f"layer{i}.ln2.beta"])
            pre = self.adapters.compose(i, h_norm, pre)
        return ag.layer_norm(pre, P[f"layer{i}.ln2.gamma"], P[f"layer{i}.ln2.beta"])


def mask_tokens(
    batch: EncodedBatch,
    rng: np.random.Generator,
    vocab_size: int,
    mask_prob: float = 0.15,
) -> tuple[np.ndarray, np.ndarray]:
    """Dynamic MLM masking: returns (masked ids, labels with -1 ignore marker).

    Each non-special, non-pad position is selected independently with
    mask_prob; selected positions become MASK 80% of the time, a random
    non-special token 10%, and stay unchanged 10%. Call once per epoch for
    fresh randomness.
    """
    ids = batch.ids.copy()
    labels = np.full_like(ids, IGNORE_LABEL)
    if mask_prob <= 0.0:
        return ids, labels
    eligible = (batch.mask == 1) & (batch.ids >= 5)
    select = rng.random(ids.shape) < mask_prob
    action = rng.random(ids.shape)
    random_ids = (
        rng.integers(5, vocab_size, size=ids.shape) if vocab_size > 5 else np.full_like(ids, MASK_ID)
    )
    chosen = eligible & select
    labels[chosen] = batch.ids[chosen]
    to_mask = chosen & (action < 0.8)
    to_random = chosen & (action >= 0.8) & (action < 0.9)
    ids[to_mask] = MASK_ID
    ids[to_random] = random_ids[to_random]
    return ids, labels
