"""Specialization objectives over encoder outputs: masked-token prediction on
flat corpora, and binary / contrastive response selection on dialog triples,
plus the training loop that runs them under a schedule.

The contrastive loss is the NCE form -log exp(f(c, r+)) / sum_i exp(f(c, r_i))
over a group of one true and N negative responses, computed with
max-subtraction. The default scorer f is a dual-encoder dot product of pooled
summary vectors; a joint linear scorer is available behind the head mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from sklearn.base import BaseEstimator

from . import autograd as ag
from .autograd import Parameter, Tensor
from .corpus import NCEGroup, RSInstance, build_nce_groups, sample_rs_instances
from .data import CorpusLine, DialogTriple
from .encoder import IGNORE_LABEL, EncodedBatch, EncoderModel, encode_pair, mask_tokens
from .optim import AdamState, adam_step
from .tokenization import Vocab
from .validation import ensure

LR_GRID = (1e-4, 5e-5, 1e-5, 1e-6)

DUAL_ENCODER_DOT = "dual_encoder_dot"
LINEAR_ON_CLS = "linear_on_cls"


@dataclass
class LossValue:
    loss: float
    count: int
    aux: dict = field(default_factory=dict)


@dataclass
class TrainSchedule:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-5
    lr_grid: Optional[tuple[float, ...]] = None
    patience: int = 3
    dev_fraction: float = 0.05
    seed: int = 13

    def rates(self) -> tuple[float, ...]:
        return tuple(self.lr_grid) if self.lr_grid else (self.lr,)


class MLMHead:
    """Output bias for the tied-embedding vocabulary projection."""

    def __init__(self, vocab_size: int, dtype=np.float32):
        self.params = {"mlm.out_bias": Parameter("mlm.out_bias", np.zeros(vocab_size, dtype=dtype))}

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.params)


class ScoringHead:
    """Response scorer f(c, r): parameter-free dual-encoder dot product, or a
    linear readout of the pooled joint CLS."""

    def __init__(self, mode: str = DUAL_ENCODER_DOT, hidden: int = 0, dtype=np.float32):
        ensure(mode in (DUAL_ENCODER_DOT, LINEAR_ON_CLS), f"unknown scoring mode {mode!r}")
        self.mode = mode
        self.params: dict[str, Parameter] = {}
        if mode == LINEAR_ON_CLS:
            ensure(hidden > 0, "linear_on_cls head needs the hidden size")
            rng = np.random.default_rng(0)
            self.params["rs.w"] = Parameter(
                "rs.w", rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, 1)).astype(dtype)
            )
            self.params["rs.b"] = Parameter("rs.b", np.zeros(1, dtype=dtype))

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.params)


class TextEncodeCache:
    """Memoized text -> (ids, segments, mask) rows for single-segment batches."""

    def __init__(self, vocab: Vocab, max_len: int, per_segment_cap: Optional[int]):
        self.vocab = vocab
        self.max_len = max_len
        self.cap = per_segment_cap
        self._rows: dict[str, tuple[list[int], list[int], list[int]]] = {}

    def batch(self, texts: Sequence[str]) -> EncodedBatch:
        ids, segs, masks = [], [], []
        for t in texts:
            row = self._rows.get(t)
            if row is None:
                row = encode_pair(t, None, self.vocab, self.max_len, self.cap)
                self._rows[t] = row
            ids.append(row[0])
            segs.append(row[1])
            masks.append(row[2])
        return EncodedBatch(
            ids=np.asarray(ids, dtype=np.int64),
            mask=np.asarray(masks, dtype=np.int64),
            segments=np.asarray(segs, dtype=np.int64),
        )


def _unique_index(texts: Sequence[str]) -> tuple[list[str], np.ndarray]:
    uniq: dict[str, int] = {}
    idx = np.empty(len(texts), dtype=np.int64)
    for i, t in enumerate(texts):
        j = uniq.setdefault(t, len(uniq))
        idx[i] = j
    return list(uniq), idx


def pair_scores(
    model: EncoderModel,
    head: ScoringHead,
    pairs: Sequence[tuple[str, str]],
    cache: Optional[TextEncodeCache] = None,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Scores f(c, r) for a batch of (context, response) pairs, shape (N,)."""
    cfg = model.config
    if head.mode == DUAL_ENCODER_DOT:
        if cache is None:
            cache = TextEncodeCache(model.vocab, cfg.max_len, cfg.per_segment_cap)
        texts = [p[0] for p in pairs] + [p[1] for p in pairs]
        uniq, idx = _unique_index(texts)
        _, pooled = model.forward(cache.batch(uniq), train=train, rng=rng)
        n = len(pairs)
        ctx_rows = ag.rows(pooled, idx[:n])
        resp_rows = ag.rows(pooled, idx[n:])
        return ag.sum_(ag.mul(ctx_rows, resp_rows), axis=1)
    batch_rows = [encode_pair(c, r, model.vocab, cfg.max_len, cfg.per_segment_cap) for c, r in pairs]
    batch = EncodedBatch(
        ids=np.asarray([b[0] for b in batch_rows], dtype=np.int64),
        mask=np.asarray([b[2] for b in batch_rows], dtype=np.int64),
        segments=np.asarray([b[1] for b in batch_rows], dtype=np.int64),
    )
    _, pooled = model.forward(batch, train=train, rng=rng)
    scores = ag.add(ag.matmul(pooled, head.params["rs.w"]), head.params["rs.b"])
    return ag.reshape(scores, (len(pairs),))


def mlm_loss(
    model: EncoderModel,
    head: MLMHead,
    batch: EncodedBatch,
    masked_ids: np.ndarray,
    labels: np.ndarray,
    train: bool = False,
    rng=None,
) -> tuple[Optional[Tensor], LossValue]:
    """Mean cross-entropy at masked positions through the tied embedding table."""
    positions = np.argwhere(labels != IGNORE_LABEL)
    if positions.size == 0:
        return None, LossValue(loss=0.0, count=0)
    masked_batch = EncodedBatch(ids=masked_ids, mask=batch.mask, segments=batch.segments)
    hidden, _ = model.forward(masked_batch, train=train, rng=rng)
    B, T, h = hidden.shape
    flat = ag.reshape(hidden, (B * T, h))
    flat_idx = positions[:, 0] * T + positions[:, 1]
    selected = ag.rows(flat, flat_idx)
    logits = ag.add(
        ag.matmul(selected, ag.swapaxes(model.params["emb.token"], 0, 1)),
        head.params["mlm.out_bias"],
    )
    targets = labels[positions[:, 0], positions[:, 1]]
    loss = ag.cross_entropy(logits, targets, reduction="mean")
    return loss, LossValue(loss=float(loss.data), count=int(len(flat_idx)))


def rs_class_loss(
    model: EncoderModel,
    head: ScoringHead,
    instances: Sequence[RSInstance],
    cache: Optional[TextEncodeCache] = None,
    train: bool = False,
    rng=None,
) -> tuple[Tensor, LossValue]:
    """Binary cross-entropy of sigmoid(f(c, r)); positives vs both negative kinds."""
    ensure(len(instances) > 0, "rs_class_loss needs at least one instance")
    pairs = [(inst.context, inst.response) for inst in instances]
    targets = np.asarray(
        [1.0 if inst.label == "positive" else 0.0 for inst in instances],
        dtype=model.config.np_dtype,
    )
    scores = pair_scores(model, head, pairs, cache, train, rng)
    loss = ag.bce_with_logits(scores, targets, reduction="mean")
    predictions = scores.data > 0.0
    accuracy = float(np.mean(predictions == (targets > 0.5)))
    return loss, LossValue(loss=float(loss.data), count=len(instances), aux={"accuracy": accuracy})


def pessimistic_rank(scores: np.ndarray, true_index: int) -> int:
    """1 + strictly-greater count, ties counted against the true item."""
    s = np.asarray(scores)
    true_score = s[true_index]
    greater = int(np.sum(s > true_score))
    ties = int(np.sum(s == true_score)) - 1
    return 1 + greater + ties


def rs_contrast_loss(
    model: EncoderModel,
    head: ScoringHead,
    groups: Sequence[NCEGroup],
    cache: Optional[TextEncodeCache] = None,
    train: bool = False,
    rng=None,
) -> tuple[Tensor, LossValue]:
    """Mean per-group NCE loss; reports the pessimistic rank of each true response."""
    ensure(len(groups) > 0, "rs_contrast_loss needs at least one group")
    pairs = []
    for g in groups:
        pairs.extend((g.context, r) for r in g.responses)
    scores = pair_scores(model, head, pairs, cache, train, rng)

    total = None
    ranks = []
    offset = 0
    for g in groups:
        n = len(g.responses)
        group_scores = ag.slice_rows(scores, offset, offset + n)
        lse = ag.logsumexp(group_scores, axis=-1)
        true_score = ag.rows(group_scores, np.asarray(g.true_index))
        piece = ag.sub(lse, true_score)
        total = piece if total is None else ag.add(total, piece)
        ranks.append(pessimistic_rank(scores.data[offset : offset + n], g.true_index))
        offset += n
    loss = ag.mul(total, 1.0 / len(groups))
    mrr = float(np.mean([1.0 / r for r in ranks]))
    return loss, LossValue(
        loss=float(loss.data),
        count=len(groups),
        aux={"mean_rank": float(np.mean(ranks)), "mrr": mrr},
    )


class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, direction: str, patience: int):
        ensure(direction in ("min", "max"), "direction must be min or max")
        ensure(patience >= 1, "patience must be at least 1")
        self.direction = direction
        self.patience = patience
        self.best: Optional[float] = None
        self.failures = 0

    def update(self, value: float) -> bool:
        improved = self.best is None or (
            value < self.best if self.direction == "min" else value > self.best
        )
        if improved:
            self.best = value
            self.failures = 0
        else:
            self.failures += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.failures >= self.patience


@dataclass
class SpecializeResult:
    model: EncoderModel
    head: object
    log: list
    best_lr: float
    best_metric: float
    metric_name: str
    diverged_rates: tuple[float, ...] = ()


def _split_indices(n: int, dev_fraction: float, rng: np.random.Generator):
    ensure(n >= 2, "need at least two items for a train/dev split")
    perm = rng.permutation(n)
    n_dev = max(1, int(n * dev_fraction))
    n_dev = min(n_dev, n - 1)
    return perm[n_dev:], perm[:n_dev]


def _batched(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def specialize(
    model: EncoderModel,
    objective: str,
    corpus,
    schedule: TrainSchedule,
    scoring: str = DUAL_ENCODER_DOT,
    head=None,
) -> SpecializeResult:
    """Train under the schedule, optionally grid-searching the learning rate.

    mlm takes flat text (strings or corpus lines) and tracks dev loss;
    rs_class / rs_contrast take dialog triples, build their instance groups
    once (seeded), and track dev mean reciprocal rank. Every rate restarts
    from the same initial state with the same seed; non-finite training loss
    aborts that rate and the grid moves on. Returns the best-dev checkpoint.
    """
    ensure(objective in ("mlm", "rs_class", "rs_contrast"), f"unknown objective {objective!r}")
    cfg = model.config
    init_model_state = model.snapshot()

    if objective == "mlm":
        lines = [x.text if isinstance(x, CorpusLine) else x for x in corpus]
        ensure(len(lines) >= 2, "mlm specialization needs at least two lines")
        if head is None:
            head = MLMHead(cfg.vocab_size, dtype=cfg.np_dtype)
        cache = TextEncodeCache(model.vocab, cfg.max_len, cfg.per_segment_cap)
        full = cache.batch(lines)
        metric_name, direction = "dev_loss", "min"
        split_rng = np.random.default_rng(schedule.seed)
        train_idx, dev_idx = _split_indices(len(lines), schedule.dev_fraction, split_rng)
        dev_batch = EncodedBatch(
            ids=full.ids[dev_idx], mask=full.mask[dev_idx], segments=full.segments[dev_idx]
        )
        dev_masked, dev_labels = mask_tokens(
            dev_batch, np.random.default_rng(schedule.seed + 9999), cfg.vocab_size
        )
        train_data = (full, train_idx)
    else:
        triples = list(corpus)
        ensure(all(isinstance(t, DialogTriple) for t in triples), "rs objectives take dialog triples")
        instances, _report = sample_rs_instances(triples, rng_seed=schedule.seed + 1)
        groups = build_nce_groups(instances, rng_seed=schedule.seed + 2)
        if head is None:
            head = ScoringHead(scoring, hidden=cfg.hidden, dtype=cfg.np_dtype)
        cache = TextEncodeCache(model.vocab, cfg.max_len, cfg.per_segment_cap)
        metric_name, direction = "dev_mrr", "max"
        split_rng = np.random.default_rng(schedule.seed)
        train_idx, dev_idx = _split_indices(len(triples), schedule.dev_fraction, split_rng)
        train_data = (instances, groups, train_idx)
        dev_groups = [groups[i] for i in dev_idx]

    init_head_state = {k: p.data.copy() for k, p in head.named_parameters().items()}

    def restore_head(state):
        for k, p in head.named_parameters().items():
            p.data = state[k].copy()

    log: list[dict] = []
    runs = []
    diverged = []
    for lr in schedule.rates():
        model.restore(init_model_state)
        restore_head(init_head_state)
        rng = np.random.default_rng(schedule.seed)
        opt = AdamState(lr=lr)
        trainables = model.trainable_parameters() + [
            p for p in head.named_parameters().values() if p.trainable
        ]
        stopper = EarlyStopper(direction, schedule.patience)
        best_state = None
        best_head = None
        run_diverged = False

        for epoch in range(1, schedule.epochs + 1):
            order = rng.permutation(len(train_idx))
            epoch_loss = 0.0
            n_batches = 0
            for chunk in _batched(order, schedule.batch_size):
                batch_idx = train_idx[chunk]
                ag.zero_grads(trainables)
                if objective == "mlm":
                    full, _ = train_data
                    batch = EncodedBatch(
                        ids=full.ids[batch_idx],
                        mask=full.mask[batch_idx],
                        segments=full.segments[batch_idx],
                    )
                    masked, labels = mask_tokens(batch, rng, cfg.vocab_size)
                    loss, value = mlm_loss(model, head, batch, masked, labels, train=True, rng=rng)
                    if loss is None:
                        continue
                elif objective == "rs_class":
                    instances, _groups, _ = train_data
                    flat = [inst for i in batch_idx for inst in instances[i]]
                    loss, value = rs_class_loss(model, head, flat, cache, train=True, rng=rng)
                else:
                    _instances, groups, _ = train_data
                    batch_groups = [groups[i] for i in batch_idx]
                    loss, value = rs_contrast_loss(model, head, batch_groups, cache, train=True, rng=rng)
                if not np.isfinite(value.loss):
                    run_diverged = True
                    break
                epoch_loss += value.loss
                n_batches += 1
                ag.backward(loss)
                adam_step(opt, trainables)
            if run_diverged:
                break

            if objective == "mlm":
                _, dev_value = mlm_loss(model, head, dev_batch, dev_masked, dev_labels)
                dev_metric = dev_value.loss
            else:
                _, dev_value = rs_contrast_loss(model, head, dev_groups, cache)
                dev_metric = dev_value.aux["mrr"]
            log.append(
                {
                    "lr": lr,
                    "epoch": epoch,
                    "train_loss": epoch_loss / max(1, n_batches),
                    metric_name: dev_metric,
                }
            )
            if stopper.update(dev_metric):
                best_state = model.snapshot()
                best_head = {k: p.data.copy() for k, p in head.named_parameters().items()}
            if stopper.should_stop:
                break

        if run_diverged or best_state is None:
            diverged.append(lr)
            log.append({"lr": lr, "diverged": True})
            continue
        runs.append((stopper.best, lr, best_state, best_head))

    ensure(len(runs) > 0, "every learning rate diverged; nothing to return")
    key = (lambda r: r[0]) if direction == "max" else (lambda r: -r[0])
    best_metric, best_lr, best_state, best_head = max(runs, key=key)
    model.restore(best_state)
    restore_head(best_head)
    return SpecializeResult(
        model=model,
        head=head,
        log=log,
        best_lr=best_lr,
        best_metric=best_metric,
        metric_name=metric_name,
        diverged_rates=tuple(diverged),
    )


class EncoderSpecializer(BaseEstimator):
    """Estimator facade over `specialize`.

    fit(X) takes flat lines for the mlm objective or dialog triples for the
    response-selection objectives. The base model is either passed in or
    freshly initialized from a vocabulary built over X. With use_adapters
    the base is frozen and a new bottleneck bank is trained instead.
    """

    def __init__(
        self,
        objective: str = "mlm",
        base: Optional[EncoderModel] = None,
        config=None,
        scoring: str = DUAL_ENCODER_DOT,
        use_adapters: bool = False,
        bottleneck: Optional[int] = None,
        adapter_activation: str = "relu",
        epochs: int = 30,
        batch_size: int = 32,
        lr: float = 5e-5,
        lr_grid: Optional[tuple[float, ...]] = None,
        patience: int = 3,
        dev_fraction: float = 0.05,
        seed: int = 13,
        init_seed: int = 0,
        vocab_min_frequency: int = 1,
        domain: str = "",
    ):
        self.objective = objective
        self.base = base
        self.config = config
        self.scoring = scoring
        self.use_adapters = use_adapters
        self.bottleneck = bottleneck
        self.adapter_activation = adapter_activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_grid = lr_grid
        self.patience = patience
        self.dev_fraction = dev_fraction
        self.seed = seed
        self.init_seed = init_seed
        self.vocab_min_frequency = vocab_min_frequency
        self.domain = domain

    def _corpus_texts(self, X) -> list[str]:
        texts = []
        for item in X:
            if isinstance(item, CorpusLine):
                texts.append(item.text)
            elif isinstance(item, DialogTriple):
                texts.extend((item.context, item.response, item.false_response))
            else:
                texts.append(str(item))
        return texts

    def fit(self, X, y=None):
        from dataclasses import replace

        from .adapters import freeze_base, init_adapter_bank, inject
        from .encoder import EncoderConfig
        from .tokenization import build_vocab

        if self.base is not None:
            model = self.base
        else:
            cfg = self.config if self.config is not None else EncoderConfig()
            vocab = build_vocab(self._corpus_texts(X), min_frequency=self.vocab_min_frequency)
            cfg = replace(cfg, vocab_size=len(vocab))
            model = EncoderModel.init(cfg, vocab, seed=self.init_seed)
        if self.use_adapters:
            m = self.bottleneck if self.bottleneck else max(1, model.config.hidden // 16)
            bank = init_adapter_bank(
                n_layers=model.config.layers,
                hidden=model.config.hidden,
                bottleneck=m,
                seed=self.init_seed,
                domain=self.domain,
                activation=self.adapter_activation,
                dtype=model.config.np_dtype,
            )
            model = inject(model, [bank])
            freeze_base(model)
            self.bank_ = bank
        schedule = TrainSchedule(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_grid=self.lr_grid,
            patience=self.patience,
            dev_fraction=self.dev_fraction,
            seed=self.seed,
        )
        result = specialize(model, self.objective, list(X), schedule, scoring=self.scoring)
        self.model_ = result.model
        self.head_ = result.head
        self.result_ = result
        self.log_ = result.log
        return self

    def transform(self, X):
        """Pooled summary vectors for a list of texts, shape (n, hidden)."""
        from .validation import check_fitted

        check_fitted(self, "model_")
        cfg = self.model_.config
        cache = TextEncodeCache(self.model_.vocab, cfg.max_len, cfg.per_segment_cap)
        _, pooled = self.model_.forward(cache.batch([str(t) for t in X]))
        return pooled.data

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> np.ndarray:
        """f(context, response) under the fitted scoring head."""
        from .validation import check_fitted

        check_fitted(self, "model_")
        ensure(isinstance(self.head_, ScoringHead), "score_pairs needs a response-selection head")
        return pair_scores(self.model_, self.head_, list(pairs)).data
