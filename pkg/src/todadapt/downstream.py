"""Downstream dialog tasks over a frozen or fine-tuned encoder: state
tracking scored by joint goal accuracy, response retrieval scored by
recall-at-1 over sampled candidate pools, and the experiment harnesses built
on them (few-shot curves, cross-domain transfer, multi-domain composition).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from sklearn.base import BaseEstimator

from . import autograd as ag
from .autograd import Parameter, Tensor
from .data import Dialog, Ontology, SlotValue
from .encoder import EncodedBatch, EncoderModel, encode_history
from .objectives import (
    DUAL_ENCODER_DOT,
    EarlyStopper,
    ScoringHead,
    TextEncodeCache,
    TrainSchedule,
    pair_scores,
    pessimistic_rank,
)
from .optim import AdamState, adam_step
from .validation import SchemaError, check_fitted, ensure

DST_SCHEDULE = TrainSchedule(epochs=300, batch_size=6, lr=5e-5, patience=10)
RR_SCHEDULE = TrainSchedule(epochs=300, batch_size=24, lr=5e-5, patience=10)
FEW_SHOT_FRACTIONS = (0.05, 0.10, 0.20, 0.30, 0.50, 0.70, 1.00)
DEFAULT_POOL_SIZE = 20


class TrainingDiverged(RuntimeError):
    pass


def config_digest(obj) -> str:
    """Stable short digest of a JSON-serializable configuration."""
    payload = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:12]


def _norm(value: str) -> str:
    return value.strip().lower()


@dataclass(frozen=True)
class TurnPrediction:
    """Predicted value per (domain, slot); values come from the ontology
    candidate lists, so membership holds by construction."""

    values: dict

    def value(self, domain: str, slot: str) -> str:
        return self.values[(domain, slot)]


@dataclass
class EvalReport:
    task: str
    domains: tuple[str, ...]
    metric: str
    value: float
    n_items: int
    seed: int
    config_digest: str
    fraction: Optional[float] = None

    def __post_init__(self):
        ensure(0.0 <= self.value <= 1.0, "metric value must lie in [0, 1]")
        ensure(self.n_items > 0, "report needs at least one evaluated item")

    def to_obj(self) -> dict:
        obj = {
            "task": self.task,
            "domains": list(self.domains),
            "metric": self.metric,
            "value": self.value,
            "n_items": self.n_items,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }
        if self.fraction is not None:
            obj["fraction"] = self.fraction
        return obj


# -- dialog state tracking


class DSTHead:
    """Per-(domain, slot) value scorer: score(s, v) = (c * q_s)^T W_s e_v with
    c the pooled history, e_v the pooled encoding of the value string, q_s an
    elementwise slot query (ones at init) and W_s a bilinear map."""

    def __init__(self, ontology: Ontology, hidden: int, seed: int = 0, dtype=np.float32):
        ensure(len(ontology.slots()) > 0, "ontology has no slots to score")
        rng = np.random.default_rng(seed)
        self.ontology = ontology
        self.hidden = hidden
        self.params: dict[str, Parameter] = {}
        for domain, slot in ontology.slots():
            stem = f"dst.{domain}::{slot}"
            self.params[f"{stem}.query"] = Parameter(
                f"{stem}.query", np.ones(hidden, dtype=dtype)
            )
            self.params[f"{stem}.bilinear"] = Parameter(
                f"{stem}.bilinear",
                rng.normal(0.0, 1.0 / hidden, size=(hidden, hidden)).astype(dtype),
            )

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.params)

    def slot_params(self, domain: str, slot: str) -> tuple[Parameter, Parameter]:
        stem = f"dst.{domain}::{slot}"
        if f"{stem}.query" not in self.params:
            raise SchemaError(f"no scorer for slot {domain}-{slot}")
        return self.params[f"{stem}.query"], self.params[f"{stem}.bilinear"]


@dataclass(frozen=True)
class DSTItem:
    """One training/evaluation unit: the history up to a turn plus that
    turn's gold state."""

    dialog_id: str
    turn_index: int
    history: tuple[str, ...]
    gold: tuple[SlotValue, ...]
    domains: tuple[str, ...] = ()


def dialogs_to_dst_items(dialogs: Sequence[Dialog]) -> list[DSTItem]:
    items = []
    for d in dialogs:
        ensure(d.states is not None, f"dialog {d.id} carries no state annotations")
        for t in range(len(d.turns)):
            items.append(
                DSTItem(
                    dialog_id=d.id,
                    turn_index=t,
                    history=tuple(turn.text for turn in d.turns[: t + 1]),
                    gold=tuple(d.states[t]),
                    domains=tuple(sorted(d.domains)),
                )
            )
    return items


def complete_gold(gold: Sequence[SlotValue], ontology: Ontology) -> dict:
    """Gold state over every ontology (domain, slot), absent pairs = none."""
    from .data import NONE_VALUE

    state = {pair: NONE_VALUE for pair in ontology.slots()}
    for sv in gold:
        if (sv.domain, sv.slot) in state:
            state[(sv.domain, sv.slot)] = _norm(sv.value)
    return state


class _HistoryCache:
    """Memoized history -> encoded row, keyed by the turn tuple."""

    def __init__(self, vocab, max_len: int):
        self.vocab = vocab
        self.max_len = max_len
        self._rows: dict[tuple, tuple] = {}

    def batch(self, histories: Sequence[tuple[str, ...]]) -> EncodedBatch:
        ids, segs, masks = [], [], []
        for h in histories:
            row = self._rows.get(h)
            if row is None:
                row = encode_history(list(h), self.vocab, self.max_len)
                self._rows[h] = row
            ids.append(row[0])
            segs.append(row[1])
            masks.append(row[2])
        return EncodedBatch(
            ids=np.asarray(ids, dtype=np.int64),
            mask=np.asarray(masks, dtype=np.int64),
            segments=np.asarray(segs, dtype=np.int64),
        )


def _slot_scores(
    pooled_ctx: Tensor,
    value_rows: Tensor,
    query: Parameter,
    bilinear: Parameter,
) -> Tensor:
    gated = ag.mul(pooled_ctx, query)
    projected = ag.matmul(gated, bilinear)
    return ag.matmul(projected, ag.swapaxes(value_rows, 0, 1))


def _encode_values(model, cache: TextEncodeCache, texts: Sequence[str], train, rng):
    _, pooled = model.forward(cache.batch(texts), train=train, rng=rng)
    return pooled


def dst_forward(
    model: EncoderModel,
    head: DSTHead,
    histories: Sequence[tuple[str, ...]],
    ontology: Ontology,
    history_cache: Optional[_HistoryCache] = None,
    text_cache: Optional[TextEncodeCache] = None,
) -> list[TurnPrediction]:
    """Predicted value per slot for each history; first-listed value wins ties."""
    cfg = model.config
    history_cache = history_cache or _HistoryCache(model.vocab, cfg.max_len)
    text_cache = text_cache or TextEncodeCache(model.vocab, cfg.max_len, cfg.per_segment_cap)
    _, pooled = model.forward(history_cache.batch(histories))
    predictions = [dict() for _ in histories]
    for domain, slot in ontology.slots():
        candidates = ontology.candidates(domain, slot)
        values = _encode_values(model, text_cache, candidates, False, None)
        query, bilinear = head.slot_params(domain, slot)
        scores = _slot_scores(pooled, values, query, bilinear).data
        picks = np.argmax(scores, axis=1)
        for i, p in enumerate(picks):
            predictions[i][(domain, slot)] = candidates[int(p)]
    return [TurnPrediction(values=p) for p in predictions]


def dst_loss(
    model: EncoderModel,
    head: DSTHead,
    items: Sequence[DSTItem],
    ontology: Ontology,
    history_cache: _HistoryCache,
    text_cache: TextEncodeCache,
    train: bool = False,
    rng=None,
) -> tuple[Tensor, float]:
    """Cross-entropy summed over slots, averaged over the batch of turns."""
    ensure(len(items) > 0, "dst_loss needs at least one turn")
    _, pooled = model.forward(
        history_cache.batch([it.history for it in items]), train=train, rng=rng
    )
    all_candidates: list[str] = []
    offsets = {}
    for domain, slot in ontology.slots():
        cands = ontology.candidates(domain, slot)
        offsets[(domain, slot)] = (len(all_candidates), len(cands))
        all_candidates.extend(cands)
    value_rows = _encode_values(model, text_cache, all_candidates, train, rng)

    golds = [complete_gold(it.gold, ontology) for it in items]
    total = None
    for domain, slot in ontology.slots():
        start, count = offsets[(domain, slot)]
        cands = all_candidates[start : start + count]
        index_of = {_norm(c): i for i, c in enumerate(cands)}
        labels = np.empty(len(items), dtype=np.int64)
        for i, gold in enumerate(golds):
            value = gold[(domain, slot)]
            if value not in index_of:
                raise SchemaError(
                    f"gold value {value!r} for {domain}-{slot} is outside the ontology"
                )
            labels[i] = index_of[value]
        slot_values = ag.slice_rows(value_rows, start, start + count)
        scores = _slot_scores(pooled, slot_values, *head.slot_params(domain, slot))
        piece = ag.cross_entropy(scores, labels, reduction="sum")
        total = piece if total is None else ag.add(total, piece)
    loss = ag.mul(total, 1.0 / len(items))
    return loss, float(loss.data)


def joint_goal_accuracy(
    predictions: Sequence[TurnPrediction],
    gold_states: Sequence[Sequence[SlotValue]],
    ontology: Ontology,
) -> float:
    """Fraction of turns where every ontology slot matches exactly after
    lowercasing and trimming; absent gold pairs count as none."""
    if len(predictions) != len(gold_states):
        raise SchemaError(
            f"turn count mismatch: {len(predictions)} predictions vs {len(gold_states)} gold"
        )
    ensure(len(predictions) > 0, "joint goal accuracy over zero turns is undefined")
    slots = ontology.slots()
    correct = 0
    for pred, gold in zip(predictions, gold_states):
        for pair in slots:
            if pair not in pred.values:
                raise SchemaError(f"prediction missing slot {pair[0]}-{pair[1]}")
        completed = complete_gold(gold, ontology)
        if all(_norm(pred.values[pair]) == completed[pair] for pair in slots):
            correct += 1
    return correct / len(predictions)


# -- response retrieval


@dataclass(frozen=True)
class RRItem:
    """A system turn and the full history before it."""

    dialog_id: str
    turn_index: int
    context: tuple[str, ...]
    response: str
    domains: tuple[str, ...] = ()


def dialogs_to_rr_pairs(dialogs: Sequence[Dialog]) -> list[RRItem]:
    items = []
    for d in dialogs:
        for t, turn in enumerate(d.turns):
            if turn.speaker != "system" or t == 0:
                continue
            items.append(
                RRItem(
                    dialog_id=d.id,
                    turn_index=t,
                    context=tuple(prev.text for prev in d.turns[:t]),
                    response=turn.text,
                    domains=tuple(sorted(d.domains)),
                )
            )
    return items


def rr_rank(scores: Sequence[float], gold_index: int) -> int:
    """Rank of the gold candidate, ties broken against it."""
    s = np.asarray(scores)
    ensure(0 <= gold_index < len(s), "gold index outside the candidate pool")
    return pessimistic_rank(s, gold_index)


def build_candidate_pools(
    items: Sequence[RRItem],
    pool_size: int,
    seed: int,
) -> list[list[str]]:
    """Per item: gold first, then pool_size-1 distinct distractors drawn
    seeded from the other items' responses (text-distinct from the gold)."""
    ensure(pool_size >= 2, "candidate pool needs the gold plus at least one distractor")
    rng = np.random.default_rng(seed)
    unique_responses = sorted({it.response for it in items})
    pools = []
    for it in items:
        distractors = [r for r in unique_responses if r != it.response]
        n = min(pool_size - 1, len(distractors))
        ensure(n >= 1, "not enough distinct responses to build a candidate pool")
        chosen = rng.choice(len(distractors), size=n, replace=False)
        pools.append([it.response] + [distractors[int(c)] for c in chosen])
    return pools


def _rr_scores_for_pools(
    model: EncoderModel,
    head: ScoringHead,
    items: Sequence[RRItem],
    pools: Sequence[list[str]],
    history_cache: _HistoryCache,
    text_cache: TextEncodeCache,
) -> list[np.ndarray]:
    if head.mode == DUAL_ENCODER_DOT:
        _, ctx_pooled = model.forward(history_cache.batch([it.context for it in items]))
        uniq: dict[str, int] = {}
        for pool in pools:
            for r in pool:
                uniq.setdefault(r, len(uniq))
        _, resp_pooled = model.forward(text_cache.batch(list(uniq)))
        C = ctx_pooled.data
        R = resp_pooled.data
        out = []
        for i, pool in enumerate(pools):
            rows = R[[uniq[r] for r in pool]]
            out.append(rows @ C[i])
        return out
    out = []
    for it, pool in zip(items, pools):
        joined = " ".join(it.context)
        scores = pair_scores(model, head, [(joined, r) for r in pool])
        out.append(scores.data.copy())
    return out


def recall_at_1(
    model: EncoderModel,
    head: ScoringHead,
    items: Sequence[RRItem],
    pool_size: int = DEFAULT_POOL_SIZE,
    seed: int = 0,
    pools: Optional[Sequence[list[str]]] = None,
) -> tuple[float, list[int]]:
    """Fraction of items whose gold response ranks first in its pool."""
    ensure(len(items) > 0, "recall needs at least one item")
    if pools is None:
        pools = build_candidate_pools(items, pool_size, seed)
    history_cache = _HistoryCache(model.vocab, model.config.max_len)
    text_cache = TextEncodeCache(model.vocab, model.config.max_len, model.config.per_segment_cap)
    score_lists = _rr_scores_for_pools(model, head, items, pools, history_cache, text_cache)
    ranks = [rr_rank(s, 0) for s in score_lists]
    return float(np.mean([r == 1 for r in ranks])), ranks


@dataclass(frozen=True)
class _RRGroup:
    context: tuple[str, ...]
    responses: tuple[str, ...]
    true_index: int


def _build_rr_train_groups(
    items: Sequence[RRItem], n_negatives: int, seed: int
) -> list[_RRGroup]:
    """Per item: gold + n distinct sampled negatives from the other responses,
    shuffled into a random position."""
    rng = np.random.default_rng(seed)
    unique_responses = sorted({it.response for it in items})
    groups = []
    for it in items:
        distractors = [r for r in unique_responses if r != it.response]
        n = min(n_negatives, len(distractors))
        ensure(n >= 1, "need at least one negative response for contrastive training")
        chosen = rng.choice(len(distractors), size=n, replace=False)
        responses = [it.response] + [distractors[int(c)] for c in chosen]
        perm = rng.permutation(len(responses))
        shuffled = [responses[int(p)] for p in perm]
        true_index = int(np.where(perm == 0)[0][0])
        groups.append(_RRGroup(it.context, tuple(shuffled), true_index))
    return groups


def _rr_group_loss(
    model: EncoderModel,
    head: ScoringHead,
    groups: Sequence[_RRGroup],
    history_cache: _HistoryCache,
    text_cache: TextEncodeCache,
    train: bool,
    rng,
) -> tuple[Tensor, float]:
    """Contrastive loss over history-context groups (histories need the
    SEP-joined encoding, so the flat-text path does not apply)."""
    if head.mode == DUAL_ENCODER_DOT:
        contexts = [g.context for g in groups]
        _, ctx_pooled = model.forward(history_cache.batch(contexts), train=train, rng=rng)
        uniq: dict[str, int] = {}
        flat_idx = []
        group_of = []
        for gi, g in enumerate(groups):
            for r in g.responses:
                flat_idx.append(uniq.setdefault(r, len(uniq)))
                group_of.append(gi)
        _, resp_pooled = model.forward(text_cache.batch(list(uniq)), train=train, rng=rng)
        resp_rows = ag.rows(resp_pooled, np.asarray(flat_idx, dtype=np.int64))
        ctx_rows = ag.rows(ctx_pooled, np.asarray(group_of, dtype=np.int64))
        scores = ag.sum_(ag.mul(ctx_rows, resp_rows), axis=1)
    else:
        pairs = []
        for g in groups:
            joined = " ".join(g.context)
            pairs.extend((joined, r) for r in g.responses)
        scores = pair_scores(model, head, pairs, train=train, rng=rng)

    total = None
    offset = 0
    for g in groups:
        n = len(g.responses)
        group_scores = ag.slice_rows(scores, offset, offset + n)
        lse = ag.logsumexp(group_scores, axis=-1)
        true_score = ag.rows(group_scores, np.asarray(g.true_index))
        piece = ag.sub(lse, true_score)
        total = piece if total is None else ag.add(total, piece)
        offset += n
    loss = ag.mul(total, 1.0 / len(groups))
    return loss, float(loss.data)


# -- fine-tuning loop


@dataclass
class FinetuneResult:
    model: EncoderModel
    head: object
    report: EvalReport
    log: list = field(default_factory=list)
    dev_metric: float = 0.0


def _head_state(head) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in head.named_parameters().items()}


def _restore_head(head, state) -> None:
    for k, p in head.named_parameters().items():
        p.data = state[k].copy()


def _domains_of(dialogs: Sequence[Dialog]) -> tuple[str, ...]:
    out: set[str] = set()
    for d in dialogs:
        out.update(d.domains)
    return tuple(sorted(out))


def finetune(
    model: EncoderModel,
    task: str,
    splits: dict,
    schedule: Optional[TrainSchedule] = None,
    ontology: Optional[Ontology] = None,
    head: Optional[object] = None,
    scoring: str = DUAL_ENCODER_DOT,
    pool_size: int = DEFAULT_POOL_SIZE,
    train_negatives: int = 7,
    head_seed: int = 0,
    train_head_only: bool = False,
) -> FinetuneResult:
    """Fine-tune on splits['train'], early-stop on splits['dev'] (JGA for dst,
    R@1 for rr), report on splits['test']. Mutates the model in place and
    returns it restored to the best-dev state."""
    ensure(task in ("dst", "rr"), f"unknown task {task!r}")
    for key in ("train", "dev", "test"):
        ensure(key in splits and len(splits[key]) > 0, f"missing or empty split {key!r}")
    cfg = model.config
    ensure(schedule is None or schedule.epochs >= 1, "schedule needs at least one epoch")
    if schedule is None:
        schedule = DST_SCHEDULE if task == "dst" else RR_SCHEDULE
    history_cache = _HistoryCache(model.vocab, cfg.max_len)
    text_cache = TextEncodeCache(model.vocab, cfg.max_len, cfg.per_segment_cap)

    if task == "dst":
        ensure(ontology is not None, "dst fine-tuning needs an ontology")
        train_items = dialogs_to_dst_items(splits["train"])
        dev_items = dialogs_to_dst_items(splits["dev"])
        test_items = dialogs_to_dst_items(splits["test"])
        if head is None:
            head = DSTHead(ontology, cfg.hidden, seed=head_seed, dtype=cfg.np_dtype)
        metric_name = "jga"
    else:
        train_items = dialogs_to_rr_pairs(splits["train"])
        dev_items = dialogs_to_rr_pairs(splits["dev"])
        test_items = dialogs_to_rr_pairs(splits["test"])
        if head is None:
            head = ScoringHead(scoring, hidden=cfg.hidden, dtype=cfg.np_dtype)
        ensure(len(train_items) > 0, "no system turns in the training dialogs")
        train_groups = _build_rr_train_groups(train_items, train_negatives, schedule.seed + 1)
        dev_pools = build_candidate_pools(dev_items, pool_size, schedule.seed + 2)
        metric_name = f"r{pool_size}@1"
    ensure(len(train_items) > 0 and len(dev_items) > 0 and len(test_items) > 0,
           "every split must yield at least one item")

    rng = np.random.default_rng(schedule.seed)
    opt = AdamState(lr=schedule.lr)
    model_trainables = [] if train_head_only else model.trainable_parameters()
    trainables = model_trainables + [
        p for p in head.named_parameters().values() if p.trainable
    ]
    ensure(len(trainables) > 0, "nothing to train")
    stopper = EarlyStopper("max", schedule.patience)
    best_state = None
    best_head = None
    log: list[dict] = []

    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(len(train_items))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), schedule.batch_size):
            batch_idx = order[start : start + schedule.batch_size]
            ag.zero_grads(trainables)
            if task == "dst":
                batch = [train_items[i] for i in batch_idx]
                loss, value = dst_loss(
                    model, head, batch, ontology, history_cache, text_cache, train=True, rng=rng
                )
            else:
                batch = [train_groups[i] for i in batch_idx]
                loss, value = _rr_group_loss(
                    model, head, batch, history_cache, text_cache, train=True, rng=rng
                )
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite {task} loss at epoch {epoch} with lr {schedule.lr}"
                )
            epoch_loss += value
            n_batches += 1
            ag.backward(loss)
            adam_step(opt, trainables)

        if task == "dst":
            predictions = dst_forward(
                model, head, [it.history for it in dev_items], ontology, history_cache, text_cache
            )
            dev_metric = joint_goal_accuracy(
                predictions, [it.gold for it in dev_items], ontology
            )
        else:
            dev_metric, _ = recall_at_1(model, head, dev_items, pool_size, pools=dev_pools)
        log.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(1, n_batches),
                f"dev_{metric_name}": dev_metric,
            }
        )
        if stopper.update(dev_metric):
            best_state = model.snapshot()
            best_head = _head_state(head)
        if stopper.should_stop:
            break

    model.restore(best_state)
    _restore_head(head, best_head)

    if task == "dst":
        predictions = dst_forward(
            model, head, [it.history for it in test_items], ontology, history_cache, text_cache
        )
        test_metric = joint_goal_accuracy(predictions, [it.gold for it in test_items], ontology)
        n_items = len(test_items)
    else:
        test_metric, _ = recall_at_1(
            model, head, test_items, pool_size, seed=schedule.seed + 3
        )
        n_items = len(test_items)
    digest = config_digest(
        {
            "task": task,
            "schedule": schedule.__dict__,
            "pool_size": pool_size,
            "train_negatives": train_negatives,
            "scoring": getattr(head, "mode", "dst"),
        }
    )
    report = EvalReport(
        task=task,
        domains=_domains_of(splits["test"]),
        metric=metric_name,
        value=test_metric,
        n_items=n_items,
        seed=schedule.seed,
        config_digest=digest,
    )
    return FinetuneResult(
        model=model, head=head, report=report, log=log, dev_metric=stopper.best
    )


# -- experiment harnesses


def few_shot_sizes(n_train: int, fractions: Sequence[float]) -> list[int]:
    """Rounded-to-nearest dialog counts, at least one per fraction."""
    ensure(n_train > 0, "empty training split")
    sizes = []
    for f in fractions:
        ensure(0.0 < f <= 1.0, f"fraction {f} outside (0, 1]")
        n = max(1, int(n_train * f + 0.5))
        ensure(n > 0, f"fraction {f} yields zero dialogs")
        sizes.append(min(n, n_train))
    return sizes


def few_shot_curve(
    model: EncoderModel,
    task: str,
    splits: dict,
    fractions: Sequence[float] = FEW_SHOT_FRACTIONS,
    schedule: Optional[TrainSchedule] = None,
    seed: int = 0,
    **finetune_kwargs,
) -> list[EvalReport]:
    """One fine-tune per fraction over nested seeded subsets of the training
    dialogs (each smaller subset is a prefix of every larger one)."""
    train = list(splits["train"])
    sizes = few_shot_sizes(len(train), fractions)
    perm = np.random.default_rng(seed).permutation(len(train))
    init_state = model.snapshot()
    reports = []
    for fraction, size in zip(fractions, sizes):
        # the 100% point is a plain fine-tune run: identical data, original order
        subset = train if size == len(train) else [train[int(i)] for i in perm[:size]]
        model.restore(init_state)
        result = finetune(
            model,
            task,
            {"train": subset, "dev": splits["dev"], "test": splits["test"]},
            schedule=schedule,
            **finetune_kwargs,
        )
        report = result.report
        report.fraction = fraction
        reports.append(report)
    model.restore(init_state)
    return reports


@dataclass
class TransferMatrix:
    sources: tuple[str, ...]
    targets: tuple[str, ...]
    delta: dict
    specialized: dict
    baseline: dict

    def to_obj(self) -> dict:
        return {
            "sources": list(self.sources),
            "targets": list(self.targets),
            "delta": {s: dict(v) for s, v in self.delta.items()},
            "specialized": {s: dict(v) for s, v in self.specialized.items()},
            "baseline": dict(self.baseline),
        }


def cross_domain_matrix(
    specialized: dict,
    baseline: EncoderModel,
    task: str,
    splits_by_domain: dict,
    schedule: Optional[TrainSchedule] = None,
    **finetune_kwargs,
) -> TransferMatrix:
    """delta[source][target] = metric(source-specialized fine-tuned on target)
    minus metric(baseline fine-tuned on target)."""
    targets = tuple(sorted(splits_by_domain))
    sources = tuple(sorted(specialized))
    missing = [s for s in sources if specialized[s] is None]
    if missing:
        raise SchemaError(f"missing specialized checkpoints for: {', '.join(missing)}")
    base_init = baseline.snapshot()
    baseline_metric = {}
    for target in targets:
        baseline.restore(base_init)
        result = finetune(
            baseline, task, splits_by_domain[target], schedule=schedule, **finetune_kwargs
        )
        baseline_metric[target] = result.report.value
    baseline.restore(base_init)

    delta = {}
    spec_metric = {}
    for source in sources:
        source_model = specialized[source]
        source_init = source_model.snapshot()
        delta[source] = {}
        spec_metric[source] = {}
        for target in targets:
            source_model.restore(source_init)
            result = finetune(
                source_model, task, splits_by_domain[target], schedule=schedule, **finetune_kwargs
            )
            spec_metric[source][target] = result.report.value
            delta[source][target] = result.report.value - baseline_metric[target]
        source_model.restore(source_init)
    return TransferMatrix(
        sources=sources,
        targets=targets,
        delta=delta,
        specialized=spec_metric,
        baseline=baseline_metric,
    )


def select_multi_domain(dialogs: Sequence[Dialog], domains) -> list[Dialog]:
    """Dialogs whose domain set intersects the combination."""
    wanted = frozenset(domains)
    return [d for d in dialogs if d.domains & wanted]


def multi_domain_run(
    model: EncoderModel,
    domains: Sequence[str],
    variant: str,
    task: str,
    splits: dict,
    banks: Optional[Sequence] = None,
    triples_by_domain: Optional[dict] = None,
    specialize_schedule: Optional[TrainSchedule] = None,
    finetune_schedule: Optional[TrainSchedule] = None,
    freeze_base_downstream: bool = False,
    **finetune_kwargs,
) -> FinetuneResult:
    """Multi-domain specialization then fine-tuning.

    full_ft: binary response-selection specialization on the concatenated
    domain corpora, then full fine-tuning. stack / fuse: compose the given
    single-domain adapter banks (bank order = given domain order) and
    fine-tune the whole composed model. The frozen-base constraint belongs to
    the specialization stage that trained the banks; the downstream stage
    trains everything so the task head is not stuck with whatever geometry
    the specialization objective induced. freeze_base_downstream restores the
    restricted variant: only adapters (stack) or fusion weights (fuse), plus
    the task head, learn. Stale freeze flags on the incoming model or banks
    are cleared so each run is self-contained.
    """
    from .adapters import FusionWeights, freeze_base, inject
    from .objectives import TrainSchedule as TS
    from .objectives import specialize

    ensure(variant in ("full_ft", "stack", "fuse"), f"unknown variant {variant!r}")
    domains = tuple(domains)
    task_splits = {
        key: select_multi_domain(splits[key], domains) for key in ("train", "dev", "test")
    }
    for key, value in task_splits.items():
        ensure(len(value) > 0, f"no dialogs covering {'+'.join(domains)} in split {key!r}")

    if variant == "full_ft":
        ensure(triples_by_domain is not None, "full_ft needs per-domain triples")
        combined = []
        for d in domains:
            ensure(d in triples_by_domain, f"missing triples for domain {d!r}")
            combined.extend(triples_by_domain[d])
        for p in model.params.values():
            p.unfreeze()
        spec_schedule = specialize_schedule or TS()
        specialize(model, "rs_class", combined, spec_schedule)
        return finetune(model, task, task_splits, schedule=finetune_schedule, **finetune_kwargs)

    ensure(banks is not None and len(banks) == len(domains),
           "stack/fuse needs one adapter bank per domain")
    fusion = None
    if variant == "fuse":
        fusion = FusionWeights(model.config.layers, len(banks), dtype=model.config.np_dtype)
    composed = inject(model, list(banks), compose="single" if len(banks) == 1 else variant,
                      fusion=fusion)
    for p in composed.named_parameters().values():
        p.unfreeze()
    if freeze_base_downstream:
        freeze_base(composed)
        if variant == "fuse":
            for bank in banks:
                for p in bank.named_parameters().values():
                    p.freeze()
    return finetune(composed, task, task_splits, schedule=finetune_schedule, **finetune_kwargs)


# -- estimator facades


class StateTracker(BaseEstimator):
    """fit(dialogs) fine-tunes a state-tracking head (and optionally the
    encoder); predict(histories) returns per-turn slot-value maps."""

    def __init__(
        self,
        base: Optional[EncoderModel] = None,
        ontology: Optional[Ontology] = None,
        epochs: int = 300,
        batch_size: int = 6,
        lr: float = 5e-5,
        patience: int = 10,
        dev_fraction: float = 0.1,
        seed: int = 0,
        train_head_only: bool = False,
    ):
        self.base = base
        self.ontology = ontology
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.dev_fraction = dev_fraction
        self.seed = seed
        self.train_head_only = train_head_only

    def _splits(self, dialogs: Sequence[Dialog]) -> dict:
        dialogs = list(dialogs)
        ensure(len(dialogs) >= 3, "need at least three dialogs for train/dev/test")
        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(len(dialogs))
        n_dev = max(1, int(len(dialogs) * self.dev_fraction))
        dev = [dialogs[int(i)] for i in perm[:n_dev]]
        train = [dialogs[int(i)] for i in perm[n_dev:]]
        return {"train": train, "dev": dev, "test": dev}

    def fit(self, X, y=None):
        ensure(self.base is not None, "a base encoder model is required")
        ensure(self.ontology is not None, "an ontology is required")
        schedule = TrainSchedule(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            patience=self.patience, seed=self.seed,
        )
        result = finetune(
            self.base, "dst", self._splits(X), schedule=schedule,
            ontology=self.ontology, train_head_only=self.train_head_only,
        )
        self.model_ = result.model
        self.head_ = result.head
        self.report_ = result.report
        return self

    def predict(self, X):
        check_fitted(self, "model_")
        histories = [tuple(h) if not isinstance(h, str) else (h,) for h in X]
        return dst_forward(self.model_, self.head_, histories, self.ontology)

    def score(self, X, y):
        """Joint goal accuracy of predictions on histories X against gold y."""
        return joint_goal_accuracy(self.predict(X), y, self.ontology)


class ResponseRanker(BaseEstimator):
    """fit(dialogs) fine-tunes a response scorer; score_candidates ranks a
    candidate list for a context."""

    def __init__(
        self,
        base: Optional[EncoderModel] = None,
        epochs: int = 300,
        batch_size: int = 24,
        lr: float = 5e-5,
        patience: int = 10,
        dev_fraction: float = 0.1,
        pool_size: int = DEFAULT_POOL_SIZE,
        train_negatives: int = 7,
        scoring: str = DUAL_ENCODER_DOT,
        seed: int = 0,
    ):
        self.base = base
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.dev_fraction = dev_fraction
        self.pool_size = pool_size
        self.train_negatives = train_negatives
        self.scoring = scoring
        self.seed = seed

    def fit(self, X, y=None):
        ensure(self.base is not None, "a base encoder model is required")
        dialogs = list(X)
        ensure(len(dialogs) >= 3, "need at least three dialogs for train/dev/test")
        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(len(dialogs))
        n_dev = max(1, int(len(dialogs) * self.dev_fraction))
        dev = [dialogs[int(i)] for i in perm[:n_dev]]
        train = [dialogs[int(i)] for i in perm[n_dev:]]
        schedule = TrainSchedule(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            patience=self.patience, seed=self.seed,
        )
        result = finetune(
            self.base, "rr", {"train": train, "dev": dev, "test": dev},
            schedule=schedule, scoring=self.scoring, pool_size=self.pool_size,
            train_negatives=self.train_negatives,
        )
        self.model_ = result.model
        self.head_ = result.head
        self.report_ = result.report
        return self

    def score_candidates(self, context, candidates: Sequence[str]) -> np.ndarray:
        check_fitted(self, "model_")
        ensure(len(candidates) >= 1, "need at least one candidate to score")
        context = tuple(context) if not isinstance(context, str) else (context,)
        item = RRItem(dialog_id="", turn_index=0, context=context, response=candidates[0])
        history_cache = _HistoryCache(self.model_.vocab, self.model_.config.max_len)
        text_cache = TextEncodeCache(
            self.model_.vocab, self.model_.config.max_len, self.model_.config.per_segment_cap
        )
        scores = _rr_scores_for_pools(
            self.model_, self.head_, [item], [list(candidates)], history_cache, text_cache
        )
        return scores[0]
