"""Corpus construction from raw dumps: flat in-domain sentences and
(context, response, false response) triples from comment threads, plus the
response-selection instance sampler.

Cleaning rules (fixed for bit-exact reproducibility): lowercase first, then
delete email tokens (contain "@" with a "." after it) and URL tokens (start
with http://, https://, or www.), then collapse whitespace. Lowercasing
before pattern removal is what makes cleaning idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .data import CorpusLine, DialogTriple, Thread
from .terms import DomainTermSet
from .tokenization import tokenize
from .validation import check_positive_int, ensure

DIALOGIC_MIN_CHARS = 10
FLAT_MIN_CHARS = 1


@dataclass
class CleaningReport:
    lines_in: int = 0
    lines_kept: int = 0
    emails_removed: int = 0
    urls_removed: int = 0
    too_short_dropped: int = 0

    def to_obj(self) -> dict:
        return {
            "lines_in": self.lines_in,
            "lines_kept": self.lines_kept,
            "emails_removed": self.emails_removed,
            "urls_removed": self.urls_removed,
            "too_short_dropped": self.too_short_dropped,
        }


@dataclass(frozen=True)
class RSInstance:
    context: str
    response: str
    label: str  # positive | hard_negative | easy_negative
    k_drawn: Optional[int] = None

    def __post_init__(self):
        ensure(
            self.label in ("positive", "hard_negative", "easy_negative"),
            f"unknown label {self.label!r}",
        )
        if self.k_drawn is not None:
            ensure(self.k_drawn in (1, 2, 3), f"k_drawn must be in {{1,2,3}}, got {self.k_drawn}")


@dataclass(frozen=True)
class NCEGroup:
    context: str
    responses: tuple[str, ...]
    true_index: int
    n_negatives: int

    def __post_init__(self):
        ensure(len(self.responses) == self.n_negatives + 1, "group size must be n_negatives + 1")
        ensure(0 <= self.true_index < len(self.responses), "true_index out of range")


@dataclass
class SamplingReport:
    triples_in: int = 0
    k_counts: dict = field(default_factory=lambda: {1: 0, 2: 0, 3: 0})
    with_replacement: int = 0


def _is_email_token(token: str) -> bool:
    at = token.find("@")
    return 0 <= at < len(token) and "." in token[at + 1 :]


def _is_url_token(token: str) -> bool:
    return token.startswith(("http://", "https://", "www."))


def clean_text(
    text: str, min_chars: int = DIALOGIC_MIN_CHARS, report: Optional[CleaningReport] = None
) -> Optional[str]:
    """Lowercase, strip email/URL tokens, collapse whitespace.

    Returns None when the cleaned text is shorter than min_chars (10 for
    dialogic data, 1 for flat data). Idempotent: clean(clean(x)) == clean(x).
    """
    if report is not None:
        report.lines_in += 1
    kept = []
    for token in text.lower().split():
        if _is_email_token(token):
            if report is not None:
                report.emails_removed += 1
            continue
        if _is_url_token(token):
            if report is not None:
                report.urls_removed += 1
            continue
        kept.append(token)
    cleaned = " ".join(kept)
    if len(cleaned) < min_chars:
        if report is not None:
            report.too_short_dropped += 1
        return None
    if report is not None:
        report.lines_kept += 1
    return cleaned


def match_terms(text: str, terms: DomainTermSet) -> list[str]:
    """Terms whose token sequence occurs contiguously in the tokenized text.

    Expects lowercased input; matches respect token boundaries ("taxidermy"
    does not match "taxi"). Distinct matches returned in term-set order.
    """
    tokens = tokenize(text)
    windows: set[tuple[str, ...]] = set()
    max_n = max((len(t.split(" ")) for t in terms.terms), default=0)
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            windows.add(tuple(tokens[i : i + n]))
    return [t for t in terms.terms if tuple(t.split(" ")) in windows]


def build_flat_corpus(
    lines: Iterable[str],
    terms: DomainTermSet,
    target: int,
    report: Optional[CleaningReport] = None,
) -> Iterator[CorpusLine]:
    """Emit the first `target` cleaned lines containing at least one term.

    Deterministic: input order, no sampling. The caller sees fewer than
    `target` lines when the stream is exhausted (warn via the report by
    comparing lines_kept to target). Output is invariant to how the input
    stream is chunked since lines are processed one at a time.
    """
    check_positive_int(target, "target")
    emitted = 0
    for raw in lines:
        if emitted >= target:
            break
        cleaned = clean_text(raw, min_chars=FLAT_MIN_CHARS, report=report)
        if cleaned is None:
            continue
        matched = match_terms(cleaned, terms)
        if not matched:
            continue
        emitted += 1
        yield CorpusLine(text=cleaned, matched_terms=tuple(matched))


def build_thread_triples(
    threads: Sequence[Thread],
    terms: DomainTermSet,
    domain: str,
    rng_seed: int,
    report: Optional[CleaningReport] = None,
) -> tuple[list[DialogTriple], int]:
    """Mine (context, immediate child) pairs into triples with a false response.

    A pair qualifies when context or response matches at least one term and
    both survive dialogic cleaning. The false response is drawn uniformly
    (seeded) from cleaned same-thread comments that are neither the context
    nor any immediate child of the context; pairs with no candidate are
    dropped and counted. Returns (triples, dropped_pair_count).
    """
    rng = np.random.default_rng(rng_seed)
    triples: list[DialogTriple] = []
    dropped = 0
    for thread in threads:
        cleaned: dict[str, Optional[str]] = {
            c.id: clean_text(c.body, min_chars=DIALOGIC_MIN_CHARS, report=report)
            for c in thread.comments
        }
        for parent in thread.comments:
            ctx = cleaned[parent.id]
            if ctx is None:
                continue
            child_ids = thread.children_of(parent.id)
            excluded = {parent.id} | set(child_ids)
            candidates = [
                cid
                for cid in (c.id for c in thread.comments)
                if cid not in excluded and cleaned[cid] is not None
            ]
            for child_id in child_ids:
                resp = cleaned[child_id]
                if resp is None:
                    continue
                if not (match_terms(ctx, terms) or match_terms(resp, terms)):
                    continue
                usable = [cid for cid in candidates if cleaned[cid] != resp]
                if not usable:
                    dropped += 1
                    continue
                false_id = usable[int(rng.integers(len(usable)))]
                triples.append(
                    DialogTriple(
                        context=ctx,
                        response=resp,
                        false_response=cleaned[false_id],
                        domain=domain,
                        subreddit=parent.subreddit,
                        thread_id=thread.root_id,
                    )
                )
    return triples, dropped


def sample_rs_instances(
    triples: Sequence[DialogTriple],
    rng_seed: int,
) -> tuple[list[list[RSInstance]], SamplingReport]:
    """Per triple: 1 positive, 1 hard negative, k easy negatives, k ~ U{1,2,3}.

    Easy negatives are true responses of other triples from different
    threads, drawn uniformly without replacement; when fewer than k
    candidates exist the draw falls back to with-replacement and the report
    flags it. The pool is indexed by thread id; a triple without thread_id
    falls back to excluding candidates with identical context text.
    """
    rng = np.random.default_rng(rng_seed)
    report = SamplingReport(triples_in=len(triples))
    pool = [(t.domain, t.thread_id, t.context, t.response) for t in triples]
    out: list[list[RSInstance]] = []
    for triple in triples:
        k = int(rng.integers(1, 4))
        report.k_counts[k] += 1
        if triple.thread_id is not None:
            candidate_idx = [
                i
                for i, (dom, tid, _, _) in enumerate(pool)
                if dom == triple.domain and tid != triple.thread_id
            ]
        else:
            candidate_idx = [
                i
                for i, (dom, _, ctx, _) in enumerate(pool)
                if dom == triple.domain and ctx != triple.context
            ]
        replace = len(candidate_idx) < k
        if replace:
            report.with_replacement += 1
        ensure(len(candidate_idx) > 0, "easy-negative pool is empty for a triple")
        chosen = rng.choice(len(candidate_idx), size=k, replace=replace)
        instances = [
            RSInstance(context=triple.context, response=triple.response, label="positive", k_drawn=k),
            RSInstance(
                context=triple.context,
                response=triple.false_response,
                label="hard_negative",
                k_drawn=k,
            ),
        ]
        for j in chosen:
            instances.append(
                RSInstance(
                    context=triple.context,
                    response=pool[candidate_idx[int(j)]][3],
                    label="easy_negative",
                    k_drawn=k,
                )
            )
        out.append(instances)
    return out, report


def group_for_nce(instances: Sequence[RSInstance], rng: np.random.Generator) -> NCEGroup:
    """Shuffle one triple's instances into an NCE group with a seeded permutation."""
    ensure(len(instances) >= 2, "an NCE group needs a positive and at least one negative")
    labels = [i.label for i in instances]
    ensure(labels.count("positive") == 1, "exactly one positive per group")
    perm = rng.permutation(len(instances))
    responses = tuple(instances[int(p)].response for p in perm)
    true_index = int(np.where(perm == labels.index("positive"))[0][0])
    return NCEGroup(
        context=instances[0].context,
        responses=responses,
        true_index=true_index,
        n_negatives=len(instances) - 1,
    )


def build_nce_groups(
    per_triple_instances: Sequence[Sequence[RSInstance]], rng_seed: int
) -> list[NCEGroup]:
    rng = np.random.default_rng(rng_seed)
    return [group_for_nce(instances, rng) for instances in per_triple_instances]
