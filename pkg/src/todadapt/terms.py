"""Salient-ngram mining: TF-IDF over {1,2,3}-grams of single-domain dialogs.

TF is the total occurrence count across all dialogs of the domain; IDF is the
raw ratio total_dialogs / dialogs_containing (no logarithm, no smoothing), a
literal inverse of the containment proportion. Ngram windows never cross
utterance boundaries: an ngram spanning two speakers is not a term.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .data import Dialog, filter_single_domain
from .tokenization import tokenize
from .validation import check_fitted, check_positive_int, ensure

MAX_NGRAM = 3

# British -> American token map: the -re/-er and -our/-or families plus
# theatre/theater, applied token-wise inside multi-token ngrams.
BRITISH_AMERICAN_VARIANTS: dict[str, str] = {
    "theatre": "theater",
    "centre": "center",
    "litre": "liter",
    "metre": "meter",
    "fibre": "fiber",
    "calibre": "caliber",
    "kilometre": "kilometer",
    "centimetre": "centimeter",
    "millimetre": "millimeter",
    "colour": "color",
    "flavour": "flavor",
    "favour": "favor",
    "favourite": "favorite",
    "neighbour": "neighbor",
    "neighbourhood": "neighborhood",
    "harbour": "harbor",
    "labour": "labor",
    "humour": "humor",
    "behaviour": "behavior",
    "armour": "armor",
    "honour": "honor",
    "rumour": "rumor",
}


@dataclass(frozen=True)
class ScoredNgram:
    tokens: tuple[str, ...]
    tf: int
    idf: float
    score: float

    def __post_init__(self):
        ensure(1 <= len(self.tokens) <= MAX_NGRAM, "ngram must have 1 to 3 tokens")
        ensure(self.idf >= 1.0, "idf is a ratio total/df and cannot be below 1")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class DomainTermSet:
    domain: str
    terms: tuple[str, ...]
    top_n: int
    excluded: tuple[str, ...] = ()
    variants_added: tuple[tuple[str, str], ...] = ()
    scores: Mapping[str, float] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        ensure(len(self.terms) == len(set(self.terms)), "terms must be unique")
        ensure(all(t == t.lower() for t in self.terms), "terms must be lowercased")
        ensure(not set(self.excluded) & set(self.terms), "excluded terms may not appear in terms")
        term_set = set(self.terms)
        for source, _variant in self.variants_added:
            ensure(source in term_set, f"variant source {source!r} missing from terms")

    def to_obj(self) -> dict:
        return {
            "domain": self.domain,
            "top_n": self.top_n,
            "terms": list(self.terms),
            "excluded": list(self.excluded),
            "variants_added": [list(p) for p in self.variants_added],
            "scores": dict(self.scores),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "DomainTermSet":
        return cls(
            domain=obj["domain"],
            terms=tuple(obj["terms"]),
            top_n=obj["top_n"],
            excluded=tuple(obj.get("excluded", ())),
            variants_added=tuple((s, v) for s, v in obj.get("variants_added", ())),
            scores=obj.get("scores", {}),
        )


def count_ngrams(dialogs: Sequence[Dialog]) -> dict[str, tuple[int, int]]:
    """Map ngram string -> (tf, dialog frequency) over {1,2,3}-gram windows.

    tf sums occurrences over every utterance of every dialog; df counts the
    dialogs containing the ngram at least once. Sharding dialogs and merging
    the per-shard counters would give identical results (both sums are
    commutative), so the output is independent of dialog order.
    """
    ensure(len(dialogs) > 0, "count_ngrams requires a non-empty dialog list")
    tf: Counter[str] = Counter()
    df: Counter[str] = Counter()
    for dialog in dialogs:
        in_dialog: set[str] = set()
        for turn in dialog.turns:
            tokens = tokenize(turn.text)
            for n in range(1, MAX_NGRAM + 1):
                for i in range(len(tokens) - n + 1):
                    gram = " ".join(tokens[i : i + n])
                    tf[gram] += 1
                    in_dialog.add(gram)
        df.update(in_dialog)
    return {gram: (tf[gram], df[gram]) for gram in tf}


def score_and_rank(counts: Mapping[str, tuple[int, int]], total_dialogs: int) -> list[ScoredNgram]:
    """Rank by tf * (total_dialogs / df) descending; ties by higher tf then text."""
    check_positive_int(total_dialogs, "total_dialogs")
    scored = []
    for gram, (tf, df) in counts.items():
        ensure(df >= 1, f"ngram {gram!r} has dialog frequency 0")
        ensure(df <= total_dialogs, f"ngram {gram!r} has df {df} > total {total_dialogs}")
        idf = total_dialogs / df
        scored.append(ScoredNgram(tokens=tuple(gram.split(" ")), tf=tf, idf=idf, score=tf * idf))
    scored.sort(key=lambda s: (-s.score, -s.tf, s.text))
    return scored


def expand_variants(term: str, variant_map: Mapping[str, str]) -> Optional[str]:
    """Token-wise spelling-variant replacement; None when nothing applies."""
    tokens = term.split(" ")
    replaced = [variant_map.get(t, t) for t in tokens]
    if replaced == tokens:
        return None
    return " ".join(replaced)


def curate(
    ranked: Sequence[ScoredNgram],
    top_n: int,
    exclusion: Sequence[str] = (),
    variant_map: Optional[Mapping[str, str]] = None,
    backfill: bool = True,
    domain: str = "",
) -> DomainTermSet:
    """Take the top_n ranked ngrams, drop excluded ones, append spelling variants.

    With backfill (the default) exclusions are replaced from rank top_n+1
    onward so the pre-variant term count stays exactly top_n when enough
    ngrams exist; otherwise the top_n window is simply filtered.
    """
    check_positive_int(top_n, "top_n")
    if variant_map is None:
        variant_map = BRITISH_AMERICAN_VARIANTS
    excluded_set = {e.lower() for e in exclusion}

    kept: list[str] = []
    hit_exclusions: list[str] = []
    scanned = 0
    for sn in ranked:
        scanned += 1
        if not backfill and scanned > top_n:
            break
        if len(kept) == top_n:
            break
        if sn.text in excluded_set:
            hit_exclusions.append(sn.text)
            continue
        kept.append(sn.text)

    warnings = []
    if len(kept) < top_n:
        warnings.append(f"only {len(kept)} terms available for top_n={top_n}")

    score_of = {sn.text: sn.score for sn in ranked}
    scores = {t: score_of[t] for t in kept}
    variants: list[tuple[str, str]] = []
    final = list(kept)
    present = set(final)
    for term in kept:
        variant = expand_variants(term, variant_map)
        if variant is not None and variant not in present and variant not in excluded_set:
            final.append(variant)
            present.add(variant)
            variants.append((term, variant))
            scores[variant] = score_of[term]

    return DomainTermSet(
        domain=domain,
        terms=tuple(final),
        top_n=top_n,
        excluded=tuple(dict.fromkeys(hit_exclusions)),
        variants_added=tuple(variants),
        scores=scores,
        warnings=tuple(warnings),
    )


def extract_terms(
    dialogs: Sequence[Dialog],
    domain: str,
    top_n: int = 80,
    exclusion: Sequence[str] = (),
    variant_map: Optional[Mapping[str, str]] = None,
    backfill: bool = True,
    single_domain_only: bool = True,
) -> DomainTermSet:
    """End-to-end mining: filter single-domain dialogs, count, rank, curate."""
    if single_domain_only:
        dialogs = filter_single_domain(dialogs, domain)
    ensure(len(dialogs) > 0, f"no single-domain dialogs for domain {domain!r}")
    counts = count_ngrams(dialogs)
    ranked = score_and_rank(counts, total_dialogs=len(dialogs))
    return curate(ranked, top_n, exclusion, variant_map, backfill, domain=domain)


class DomainTermMiner(BaseEstimator, TransformerMixin):
    """Estimator facade over the mining pipeline.

    fit() computes the ranked ngrams and curated term set for one domain;
    transform() maps raw texts to their matched-term lists.
    """

    def __init__(
        self,
        domain: str = "",
        top_n: int = 80,
        exclusion: tuple = (),
        variant_map=None,
        backfill: bool = True,
        single_domain_only: bool = True,
    ):
        self.domain = domain
        self.top_n = top_n
        self.exclusion = exclusion
        self.variant_map = variant_map
        self.backfill = backfill
        self.single_domain_only = single_domain_only

    def fit(self, X: Sequence[Dialog], y=None):
        dialogs = list(X)
        if self.single_domain_only:
            dialogs = filter_single_domain(dialogs, self.domain)
        ensure(len(dialogs) > 0, f"no single-domain dialogs for domain {self.domain!r}")
        counts = count_ngrams(dialogs)
        self.n_dialogs_ = len(dialogs)
        self.ranked_ = score_and_rank(counts, total_dialogs=self.n_dialogs_)
        self.term_set_ = curate(
            self.ranked_,
            self.top_n,
            self.exclusion,
            self.variant_map,
            self.backfill,
            domain=self.domain,
        )
        return self

    def transform(self, X: Sequence[str]) -> list[list[str]]:
        check_fitted(self, "term_set_")
        from .corpus import match_terms

        return [match_terms(text.lower(), self.term_set_) for text in X]
