"""Salient-term mining against a quadratic brute-force oracle."""

import numpy as np
import pytest

from todadapt.data import Dialog, Utterance
from todadapt.terms import (
    DomainTermMiner,
    DomainTermSet,
    ScoredNgram,
    count_ngrams,
    curate,
    expand_variants,
    extract_terms,
    score_and_rank,
)
from todadapt.tokenization import tokenize


def random_dialogs(rng, n_dialogs, alphabet=None, max_turns=4, max_words=8, domain="d"):
    """Random word-salad dialogs over a small alphabet (collisions intended)."""
    if alphabet is None:
        alphabet = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta"]
    dialogs = []
    for i in range(n_dialogs):
        turns = []
        for t in range(1 + int(rng.integers(max_turns))):
            words = [alphabet[int(rng.integers(len(alphabet)))] for _ in range(1 + int(rng.integers(max_words)))]
            turns.append(Utterance("user" if t % 2 == 0 else "system", " ".join(words)))
        dialogs.append(Dialog(id=f"{domain}-{i}", domains=frozenset([domain]), turns=tuple(turns)))
    return dialogs


def oracle_counts(dialogs):
    """Independent re-count: scan every window of every turn, no shared code."""
    tf = {}
    df = {}
    for dialog in dialogs:
        seen = set()
        for turn in dialog.turns:
            toks = tokenize(turn.text)
            for n in (1, 2, 3):
                for i in range(len(toks) - n + 1):
                    gram = " ".join(toks[i : i + n])
                    tf[gram] = tf.get(gram, 0) + 1
                    seen.add(gram)
        for gram in seen:
            df[gram] = df.get(gram, 0) + 1
    return tf, df


class TestCountOracle:
    def test_matches_brute_force_on_random_corpora(self):
        rng = np.random.default_rng(4021)
        for trial in range(20):
            dialogs = random_dialogs(rng, 1 + int(rng.integers(100)))
            counts = count_ngrams(dialogs)
            tf, df = oracle_counts(dialogs)
            assert set(counts) == set(tf)
            for gram, (got_tf, got_df) in counts.items():
                assert got_tf == tf[gram], gram
                assert got_df == df[gram], gram

    def test_scores_match_direct_ratio(self):
        rng = np.random.default_rng(77)
        dialogs = random_dialogs(rng, 60)
        counts = count_ngrams(dialogs)
        ranked = score_and_rank(counts, total_dialogs=len(dialogs))
        for sn in ranked:
            tf, df = counts[sn.text]
            expected = tf * (len(dialogs) / df)
            assert abs(sn.score - expected) <= 1e-12 * max(1.0, abs(expected))

    def test_order_invariant_to_dialog_order(self):
        rng = np.random.default_rng(9)
        dialogs = random_dialogs(rng, 40)
        shuffled = list(dialogs)
        rng.shuffle(shuffled)
        assert count_ngrams(dialogs) == count_ngrams(shuffled)


class TestRanking:
    def test_single_occurrence_scores_one(self):
        d = Dialog(id="x", domains=frozenset(["d"]), turns=(Utterance("user", "hello"),))
        ranked = score_and_rank(count_ngrams([d]), total_dialogs=1)
        assert len(ranked) == 1
        assert ranked[0].score == 1.0

    def test_direct_evaluation(self):
        ranked = score_and_rank({"a": (3, 2)}, total_dialogs=10)
        assert ranked[0].score == 15.0
        assert ranked[0].idf == 5.0

    def test_tie_break_higher_tf_then_lexicographic(self):
        # same score: tf=2/df=2 vs tf=1/df=1 at total=2 -> both score 2.0
        counts = {"bb": (2, 2), "aa": (1, 1), "ab": (1, 1)}
        ranked = score_and_rank(counts, total_dialogs=2)
        assert [s.text for s in ranked] == ["bb", "aa", "ab"]

    def test_df_above_total_rejected(self):
        with pytest.raises(ValueError):
            score_and_rank({"a": (1, 3)}, total_dialogs=2)

    def test_ranking_obeys_comparator_everywhere(self):
        rng = np.random.default_rng(123)
        dialogs = random_dialogs(rng, 80)
        ranked = score_and_rank(count_ngrams(dialogs), total_dialogs=80)
        for prev, nxt in zip(ranked, ranked[1:]):
            assert (-prev.score, -prev.tf, prev.text) <= (-nxt.score, -nxt.tf, nxt.text)


class TestCurate:
    def _ranked(self):
        # handmade descending list with distinct scores
        out = []
        for i, text in enumerate(["taxi", "train station", "fare", "theatre", "gate"]):
            out.append(
                ScoredNgram(tokens=tuple(text.split()), tf=10 - i, idf=2.0, score=2.0 * (10 - i))
            )
        return out

    def test_top_n_window(self):
        ts = curate(self._ranked(), top_n=3, variant_map={})
        assert ts.terms == ("taxi", "train station", "fare")

    def test_exclusion_backfills(self):
        ts = curate(self._ranked(), top_n=3, exclusion=["fare"], variant_map={})
        assert ts.terms == ("taxi", "train station", "theatre")
        assert ts.excluded == ("fare",)

    def test_exclusion_without_backfill_shrinks(self):
        ts = curate(self._ranked(), top_n=3, exclusion=["fare"], variant_map={}, backfill=False)
        assert ts.terms == ("taxi", "train station")

    def test_variants_appended_with_source_scores(self):
        ts = curate(self._ranked(), top_n=4, variant_map={"theatre": "theater"})
        assert ("theatre", "theater") in ts.variants_added
        assert ts.terms[-1] == "theater"
        assert ts.scores["theater"] == ts.scores["theatre"]

    def test_variant_inside_multiword_term(self):
        assert expand_variants("theatre square", {"theatre": "theater"}) == "theater square"
        assert expand_variants("taxi rank", {"theatre": "theater"}) is None

    def test_short_supply_warns(self):
        ts = curate(self._ranked()[:2], top_n=5, variant_map={})
        assert ts.warnings and "top_n=5" in ts.warnings[0]

    def test_round_trip(self):
        ts = curate(self._ranked(), top_n=3, exclusion=["fare"], variant_map={})
        again = DomainTermSet.from_obj(ts.to_obj())
        assert again.terms == ts.terms
        assert again.excluded == ts.excluded


class TestEndToEnd:
    def test_multi_domain_dialogs_are_skipped(self):
        single = Dialog(id="s", domains=frozenset(["a"]), turns=(Utterance("user", "taxi taxi"),))
        multi = Dialog(
            id="m", domains=frozenset(["a", "b"]), turns=(Utterance("user", "noise noise noise"),)
        )
        ts = extract_terms([single, multi], domain="a", top_n=2, variant_map={})
        assert "noise" not in ts.terms

    def test_estimator_facade_matches_function(self):
        rng = np.random.default_rng(5)
        dialogs = random_dialogs(rng, 30, domain="a")
        direct = extract_terms(dialogs, domain="a", top_n=10, variant_map={})
        miner = DomainTermMiner(domain="a", top_n=10, variant_map={})
        fitted = miner.fit(dialogs)
        assert fitted.term_set_.terms == direct.terms
