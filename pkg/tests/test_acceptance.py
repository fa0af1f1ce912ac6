"""Acceptance gate. Each numbered test checks one release criterion at its
stated tolerance and registers a one-line verdict for the run summary.

Criteria 1-7 are oracle and algebra checks; 8-10 are seeded directional
training experiments on the synthetic two-domain world; 11 only runs when
TODADAPT_MULTIWOZ points at an extracted MultiWOZ 2.1 distribution.
"""

import math
import os
import re
import time

import numpy as np
import pytest

import todadapt.objectives as obj
from conftest import crafted_dump, dump_terms, record_criterion
from todadapt import autograd as ag
from todadapt.adapters import (
    AdapterComposition,
    FusionWeights,
    adapter_forward,
    adapter_trainable_count,
    freeze_base,
    init_adapter_bank,
    inject,
)
from todadapt.corpus import NCEGroup, build_flat_corpus, clean_text, sample_rs_instances
from todadapt.data import Dialog, DialogTriple, Ontology, Utterance
from todadapt.downstream import (
    DUAL_ENCODER_DOT,
    ScoringHead,
    few_shot_sizes,
    joint_goal_accuracy,
    rr_rank,
)
from todadapt.data import SlotValue
from todadapt.downstream import TurnPrediction
from todadapt.encoder import EncoderConfig, EncoderModel, encode_batch, parameter_count
from todadapt.gradcheck import GROUPS, run_gradcheck
from todadapt.optim import AdamState, adam_step
from todadapt.terms import count_ngrams, extract_terms, score_and_rank
from todadapt.tokenization import build_vocab

SEEDS = (0, 1, 2)


# -- criterion 1: tf-idf vs a quadratic brute-force oracle


_ORACLE_TOKEN = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*")


def oracle_ngram_counts(dialogs):
    tf: dict[str, int] = {}
    df: dict[str, int] = {}
    for dialog in dialogs:
        seen = set()
        for turn in dialog.turns:
            tokens = _ORACLE_TOKEN.findall(turn.text.lower())
            for n in (1, 2, 3):
                for i in range(len(tokens) - n + 1):
                    gram = " ".join(tokens[i : i + n])
                    tf[gram] = tf.get(gram, 0) + 1
                    seen.add(gram)
        for gram in seen:
            df[gram] = df.get(gram, 0) + 1
    return {g: (tf[g], df[g]) for g in tf}


def random_corpus(rng):
    pool = "taxi ride book fare train station to the a now please stop".split()
    dialogs = []
    for i in range(1 + int(rng.integers(100))):
        turns = []
        for t in range(1 + int(rng.integers(6))):
            words = rng.choice(pool, size=3 + int(rng.integers(8)))
            turns.append(
                Utterance("user" if t % 2 == 0 else "system", " ".join(words))
            )
        dialogs.append(Dialog(id=f"r{i}", domains=frozenset({"transport"}), turns=tuple(turns)))
    return dialogs


def test_criterion_01_tfidf_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        dialogs = random_corpus(rng)
        counts = count_ngrams(dialogs)
        expected = oracle_ngram_counts(dialogs)
        assert counts == expected

        ranked = score_and_rank(counts, len(dialogs))
        oracle = []
        for gram, (tf, df) in expected.items():
            oracle.append((gram, tf, tf * (len(dialogs) / df)))
        oracle.sort(key=lambda row: (-row[2], -row[1], row[0]))
        assert [s.text for s in ranked] == [row[0] for row in oracle]
        for s, (_, _, score) in zip(ranked, oracle):
            rel = abs(s.score - score) / max(abs(score), 1e-300)
            worst = max(worst, rel)
            assert rel <= 1e-12
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    record_criterion(1, f"20 corpora, worst score rel err {worst:.1e}, {elapsed:.1f}s")


# -- criterion 2: corpus filter vs a full-scan oracle


def oracle_clean(line):
    kept = []
    for token in line.lower().split():
        at = token.find("@")
        if at >= 0 and "." in token[at + 1 :]:
            continue
        if token.startswith(("http://", "https://", "www.")):
            continue
        kept.append(token)
    return " ".join(kept)


def oracle_keeps(lines, terms):
    out = []
    for line in lines:
        cleaned = oracle_clean(line)
        if not cleaned:
            continue
        tokens = _ORACLE_TOKEN.findall(cleaned)
        hit = False
        for term in terms.terms:
            seq = term.split(" ")
            for i in range(len(tokens) - len(seq) + 1):
                if tokens[i : i + len(seq)] == seq:
                    hit = True
                    break
            if hit:
                break
        if hit:
            out.append(cleaned)
    return out


def test_criterion_02_corpus_filter_oracle():
    lines = crafted_dump(1000)
    terms = dump_terms()
    kept = list(build_flat_corpus(lines, terms, target=10_000))
    expected = oracle_keeps(lines, terms)
    assert [c.text for c in kept] == expected

    for line in lines:
        once = clean_text(line, min_chars=1)
        if once is None:
            assert oracle_clean(line) == ""
            continue
        assert clean_text(once, min_chars=1) == once
    record_criterion(2, f"{len(kept)} of 1000 lines kept, oracle-identical, cleaning idempotent")


# -- criterion 3: easy-negative count statistics and thread exclusion


def test_criterion_03_negative_sampling():
    n = 10_000
    triples = [
        DialogTriple(
            context=f"ctx {i}",
            response=f"resp {i}",
            false_response=f"alt {i}",
            domain="transport",
            subreddit="transport",
            thread_id=f"t{i // 2}",  # two triples per thread: exclusion must skip siblings
        )
        for i in range(n)
    ]
    instances, report = sample_rs_instances(triples, rng_seed=0)

    sigma = math.sqrt((1 / 3) * (2 / 3) / n)
    freqs = []
    for k in (1, 2, 3):
        freq = report.k_counts[k] / n
        freqs.append(freq)
        assert abs(freq - 1 / 3) <= 3 * sigma

    shared = 0
    for i, group in enumerate(instances):
        for inst in group:
            if inst.label != "easy_negative":
                continue
            source = int(inst.response.split()[1])
            if source // 2 == i // 2:
                shared += 1
    assert shared == 0
    assert report.with_replacement == 0
    record_criterion(
        3,
        "k freqs "
        + "/".join(f"{f:.4f}" for f in freqs)
        + f" vs 1/3 within 3 sigma ({3 * sigma:.4f}), 0 easy negatives share a thread",
    )


# -- criterion 4: contrastive loss equals the direct softmax equation


def fake_scores(vector):
    arr = np.asarray(vector, dtype=np.float64)

    def fake(model, head, pairs, cache=None, train=False, rng=None):
        assert len(pairs) == len(arr)
        return ag.as_tensor(arr)

    return fake


def group_of(n, true_index):
    return NCEGroup(
        context="c",
        responses=tuple(f"r{j}" for j in range(n)),
        true_index=true_index,
        n_negatives=n - 1,
    )


def test_criterion_04_nce_equation(monkeypatch):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        n = 2 + int(rng.integers(10))
        scores = rng.normal(scale=3.0, size=n)
        true_index = int(rng.integers(n))
        monkeypatch.setattr(obj, "pair_scores", fake_scores(scores))
        _, value = obj.rs_contrast_loss(None, None, [group_of(n, true_index)])
        direct = math.log(np.exp(scores).sum()) - scores[true_index]
        worst = max(worst, abs(value.loss - direct))
        assert abs(value.loss - direct) <= 1e-9

    for n in (2, 4, 8, 16, 33):
        monkeypatch.setattr(obj, "pair_scores", fake_scores(np.full(n, 0.7)))
        _, value = obj.rs_contrast_loss(None, None, [group_of(n, 0)])
        assert abs(value.loss - math.log(n)) <= 1e-12

    base = rng.normal(size=7)
    monkeypatch.setattr(obj, "pair_scores", fake_scores(base))
    _, ref = obj.rs_contrast_loss(None, None, [group_of(7, 2)])
    for shift in (-50.0, -3.2, 0.1, 7.0, 123.0):
        monkeypatch.setattr(obj, "pair_scores", fake_scores(base + shift))
        _, shifted = obj.rs_contrast_loss(None, None, [group_of(7, 2)])
        assert abs(shifted.loss - ref.loss) <= 1e-9
    record_criterion(4, f"1000 vectors, worst |loss - direct| {worst:.1e}; ln(N+1) and shift checks hold")


# -- criterion 5: finite-difference gradient checks, all parameter groups


def test_criterion_05_grad_check():
    t0 = time.perf_counter()
    reports = run_gradcheck(GROUPS, tolerance=1e-4, seed=0)
    elapsed = time.perf_counter() - t0
    assert [r.group for r in reports] == list(GROUPS)
    worst = max(r.max_rel_err for r in reports)
    for r in reports:
        assert r.passed, f"{r.group}: max rel err {r.max_rel_err:.3e}"
        assert r.max_rel_err < 1e-4
    assert elapsed < 120.0
    record_criterion(5, f"{len(reports)} groups, worst rel err {worst:.1e}, {elapsed:.0f}s")


# -- criterion 6: adapter algebra


def nonzero_bank(layers, hidden, bottleneck, seed):
    bank = init_adapter_bank(layers, hidden, bottleneck, seed=seed, domain=f"b{seed}")
    rng = np.random.default_rng(seed + 5000)
    for name, p in bank.named_parameters().items():
        if "up" in name:
            p.data = rng.normal(scale=0.3, size=p.data.shape)
    return bank


def tiny_model(layers=2, hidden=16, seed=0):
    vocab = build_vocab(["alpha beta gamma delta epsilon zeta eta theta"])
    cfg = EncoderConfig(
        layers=layers, hidden=hidden, heads=2, ffn=32, max_len=8,
        vocab_size=len(vocab), dropout=0.0, dtype="float64",
    )
    return EncoderModel.init(cfg, vocab, seed=seed)


def test_criterion_06_adapter_algebra():
    model = tiny_model()
    batch = encode_batch(
        [("alpha beta gamma", None), ("delta epsilon", None)], model.vocab, max_len=8
    )

    hidden0, pooled0 = model.forward(batch)
    fresh = init_adapter_bank(2, 16, 4, seed=9, domain="d")
    composed = inject(model, [fresh], "single")
    hidden1, pooled1 = composed.forward(batch)
    assert np.array_equal(hidden0.data, hidden1.data)
    assert np.array_equal(pooled0.data, pooled1.data)

    active = nonzero_bank(1, 16, 4, seed=3)
    zero = init_adapter_bank(1, 16, 4, seed=11, domain="z")
    rng = np.random.default_rng(6)
    h = ag.as_tensor(rng.normal(size=(3, 16)))
    r = ag.as_tensor(rng.normal(size=(3, 16)))
    stacked = AdapterComposition([active, zero], mode="stack").compose(0, h, r)
    alone = adapter_forward(active, 0, h, r)
    assert np.array_equal(stacked.data, alone.data)

    b1 = nonzero_bank(1, 16, 4, seed=3)
    b2 = nonzero_bank(1, 16, 4, seed=7)
    fusion = FusionWeights(1, 2, dtype=np.float64)
    fusion.params["layer0.logits"].data = np.array([40.0, 0.0])
    fused = AdapterComposition([b1, b2], mode="fuse", fusion=fusion).compose(0, h, r)
    np.testing.assert_allclose(
        fused.data, adapter_forward(b1, 0, h, r).data, atol=1e-6
    )

    uniform = FusionWeights(1, 2, dtype=np.float64)
    fused = AdapterComposition([b1, b2], mode="fuse", fusion=uniform).compose(0, h, r)
    mean = 0.5 * (adapter_forward(b1, 0, h, r).data + adapter_forward(b2, 0, h, r).data)
    np.testing.assert_allclose(fused.data, mean, atol=1e-9)

    # frozen base must not move over 100 adapter-training steps
    train_model = tiny_model(seed=1)
    bank = nonzero_bank(2, 16, 4, seed=21)
    trained = freeze_base(inject(train_model, [bank], "single"))
    before = {k: p.data.copy() for k, p in trained.named_parameters().items() if p.trainable is False}
    opt = AdamState(lr=1e-2)
    trainables = trained.trainable_parameters()
    for _ in range(100):
        ag.zero_grads(trainables)
        _, pooled = trained.forward(batch, train=False)
        loss = ag.sum_(ag.mul(pooled, pooled))
        ag.backward(loss)
        adam_step(opt, trainables)
    after = {k: p.data for k, p in trained.named_parameters().items() if p.trainable is False}
    assert before.keys() == after.keys() and len(before) > 0
    for k in before:
        assert np.array_equal(before[k], after[k]), k
    moved = [
        k for k, p in bank.named_parameters().items()
        if not np.array_equal(p.data, init_adapter_bank(2, 16, 4, seed=21, domain="x").named_parameters()[k].data)
    ]
    assert moved

    ratios = []
    for layers, hidden, bottleneck in ((2, 16, 4), (2, 64, 8), (3, 32, 4)):
        formula = layers * (2 * bottleneck * hidden + bottleneck + hidden)
        bank = init_adapter_bank(layers, hidden, bottleneck, seed=2, domain="c")
        actual = sum(p.data.size for p in bank.named_parameters().values())
        assert actual == formula == adapter_trainable_count(layers, hidden, bottleneck)
        cfg = EncoderConfig(
            layers=layers, hidden=hidden, heads=2, ffn=4 * hidden, max_len=8,
            vocab_size=32, dropout=0.0,
        )
        ratios.append((parameter_count(cfg) / formula, hidden / bottleneck))
    detail = ", ".join(f"full/adapter {fa:.1f} at h/m {hm:.0f}" for fa, hm in ratios)
    record_criterion(6, f"identity/stack/fusion/freeze exact at tolerance; {detail}")


# -- criterion 7: metric correctness on hand-enumerated cases


ONTO = Ontology(
    {
        ("taxi", "destination"): ("airport", "museum"),
        ("taxi", "departure"): ("hotel", "station"),
        ("hotel", "area"): ("north", "south"),
    }
)


def pred(dest="none", dep="none", area="none"):
    return TurnPrediction(
        values={
            ("taxi", "destination"): dest,
            ("taxi", "departure"): dep,
            ("hotel", "area"): area,
        }
    )


def gold(**kv):
    out = []
    if "dest" in kv:
        out.append(SlotValue("taxi", "destination", kv["dest"]))
    if "dep" in kv:
        out.append(SlotValue("taxi", "departure", kv["dep"]))
    if "area" in kv:
        out.append(SlotValue("hotel", "area", kv["area"]))
    return tuple(out)


def test_criterion_07_metric_correctness():
    jga_cases = [
        ([pred()], [gold()], 1.0),  # all-none counts as correct
        ([pred(dest="airport")], [gold(dest="airport")], 1.0),
        ([pred(dest="airport")], [gold(dest="museum")], 0.0),
        ([pred(dest="airport")], [gold()], 0.0),
        ([pred()], [gold(dest="airport")], 0.0),
        (
            [pred(dest="airport", dep="hotel", area="north")],
            [gold(dest="airport", dep="hotel", area="north")],
            1.0,
        ),
        (
            [pred(dest="airport", dep="hotel")],
            [gold(dest="airport", dep="station")],
            0.0,
        ),
        ([pred(dest="AIRPORT ")], [gold(dest="airport")], 1.0),  # normalization
        (
            [pred(dest="airport"), pred(dest="airport", dep="hotel")],
            [gold(dest="airport"), gold(dest="airport", dep="hotel")],
            1.0,
        ),
        (
            [pred(), pred(dest="airport"), pred(dest="museum"), pred()],
            [gold(), gold(dest="airport"), gold(dest="airport"), gold(area="north")],
            0.5,
        ),
        (
            [pred(dest="airport", dep="hotel"), pred(dest="airport", dep="station")],
            [gold(dest="airport", dep="hotel"), gold(dest="museum", dep="station")],
            0.5,  # turn 1 fully right, turn 2 one slot wrong
        ),
        (
            [pred(area="north"), pred(area="south"), pred(), pred(area="north")],
            [gold(area="north"), gold(area="north"), gold(), gold(area="south")],
            0.5,
        ),
    ]
    for i, (predicted, annotated, expected) in enumerate(jga_cases):
        got = joint_goal_accuracy(predicted, annotated, ONTO)
        assert got == expected, f"jga case {i}: {got} != {expected}"

    rank_cases = [
        ([3.0, 1.0, 2.0], 0, 1),
        ([3.0, 1.0, 2.0], 1, 3),
        ([3.0, 1.0, 2.0], 2, 2),
        ([1.0, 1.0, 1.0], 0, 3),  # full tie: pessimistic rank
        ([1.0, 1.0, 1.0], 2, 3),
        ([2.0, 2.0, 1.0], 0, 2),
        ([1.0, 2.0, 2.0, 0.5], 1, 2),
        ([4.0, 2.0, 2.0, 5.0], 1, 4),
        ([0.0], 0, 1),
        ([-1.0, -2.0], 1, 2),
        ([5.0, 5.0, 5.0, 5.0, 5.0], 4, 5),
        ([1.0, 0.0, 1.0, 0.0], 0, 2),
    ]
    for i, (scores, true_index, expected) in enumerate(rank_cases):
        got = obj.pessimistic_rank(np.array(scores), true_index)
        assert got == expected, f"rank case {i}: {got} != {expected}"
        assert rr_rank(scores, true_index) == expected
    record_criterion(
        7, f"{len(jga_cases)} JGA and {len(rank_cases)} rank cases exact; half-right two-turn case = 0.5"
    )


# -- criterion 11: MultiWOZ 2.1 integration (conditional)


REFERENCE_TAXI_TERMS = frozenset(
    """taxi, contact number, book a taxi, booked, time schedule, pickup, leaving,
    booked type, booking completed, departing, destination, cab, completed booked,
    honda, ford, audi, lexus, toyota, departure, skoda, lexus contact,
    toyota contact, ford contact, volvo, train station, departure site, tesla,
    audi contact, honda contact, skoda contact, picking, volkswagen""".replace("\n", " ").split(", ")
)


def test_criterion_11_multiwoz_integration():
    root = os.environ.get("TODADAPT_MULTIWOZ")
    if not root:
        pytest.skip("TODADAPT_MULTIWOZ not set; place an extracted MultiWOZ 2.1 there to enable")
    from todadapt.data import convert_multiwoz, filter_single_domain

    splits = convert_multiwoz(root)
    taxi = {
        name: [d for d in dialogs if "taxi" in d.domains]
        for name, dialogs in splits.items()
    }
    assert [len(taxi[k]) for k in ("train", "dev", "test")] == [1654, 207, 195]
    single = {name: filter_single_domain(part, "taxi") for name, part in taxi.items()}
    assert [len(single[k]) for k in ("train", "dev", "test")] == [325, 57, 52]
    assert few_shot_sizes(1654, [0.05]) == [83]

    mined = extract_terms(splits["train"], domain="taxi", top_n=80)
    overlap = {t for t in mined.terms} & {t.strip() for t in REFERENCE_TAXI_TERMS}
    record_criterion(
        11,
        f"taxi splits 1654/207/195, single-domain 325/57/52, 5% = 83; "
        f"top-80 overlap with the reference list: {len(overlap)} terms (informational)",
    )
