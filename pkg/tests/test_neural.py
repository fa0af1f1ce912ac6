"""Encoder internals: encoding layout, a hand-unrolled forward oracle, mask
invariances, dynamic masking statistics, optimizer math, checkpoint fidelity."""

import math

import numpy as np
import pytest

import todadapt.autograd as ag
from todadapt.autograd import Parameter, backward
from todadapt.encoder import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    EncodedBatch,
    EncoderConfig,
    EncoderModel,
    encode_batch,
    encode_history,
    encode_pair,
    mask_tokens,
    parameter_count,
)
from todadapt.objectives import IGNORE_LABEL
from todadapt.optim import AdamState, adam_step
from todadapt.checkpoint import load_encoder, save_encoder
from todadapt.tokenization import Vocab, build_vocab


def tiny_vocab():
    return build_vocab(["alpha beta gamma delta epsilon zeta"])


def tiny_model(max_len=6, seed=0, layers=1, hidden=4, heads=2, ffn=8):
    vocab = tiny_vocab()
    cfg = EncoderConfig(
        layers=layers,
        hidden=hidden,
        heads=heads,
        ffn=ffn,
        max_len=max_len,
        vocab_size=len(vocab),
        dropout=0.0,
        dtype="float64",
    )
    return EncoderModel.init(cfg, vocab, seed=seed), vocab


class TestEncoding:
    def test_single_segment_layout(self):
        vocab = tiny_vocab()
        ids, segs, mask = encode_pair("alpha", None, vocab, max_len=8)
        assert ids == [CLS_ID, vocab.id_of("alpha"), SEP_ID] + [PAD_ID] * 5
        assert mask == [1, 1, 1, 0, 0, 0, 0, 0]
        assert segs == [0] * 8

    def test_pair_layout_and_segments(self):
        vocab = tiny_vocab()
        ids, segs, mask = encode_pair("alpha beta", "gamma", vocab, max_len=10)
        a, b, g = (vocab.id_of(w) for w in ("alpha", "beta", "gamma"))
        assert ids[:7] == [CLS_ID, a, b, SEP_ID, g, SEP_ID, PAD_ID]
        assert segs[:6] == [0, 0, 0, 0, 1, 1]
        assert sum(mask) == 6

    def test_per_segment_cap_truncates_tail(self):
        vocab = tiny_vocab()
        ids, _, _ = encode_pair("alpha beta gamma delta", None, vocab, max_len=12, per_segment_cap=2)
        assert ids[:4] == [CLS_ID, vocab.id_of("alpha"), vocab.id_of("beta"), SEP_ID]

    def test_history_front_truncation_keeps_tail(self):
        vocab = tiny_vocab()
        full_ids, _, _ = encode_history(["alpha beta", "gamma delta"], vocab, max_len=16)
        cut_ids, _, cut_mask = encode_history(["alpha beta", "gamma delta"], vocab, max_len=5)
        assert cut_ids[0] == CLS_ID
        # the last max_len - 1 stream tokens survive
        kept = [i for i in full_ids[1:] if i != PAD_ID][-4:]
        assert cut_ids[1:] == kept
        assert sum(cut_mask) == 5

    def test_unknown_words_map_to_unk(self):
        vocab = tiny_vocab()
        ids, _, _ = encode_pair("quux", None, vocab, max_len=5)
        assert ids[1] == vocab.id_of("quux") == 1  # UNK


def oracle_forward(model, batch):
    """Re-derive the forward pass with raw numpy, shadowing every layer op."""
    cfg = model.config
    P = {k: p.data for k, p in model.params.items()}
    B, T = batch.ids.shape
    GELU_A, GELU_C = 0.044715, math.sqrt(2.0 / math.pi)

    def layer_norm(x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
        return gamma * (xc * inv) + beta

    x = P["emb.token"][batch.ids] + P["emb.position"][np.arange(T)] + P["emb.segment"][batch.segments]
    bias = np.where(batch.mask[:, None, None, :] == 1, 0.0, -1e9)
    nh, dh = cfg.heads, cfg.hidden // cfg.heads
    for i in range(cfg.layers):
        q = (x @ P[f"layer{i}.attn.wq"] + P[f"layer{i}.attn.bq"]).reshape(B, T, nh, dh).swapaxes(1, 2)
        k = (x @ P[f"layer{i}.attn.wk"] + P[f"layer{i}.attn.bk"]).reshape(B, T, nh, dh).swapaxes(1, 2)
        v = (x @ P[f"layer{i}.attn.wv"] + P[f"layer{i}.attn.bv"]).reshape(B, T, nh, dh).swapaxes(1, 2)
        scores = q @ k.swapaxes(-1, -2) / math.sqrt(dh) + bias
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = (probs @ v).swapaxes(1, 2).reshape(B, T, cfg.hidden)
        attn = ctx @ P[f"layer{i}.attn.wo"] + P[f"layer{i}.attn.bo"]
        a = layer_norm(x + attn, P[f"layer{i}.ln1.gamma"], P[f"layer{i}.ln1.beta"])
        z = a @ P[f"layer{i}.ffn.w1"] + P[f"layer{i}.ffn.b1"]
        g = 0.5 * z * (1.0 + np.tanh(GELU_C * (z + GELU_A * z**3)))
        f = g @ P[f"layer{i}.ffn.w2"] + P[f"layer{i}.ffn.b2"]
        x = layer_norm(a + f, P[f"layer{i}.ln2.gamma"], P[f"layer{i}.ln2.beta"])
    w = batch.mask / batch.mask.sum(axis=1, keepdims=True)
    summary = (x * w[:, :, None]).sum(axis=1)
    pooled = np.tanh(summary @ P["pool.w"] + P["pool.b"])
    return x, pooled


class TestForwardOracle:
    def test_matches_hand_unrolled_numpy(self):
        model, vocab = tiny_model(max_len=6, layers=2)
        batch = encode_batch(
            [("alpha beta", None), ("gamma delta epsilon", None), ("zeta", "alpha")],
            vocab,
            max_len=6,
        )
        hidden, pooled = model.forward(batch)
        want_h, want_p = oracle_forward(model, batch)
        np.testing.assert_allclose(hidden.data, want_h, atol=1e-10)
        np.testing.assert_allclose(pooled.data, want_p, atol=1e-10)

    def test_randomized_batches(self):
        rng = np.random.default_rng(33)
        model, vocab = tiny_model(max_len=8, seed=5)
        words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
        for _ in range(10):
            texts = []
            for _ in range(4):
                n = 1 + int(rng.integers(5))
                texts.append((" ".join(words[int(rng.integers(6))] for _ in range(n)), None))
            batch = encode_batch(texts, vocab, max_len=8)
            hidden, pooled = model.forward(batch)
            want_h, want_p = oracle_forward(model, batch)
            np.testing.assert_allclose(hidden.data, want_h, atol=1e-10)
            np.testing.assert_allclose(pooled.data, want_p, atol=1e-10)


class TestMaskInvariance:
    def test_extra_padding_never_changes_outputs(self):
        vocab = tiny_vocab()
        cfg = dict(layers=2, heads=2, ffn=8, vocab_size=len(vocab), dropout=0.0, dtype="float64")
        short = EncoderConfig(hidden=4, max_len=6, **cfg)
        long = EncoderConfig(hidden=4, max_len=12, **cfg)
        m_short = EncoderModel.init(short, vocab, seed=3)
        m_long = EncoderModel.init(long, vocab, seed=3)
        # same weights except the position table, whose extra rows sit under PAD
        m_long.params["emb.position"].data[:6] = m_short.params["emb.position"].data
        for name, p in m_short.params.items():
            if name != "emb.position":
                m_long.params[name].data = p.data.copy()
        b_short = encode_batch([("alpha beta gamma", None)], vocab, max_len=6)
        b_long = encode_batch([("alpha beta gamma", None)], vocab, max_len=12)
        h_short, p_short = m_short.forward(b_short)
        h_long, p_long = m_long.forward(b_long)
        np.testing.assert_allclose(p_long.data, p_short.data, atol=1e-6)
        np.testing.assert_allclose(h_long.data[:, :6], h_short.data, atol=1e-6)

    def test_attention_rows_normalized_and_pad_starved(self):
        captured = []
        real = ag.softmax

        def spy(a, axis=-1):
            out = real(a, axis=axis)
            captured.append(out.data)
            return out

        model, vocab = tiny_model(max_len=6, layers=2)
        batch = encode_batch([("alpha beta", None), ("gamma", None)], vocab, max_len=6)
        ag.softmax = spy
        try:
            model.forward(batch)
        finally:
            ag.softmax = real
        assert len(captured) == 2
        for probs in captured:
            np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
            pad_cols = batch.mask == 0  # (B, T)
            weight_on_pad = probs * pad_cols[:, None, None, :]
            assert weight_on_pad.max() < 1e-20


class TestDynamicMasking:
    def test_selection_and_action_rates(self):
        vocab_size = 100
        B, T = 64, 24
        rng_ids = np.random.default_rng(0)
        ids = rng_ids.integers(5, vocab_size, size=(B, T))
        ids[:, 0] = CLS_ID
        ids[:, -1] = PAD_ID
        batch = EncodedBatch(
            ids=ids,
            mask=np.where(ids == PAD_ID, 0, 1),
            segments=np.zeros_like(ids),
        )
        n_eligible = int(((batch.mask == 1) & (ids >= 5)).sum())
        selected = 0
        masked = randomized = unchanged = 0
        trials = 30
        rng = np.random.default_rng(99)
        for _ in range(trials):
            new_ids, labels = mask_tokens(batch, rng, vocab_size, mask_prob=0.15)
            chosen = labels != IGNORE_LABEL
            selected += int(chosen.sum())
            masked += int((new_ids[chosen] == MASK_ID).sum())
            unchanged += int((new_ids[chosen] == ids[chosen]).sum())
        total = n_eligible * trials
        sigma_sel = math.sqrt(total * 0.15 * 0.85)
        assert abs(selected - 0.15 * total) <= 4 * sigma_sel
        randomized = selected - masked - unchanged
        for rate, count in ((0.8, masked), (0.1, unchanged)):
            sigma = math.sqrt(selected * rate * (1 - rate))
            assert abs(count - rate * selected) <= 4 * sigma, (rate, count, selected)
        assert randomized >= 0

    def test_specials_and_pad_never_selected(self):
        model, vocab = tiny_model(max_len=8)
        batch = encode_batch([("alpha beta gamma", None)] * 8, vocab, max_len=8)
        rng = np.random.default_rng(1)
        for _ in range(50):
            new_ids, labels = mask_tokens(batch, rng, len(vocab), mask_prob=0.9)
            special = (batch.ids < 5) | (batch.mask == 0)
            assert (labels[special] == IGNORE_LABEL).all()
            assert (new_ids[special] == batch.ids[special]).all()

    def test_labels_hold_original_ids(self):
        model, vocab = tiny_model(max_len=8)
        batch = encode_batch([("alpha beta gamma delta", None)] * 4, vocab, max_len=8)
        new_ids, labels = mask_tokens(batch, np.random.default_rng(7), len(vocab), mask_prob=0.5)
        chosen = labels != IGNORE_LABEL
        assert (labels[chosen] == batch.ids[chosen]).all()

    def test_zero_probability_is_identity(self):
        model, vocab = tiny_model(max_len=8)
        batch = encode_batch([("alpha beta", None)], vocab, max_len=8)
        new_ids, labels = mask_tokens(batch, np.random.default_rng(7), len(vocab), mask_prob=0.0)
        assert (new_ids == batch.ids).all()
        assert (labels == IGNORE_LABEL).all()


class TestAdam:
    def test_single_step_closed_form(self):
        p = Parameter("w", np.array([1.0, -2.0]))
        p.grad = np.array([0.5, -0.25])
        state = AdamState(lr=0.1)
        adam_step(state, [p])
        # bias correction makes m_hat = g and v_hat = g * g on step one
        want = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -0.25]) / (
            np.abs(np.array([0.5, -0.25])) + 1e-8
        )
        np.testing.assert_allclose(p.data, want, atol=1e-12)

    def test_trajectory_matches_reference_recursion(self):
        rng = np.random.default_rng(11)
        p = Parameter("w", rng.normal(size=(3, 2)))
        ref = p.data.copy()
        state = AdamState(lr=0.01)
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        for t in range(1, 26):
            g = rng.normal(size=ref.shape)
            p.grad = g.copy()
            adam_step(state, [p])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            np.testing.assert_allclose(p.data, ref, atol=1e-12)

    def test_frozen_and_gradless_parameters_untouched(self):
        frozen = Parameter("a", np.ones(3))
        frozen.grad = np.ones(3)
        frozen.freeze()
        gradless = Parameter("b", np.ones(3))
        state = AdamState(lr=0.5)
        adam_step(state, [frozen, gradless])
        np.testing.assert_array_equal(frozen.data, np.ones(3))
        np.testing.assert_array_equal(gradless.data, np.ones(3))
        assert state.step == 1


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        model, vocab = tiny_model(max_len=6, layers=2)
        save_encoder(model, tmp_path / "ck", seed=12)
        again = load_encoder(tmp_path / "ck")
        assert again.config == model.config
        assert again.vocab.token_to_id == vocab.token_to_id
        for name, p in model.params.items():
            assert (again.params[name].data == p.data).all(), name
        batch = encode_batch([("alpha beta", None)], vocab, max_len=6)
        np.testing.assert_array_equal(
            model.forward(batch)[1].data, again.forward(batch)[1].data
        )

    def test_gradients_flow_after_reload(self, tmp_path):
        model, vocab = tiny_model(max_len=6)
        save_encoder(model, tmp_path / "ck")
        again = load_encoder(tmp_path / "ck")
        batch = encode_batch([("alpha beta", None)], vocab, max_len=6)
        _, pooled = again.forward(batch)
        backward(ag.sum_(pooled))
        assert again.params["pool.w"].grad is not None


class TestParameterCount:
    def test_formula_matches_actual_tensors(self):
        for layers, hidden, heads, ffn in ((1, 4, 2, 8), (2, 16, 4, 32), (3, 8, 2, 16)):
            vocab = tiny_vocab()
            cfg = EncoderConfig(
                layers=layers,
                hidden=hidden,
                heads=heads,
                ffn=ffn,
                max_len=10,
                vocab_size=len(vocab),
                dropout=0.0,
            )
            model = EncoderModel.init(cfg, vocab, seed=0)
            actual = sum(p.data.size for p in model.params.values())
            assert parameter_count(cfg) == actual

    def test_all_pad_tail_is_finite(self):
        model, vocab = tiny_model(max_len=6)
        batch = encode_batch([("", None)], vocab, max_len=6)
        hidden, pooled = model.forward(batch)
        assert np.isfinite(hidden.data).all() and np.isfinite(pooled.data).all()
