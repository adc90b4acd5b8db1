import numpy as np
import pytest

from reviewqa import generator as G
from reviewqa import numerics as nm
from reviewqa.corpus import TaggedToken
from reviewqa.numerics import Tensor

from .conftest import make_model, make_question, make_vocab, make_weighted_vocab


def numpy_forward(model, question, answer_words, weighted_vocab):
    """The whole forward pass re-evaluated with plain numpy from the parameter
    arrays: the oracle never touches the recorded-graph machinery."""
    cfg = model.config
    v = model.vocab
    W = model.word_emb.data
    T = model.pos_emb.data
    P = model.position_emb.data

    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x))

    def embed(ids, tags, pos):
        e = W[ids].copy()
        if cfg.use_pos:
            e = e + T[tags]
        return e + P[pos]

    def glu(x):
        h = x.shape[-1] // 2
        return x[:, :h] * sigmoid(x[:, h:])

    def conv(x, kern, bias, k, pad_left, pad_right):
        L, d = x.shape
        padded = np.zeros((L + pad_left + pad_right, d))
        padded[pad_left:pad_left + L] = x
        L_out = padded.shape[0] - k + 1
        win = np.stack([padded[t:t + L_out] for t in range(k)], 1).reshape(L_out, k * d)
        return win @ kern.T + bias

    def softmax(x):
        e = np.exp(x - x.max(-1, keepdims=True))
        return e / e.sum(-1, keepdims=True)

    q_ids = v.encode(t.word for t in question)
    q_tags = v.encode_tags(t.pos for t in question)
    e_x = embed(q_ids, q_tags, list(range(1, len(question) + 1)))
    z = e_x
    for w, b in zip(model.encoder.conv_w, model.encoder.conv_b):
        k = model.encoder.k
        z = glu(conv(z, w.data, b.data, k, k // 2, (k - 1) // 2)) + z
    z = z @ model.encoder.out_w.data + model.encoder.out_b.data

    n = len(answer_words)
    steps = min(n + 1, 40)
    in_words = ["<s>"] + list(answer_words[: steps - 1])
    in_ids = [v.start_id] + v.encode(answer_words[: steps - 1])
    in_tags = v.encode_tags(v.tag_for(w) for w in in_words)
    e_y = embed(in_ids, in_tags, list(range(1, steps + 1)))

    x = e_y
    mag = weighted_vocab.magnified if (cfg.use_review and weighted_vocab is not None
                                       and len(weighted_vocab)) else None
    for layer in model.generator.layers:
        k = model.generator.k
        h = glu(conv(x, layer.conv_w.data, layer.conv_b.data, k, k - 1, 0))
        d = h @ layer.attn_w.data + layer.attn_b.data + e_y
        a = softmax(d @ z.T)
        c = a @ (z + e_x)
        if mag is not None:
            ar = softmax(c @ mag.T)
            o = ar @ mag
            hid = np.tanh(np.concatenate([h, c, o], 1) @ layer.gate_w1.data
                          + layer.gate_b1.data)
            g = sigmoid(hid @ layer.gate_w2.data + layer.gate_b2.data)
            h = h + g * c + (1.0 - g) * o
        else:
            h = h + c
        x = h + x
    logits = x @ model.generator.out_w.data + model.generator.out_b.data
    shifted = logits - logits.max(-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))


class TestQuestionAttention:
    def _layer(self, d, seed=0):
        return G.init_generator(d, 1, 2, 5, np.random.default_rng(seed),
                                np.float64).layers[0]

    def test_single_word_question(self):
        rng = np.random.default_rng(2)
        layer = self._layer(4)
        h = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
        e_y = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
        z = Tensor(rng.standard_normal((1, 4)), dtype=np.float64)
        e_x = Tensor(rng.standard_normal((1, 4)), dtype=np.float64)
        c, a = G.question_attention(h, e_y, z, e_x, layer)
        assert np.array_equal(a.data, np.ones((3, 1)))
        assert np.allclose(c.data, np.tile(z.data[0] + e_x.data[0], (3, 1)), atol=1e-15)

    def test_orthogonal_scores_uniform(self):
        d = 4
        layer = self._layer(d)
        layer.attn_w.tensor.data = np.zeros((d, d))
        layer.attn_b.tensor.data = np.zeros(d)
        e_y = Tensor(np.zeros((2, d)), dtype=np.float64)  # d_j = 0 for all j
        h = Tensor(np.zeros((2, d)), dtype=np.float64)
        z = Tensor(np.eye(d)[:3], dtype=np.float64)
        e_x = Tensor(np.ones((3, d)), dtype=np.float64)
        c, a = G.question_attention(h, e_y, z, e_x, layer)
        assert np.allclose(a.data, 1 / 3, atol=1e-15)
        assert np.allclose(c.data, (z.data + e_x.data).mean(0), atol=1e-15)

    def test_three_word_planted_direct(self):
        rng = np.random.default_rng(7)
        d = 3
        layer = self._layer(d, seed=7)
        h = Tensor(rng.standard_normal((2, d)), dtype=np.float64)
        e_y = Tensor(rng.standard_normal((2, d)), dtype=np.float64)
        z = Tensor(rng.standard_normal((3, d)), dtype=np.float64)
        e_x = Tensor(rng.standard_normal((3, d)), dtype=np.float64)
        c, a = G.question_attention(h, e_y, z, e_x, layer)
        d_j = h.data @ layer.attn_w.data + layer.attn_b.data + e_y.data
        scores = d_j @ z.data.T
        e = np.exp(scores - scores.max(1, keepdims=True))
        want_a = e / e.sum(1, keepdims=True)
        assert np.allclose(a.data, want_a, atol=1e-12)
        assert np.allclose(c.data, want_a @ (z.data + e_x.data), atol=1e-12)
        assert np.allclose(a.data.sum(1), 1.0, atol=1e-6)


class TestReviewInjection:
    def _setup(self, d=4, n_vocab=3, seed=4):
        rng = np.random.default_rng(seed)
        layer = G.init_generator(d, 1, 2, 5, rng, np.float64).layers[0]
        h = Tensor(rng.standard_normal((3, d)), dtype=np.float64)
        c = Tensor(rng.standard_normal((3, d)), dtype=np.float64)
        mag = Tensor(rng.uniform(0.1, 1.0, (n_vocab, d)), dtype=np.float64)
        return layer, h, c, mag

    def test_gate_forced_one_recovers_review_free_update(self):
        layer, h, c, mag = self._setup()
        layer.gate_b2.tensor.data = np.array([50.0])  # sigmoid saturates to 1.0
        layer.gate_w2.tensor.data = np.zeros_like(layer.gate_w2.data)
        out, g, _ = G.review_injection(h, c, mag, layer)
        assert np.all(g.data == 1.0)
        assert np.array_equal(out.data, (h + c).data)

    def test_gate_forced_zero_recovers_review_summary_update(self):
        layer, h, c, mag = self._setup()
        layer.gate_b2.tensor.data = np.array([-50.0])
        layer.gate_w2.tensor.data = np.zeros_like(layer.gate_w2.data)
        out, g, o = G.review_injection(h, c, mag, layer)
        assert np.all(g.data < 1e-20)  # saturated low (sigmoid never hits 0 exactly)
        assert np.array_equal(out.data, (h + o).data)

    def test_single_word_vocab_summary_is_that_row(self):
        layer, h, c, _ = self._setup(n_vocab=1)
        mag = Tensor(np.array([[0.3, -0.2, 0.9, 0.1]]), dtype=np.float64)
        _, _, o = G.review_injection(h, c, mag, layer)
        assert np.allclose(o.data, np.tile(mag.data[0], (3, 1)), atol=1e-15)

    def test_gate_strictly_inside_unit_interval(self):
        layer, h, c, mag = self._setup(seed=11)
        _, g, _ = G.review_injection(h, c, mag, layer)
        assert np.all(g.data > 0) and np.all(g.data < 1)
        assert g.shape == (3, 1)  # scalar gate per step


class TestForwardTrain:
    def test_distributions_sum_to_one(self, tiny_model):
        q = make_question(tiny_model.vocab)
        wv = make_weighted_vocab(tiny_model)
        logp, targets = tiny_model.forward_train(q, ["w0", "w1", "w2"], wv)
        probs = np.exp(logp.data)
        assert np.allclose(probs.sum(1), 1.0, atol=1e-6)
        assert logp.shape == (4, len(tiny_model.vocab))
        assert len(targets) == 4

    def test_causality_bitwise(self):
        model = make_model(d=6, layers=2, k_dec=3, precision=32)
        q = make_question(model.vocab)
        wv = make_weighted_vocab(model)
        base, _ = model.forward_train(q, ["w0", "w1", "w2", "w3"], wv)
        for edit in range(4):
            words = ["w0", "w1", "w2", "w3"]
            words[edit] = "w5"
            moved, _ = model.forward_train(q, words, wv)
            assert np.array_equal(base.data[: edit + 1], moved.data[: edit + 1]), \
                f"rows before edited position {edit} must be bit-identical"

    def test_matches_numpy_transcription(self):
        for use_review in (True, False):
            for use_pos in (True, False):
                model = make_model(d=4, layers=2, k_dec=3, seed=6,
                                   use_review=use_review, use_pos=use_pos)
                q = make_question(model.vocab)
                wv = make_weighted_vocab(model)
                logp, _ = model.forward_train(q, ["w0", "w2"], wv)
                want = numpy_forward(model, q, ["w0", "w2"], wv)
                assert np.allclose(logp.data, want, atol=1e-12)

    def test_planted_tiny_model_oracle(self):
        # d=2, |vocab|=4 words + 4 reserved, single layer
        vocab = make_vocab(4)
        model = make_model(vocab, d=2, layers=1, k_enc=2, k_dec=2, seed=13)
        q = [TaggedToken("w0", "JJ"), TaggedToken("w1", "NN"),
             TaggedToken("w2", "VB"), TaggedToken("w3", "JJ")]
        wv = make_weighted_vocab(model, ["w1", "w3"])
        logp, _ = model.forward_train(q, ["w3", "w0"], wv)
        assert np.allclose(logp.data, numpy_forward(model, q, ["w3", "w0"], wv), atol=1e-12)

    def test_overlong_answer_rejected(self, tiny_model):
        q = make_question(tiny_model.vocab)
        with pytest.raises(nm.ShapeError):
            tiny_model.forward_train(q, ["w0"] * 41, None)

    def test_full_length_answer_has_40_steps(self, tiny_model):
        q = make_question(tiny_model.vocab)
        logp, targets = tiny_model.forward_train(q, ["w0"] * 40, None)
        assert logp.shape[0] == 40 and len(targets) == 40
        assert targets[-1] == tiny_model.vocab.word_to_id["w0"]  # no END step

    def test_excluded_pair_falls_back_to_review_free(self):
        model = make_model(d=4, layers=1, seed=3)
        q = make_question(model.vocab)
        with_none, _ = model.forward_train(q, ["w0", "w1"], None)
        ablated = make_model(d=4, layers=1, seed=3, use_review=False)
        with_flag, _ = ablated.forward_train(q, ["w0", "w1"], make_weighted_vocab(model))
        assert np.array_equal(with_none.data, with_flag.data)


class TestStep:
    def test_step_equals_forward_train_last_column(self):
        model = make_model(d=6, layers=2, k_dec=3, precision=32, seed=8)
        q = make_question(model.vocab)
        wv = make_weighted_vocab(model)
        ctx = model.question_context(q, wv)
        for prefix in ([], ["w0"], ["w0", "w3"], ["w2", "w2", "w1", "w0", "w3"]):
            state = model.start_state(ctx)
            for w in prefix:
                state = state.extend(w)
            got = model.step(state)
            want, _ = model.forward_train(q, prefix, wv)
            assert np.array_equal(got, want.data[-1]), f"prefix {prefix}"

    def test_start_only_prefix_defined(self, tiny_model):
        q = make_question(tiny_model.vocab)
        ctx = tiny_model.question_context(q, make_weighted_vocab(tiny_model))
        dist = tiny_model.step(tiny_model.start_state(ctx))
        assert np.isfinite(dist).all()
        assert abs(np.exp(dist).sum() - 1.0) < 1e-6

    def test_max_length_prefix_rejected(self, tiny_model):
        q = make_question(tiny_model.vocab)
        ctx = tiny_model.question_context(q, None)
        state = tiny_model.start_state(ctx)
        for _ in range(40):
            state = state.extend("w0")
        with pytest.raises(nm.ShapeError):
            tiny_model.step(state)


class TestAblationConsistency:
    def test_flags_off_equal_plain_path_with_shared_parameters(self):
        base = make_model(d=4, layers=2, seed=21, use_review=False, use_pos=False)
        full = make_model(d=4, layers=2, seed=21, use_review=True, use_pos=True)
        # same seed: shared parameters are identical arrays
        for p_b, p_f in zip(base.parameters(), full.parameters()):
            assert p_b.name == p_f.name
            assert np.array_equal(p_b.data, p_f.data)
        q = make_question(base.vocab)
        full.config.use_review = False
        full.config.use_pos = False
        a, _ = base.forward_train(q, ["w0", "w1"], None)
        b, _ = full.forward_train(q, ["w0", "w1"], None)
        assert np.array_equal(a.data, b.data)

    def test_parallel_barrier_counts(self):
        model = make_model(d=4, layers=3, k_dec=4, precision=32)
        q = make_question(model.vocab)
        with nm.count_ops() as counts:
            model.forward_train(q, ["w0"] * 39, make_weighted_vocab(model))
        # one convolution per layer regardless of the 40 time steps
        assert counts["conv1d_window"] == 3 + 3
        # one question-attention softmax and one review softmax per decoder layer
        assert counts["softmax"] == 3 + 3
        assert counts["log_softmax"] == 1

    def test_model_gradients_pass_finite_differences(self):
        model = make_model(d=3, layers=1, k_enc=2, k_dec=2, seed=17, precision=64)
        q = make_question(model.vocab)
        wv = make_weighted_vocab(model)

        def loss_fn():
            logp, targets = model.forward_train(q, ["w0", "w1"], wv)
            return nm.mul_const(nm.tsum(nm.pick(logp, targets)), -1.0)

        err = nm.gradient_check(loss_fn, model.trainable_parameters(), eps=1e-5)
        assert err < 1e-4
