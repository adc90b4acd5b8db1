import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reviewqa import evaluation as EV
from reviewqa.corpus import (EmbeddingTable, Vocabulary, build_vocabulary,
                             load_embeddings, make_rule_tagger, preprocess,
                             synth_corpus)
from reviewqa.retrieval import WordVectors, build_snippet_sets

from .conftest import make_model


def planted(coords):
    words = sorted(coords)
    vocab = Vocabulary(words, ["NN"])
    dim = len(next(iter(coords.values())))
    rows = np.zeros((len(vocab), dim))
    for w, v in coords.items():
        rows[vocab.word_to_id[w]] = v
    rows[vocab.unk_id] = np.ones(dim)
    return WordVectors(vocab, EmbeddingTable(rows, "word", False))


class TestDistinctN:
    def test_unigram_ratio(self):
        assert EV.distinct_n(["ok", "ok", "good"], 1) == pytest.approx(2 / 3)

    def test_all_distinct_bigrams(self):
        assert EV.distinct_n(["a", "b", "c", "d", "e"], 2) == 1.0

    def test_repeated_bigrams(self):
        assert EV.distinct_n(["a", "b", "a", "b"], 2) == pytest.approx(2 / 3)

    def test_shorter_than_n_scores_zero(self):
        assert EV.distinct_n(["a"], 2) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(EV.UndefinedMetricError):
            EV.distinct_n([], 1)

    @given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=12),
           st.integers(1, 2))
    @settings(max_examples=50, deadline=None)
    def test_bounds_and_equality_condition(self, tokens, n):
        score = EV.distinct_n(tokens, n)
        assert 0.0 <= score <= 1.0
        if len(tokens) >= n:
            assert score > 0
            grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
            assert (score == 1.0) == (len(set(grams)) == len(grams))


class TestEmbeddingSimilarity:
    VEC = planted({"a": (1.0, 0.0), "b": (0.0, 1.0), "c": (1.0, 1.0), "d": (2.0, 0.0)})

    def test_identical_sentences(self):
        got = EV.embedding_similarity(["a", "b", "c"], ["a", "b", "c"], self.VEC)
        assert abs(got - 1.0) < 1e-9

    def test_orthogonal_means(self):
        assert abs(EV.embedding_similarity(["a"], ["b"], self.VEC)) < 1e-12

    def test_direct_mean_and_cosine(self):
        gen, ref = ["a", "b", "c"], ["c", "d"]
        g = np.mean([self.VEC.get(w) for w in gen], axis=0)
        r = np.mean([self.VEC.get(w) for w in ref], axis=0)
        want = g @ r / (np.linalg.norm(g) * np.linalg.norm(r))
        assert EV.embedding_similarity(gen, ref, self.VEC) == pytest.approx(want, abs=1e-12)

    def test_symmetry_and_order_invariance(self):
        a, b = ["a", "b", "c"], ["c", "d"]
        s1 = EV.embedding_similarity(a, b, self.VEC)
        s2 = EV.embedding_similarity(b, a, self.VEC)
        s3 = EV.embedding_similarity(["c", "b", "a"], ["d", "c"], self.VEC)
        assert s1 == pytest.approx(s2, abs=1e-12)
        assert s1 == pytest.approx(s3, abs=1e-12)

    def test_oov_uses_unk_vector(self):
        got = EV.embedding_similarity(["zzz"], ["yyy"], self.VEC)
        assert abs(got - 1.0) < 1e-9  # both collapse to the same UNK vector

    def test_empty_rejected(self):
        with pytest.raises(EV.UndefinedMetricError):
            EV.embedding_similarity([], ["a"], self.VEC)

    def test_zero_vector_rejected(self):
        vec = planted({"z": (0.0, 0.0), "a": (1.0, 0.0)})
        with pytest.raises(EV.UndefinedMetricError):
            EV.embedding_similarity(["z"], ["a"], vec)


@pytest.fixture(scope="module")
def eval_setup():
    synth = synth_corpus(8, n_products=6, n_pairs=18, n_reviews=2)
    ds = preprocess(synth.records(), make_rule_tagger(synth.lexicon))
    vocab = build_vocabulary(ds)
    table = load_embeddings(None, vocab, 12, seed=8)
    vectors = WordVectors(vocab, table)
    _, sets = build_snippet_sets(ds, vectors)
    return ds, vocab, table, vectors, sets


class TestEvaluate:
    def test_reference_answers_score_one(self, eval_setup):
        ds, vocab, table, vectors, sets = eval_setup
        answers = {p.pair_id: [t.word for t in p.answer] for p in ds.pairs_in("test")}
        report = EV.evaluate(ds.pairs_in("test"), vectors, sets, answers=answers)
        assert report.es == pytest.approx(1.0, abs=1e-9)

    def test_single_token_repeats_compose_distinct(self, eval_setup):
        ds, vocab, table, vectors, sets = eval_setup
        answers = {p.pair_id: ["battery"] * 5 for p in ds.pairs_in("test")}
        report = EV.evaluate(ds.pairs_in("test"), vectors, sets, answers=answers)
        scored = [i for i in report.items if "distinct_1" in i]
        for item in scored:
            assert item["distinct_1"] == pytest.approx(1 / 5)

    def test_report_means_equal_item_means(self, eval_setup):
        ds, vocab, table, vectors, sets = eval_setup
        model = make_model(vocab=None, d=6, layers=1)  # independent tiny vocab model
        answers = {p.pair_id: [t.word for t in p.question][:3] for p in ds.pairs_in("test")}
        report = EV.evaluate(ds.pairs_in("test"), vectors, sets, answers=answers)
        scored = [i for i in report.items if "es" in i]
        assert report.distinct_1 == float(np.mean([i["distinct_1"] for i in scored]))
        assert report.distinct_2 == float(np.mean([i["distinct_2"] for i in scored]))
        assert report.es == float(np.mean([i["es"] for i in scored]))

    def test_model_generation_matches_independent_recomputation(self, eval_setup):
        ds, vocab, table, vectors, sets = eval_setup
        from reviewqa.decoding import beam_search
        from reviewqa.model import Model, ModelConfig
        from reviewqa.retrieval import snippet_word_weights
        model = Model(vocab, table, ModelConfig(d=12, enc_layers=1, dec_layers=1,
                                                precision=32, seed=8))
        report = EV.evaluate(ds.pairs_in("test"), vectors, sets, model=model,
                             beam_width=2, max_len=6)
        for item in report.items:
            if "answer_tokens" not in item:
                continue
            pair = next(p for p in ds.pairs_in("test") if p.pair_id == item["pair_id"])
            ss = sets[pair.pair_id]
            wv = snippet_word_weights(ss, vectors) if ss.snippets else None
            hyp = beam_search(model, pair.question, wv, 2, 6)[0]
            assert item["answer_tokens"] == hyp.words
            ref = [t.word for t in pair.answer]
            assert item["es"] == pytest.approx(
                EV.embedding_similarity(hyp.words, ref, vectors), abs=0)
            assert item["distinct_1"] == EV.distinct_n(hyp.words, 1)
            assert item["distinct_2"] == EV.distinct_n(hyp.words, 2)

    def test_missing_answers_yield_error_items(self, eval_setup):
        ds, vocab, table, vectors, sets = eval_setup
        report = EV.evaluate(ds.pairs_in("test"), vectors, sets, answers={})
        assert all("error" in i or "skipped" in i for i in report.items)
        assert np.isnan(report.es)

    def test_needs_model_or_answers(self, eval_setup):
        ds, vocab, table, vectors, sets = eval_setup
        with pytest.raises(ValueError):
            EV.evaluate(ds.pairs_in("test"), vectors, sets)

    def test_report_io_and_answer_io(self, eval_setup, tmp_path):
        ds, vocab, table, vectors, sets = eval_setup
        answers = {p.pair_id: [t.word for t in p.answer] for p in ds.pairs_in("test")}
        EV.save_answers(tmp_path / "a.jsonl", answers)
        assert EV.load_answers(tmp_path / "a.jsonl") == answers
        report = EV.evaluate(ds.pairs_in("test"), vectors, sets, answers=answers)
        report.save(tmp_path / "r.json")
        loaded = json.loads((tmp_path / "r.json").read_text())
        assert set(loaded) == {"distinct_1", "distinct_2", "es", "items"}
        assert loaded["es"] == report.es
