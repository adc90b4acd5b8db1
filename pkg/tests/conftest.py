import numpy as np
import pytest

from reviewqa.corpus import EmbeddingTable, TaggedToken, Vocabulary, load_embeddings
from reviewqa.model import Model, ModelConfig
from reviewqa.retrieval import Snippet, SnippetSet, WordVectors, snippet_word_weights


def make_vocab(n_words: int = 8, tags=("JJ", "NN", "VB")) -> Vocabulary:
    words = [f"w{i}" for i in range(n_words)]
    v = Vocabulary(words, list(tags))
    v.dominating_tag = {w: tags[i % len(tags)] for i, w in enumerate(words)}
    return v


def make_model(vocab: Vocabulary | None = None, d: int = 6, layers: int = 1,
               k_enc: int = 2, k_dec: int = 2, seed: int = 0, precision: int = 64,
               use_pos: bool = True, use_review: bool = True) -> Model:
    vocab = vocab or make_vocab()
    table = load_embeddings(None, vocab, d, seed=seed)
    cfg = ModelConfig(d=d, enc_layers=layers, dec_layers=layers, k_enc=k_enc,
                      k_dec=k_dec, use_pos=use_pos, use_review=use_review,
                      precision=precision, seed=seed)
    return Model(vocab, table, cfg)


def make_question(vocab: Vocabulary, n: int = 4):
    words = vocab.words[4:4 + n]
    return [TaggedToken(w, vocab.tag_for(w)) for w in words]


def make_weighted_vocab(model: Model, words=None):
    words = words or model.vocab.words[4:7]
    vectors = WordVectors(model.vocab,
                          EmbeddingTable(model.word_emb.data.astype(np.float64),
                                         "word", False))
    ss = SnippetSet("q", [Snippet(list(words), 0.1, f"r{i}") for i in range(2)])
    return snippet_word_weights(ss, vectors)


@pytest.fixture
def tiny_model():
    return make_model()
