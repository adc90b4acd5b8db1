"""Snippet retrieval: word mover's distance, window extraction, threshold
calibration, question expansion, and snippet word weighting.

Transport is solved exactly (small LP via HiGHS); documents here are short, so
brute-force-checkable sizes stay cheap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linprog

from .corpus import Dataset, EmbeddingTable, QAPair, Review, TaggedToken, Vocabulary

DEFAULT_WINDOW = 10
TOP_SNIPPETS_FOR_PI = 10
MIN_SNIPPETS_PER_PAIR = 2


class UndefinedDistanceError(ValueError):
    """WMD of an empty document is undefined."""


class NoExpansionError(ValueError):
    """Question expansion needs a non-empty training index."""


class CalibrationError(ValueError):
    """No candidate snippets anywhere; the threshold cannot be calibrated."""


class DegenerateWeightsError(ValueError):
    """Snippet word weights cannot be max-normalized."""


class WordVectors:
    """Word -> embedding row lookup; unseen words use the UNK row."""

    def __init__(self, vocab: Vocabulary, table: EmbeddingTable):
        self.vocab = vocab
        self.rows = table.rows
        self.dim = table.rows.shape[1]

    def get(self, word: str) -> np.ndarray:
        return self.rows[self.vocab.word_to_id.get(word, self.vocab.unk_id)]

    def matrix(self, words: Sequence[str]) -> np.ndarray:
        return self.rows[[self.vocab.word_to_id.get(w, self.vocab.unk_id) for w in words]]


def _nbow(doc: Sequence[str]) -> tuple[list[str], np.ndarray]:
    """Distinct words and their normalized bag-of-words mass."""
    words: list[str] = []
    index: dict[str, int] = {}
    counts: list[int] = []
    for w in doc:
        if w in index:
            counts[index[w]] += 1
        else:
            index[w] = len(words)
            words.append(w)
            counts.append(1)
    mass = np.array(counts, dtype=float)
    return words, mass / mass.sum()


def wmd(doc_a: Sequence[str], doc_b: Sequence[str], vectors: WordVectors) -> float:
    """Exact optimal-transport cost between the nBOW distributions of two
    documents, with Euclidean distance between word embeddings as ground cost."""
    if len(doc_a) == 0 or len(doc_b) == 0:
        raise UndefinedDistanceError("wmd of an empty document is undefined")
    words_a, mass_a = _nbow(doc_a)
    words_b, mass_b = _nbow(doc_b)
    va = vectors.matrix(words_a)
    vb = vectors.matrix(words_b)
    diff = va[:, None, :] - vb[None, :, :]
    cost = np.sqrt((diff * diff).sum(axis=2))
    return transport_cost(mass_a, mass_b, cost)


def transport_cost(mass_a: np.ndarray, mass_b: np.ndarray, cost: np.ndarray) -> float:
    """Minimum-cost transport of mass_a onto mass_b for the given cost matrix."""
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([mass_a, mass_b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return max(float(res.fun), 0.0)


@dataclass(slots=True)
class Snippet:
    tokens: list[str]
    wmd_score: float
    review_id: str
    start: int = 0


@dataclass
class SnippetSet:
    pair_id: str
    snippets: list[Snippet]
    excluded: bool = False

    @property
    def n_snippets(self) -> int:
        return len(self.snippets)


def _review_words(review: Review) -> list[str]:
    return [t.word for t in review.tokens]


def best_snippet(review: Review, query_doc: Sequence[str], t: int,
                 vectors: WordVectors) -> Snippet:
    """The size-t window of the review closest to the query by WMD; the whole
    review when it is shorter than t; earliest window on ties."""
    words = _review_words(review)
    if len(words) <= t:
        return Snippet(words, wmd(words, query_doc, vectors), review.review_id, 0)
    best: Snippet | None = None
    for start in range(len(words) - t + 1):
        window = words[start:start + t]
        score = wmd(window, query_doc, vectors)
        if best is None or score < best.wmd_score:
            best = Snippet(window, score, review.review_id, start)
    return best


def expand_question(question: Sequence[str], product_id: str,
                    training_index: Sequence[QAPair],
                    vectors: WordVectors) -> list[str]:
    """Augment a test question with the answer of its nearest (by WMD) training
    question from another product; falls back to the whole index when every
    training pair shares the product."""
    if not training_index:
        raise NoExpansionError("question expansion needs a non-empty training index")
    candidates = [p for p in training_index if p.product_id != product_id] or list(training_index)
    best_pair = None
    best_score = None
    for p in candidates:
        score = wmd(question, [t.word for t in p.question], vectors)
        if best_score is None or score < best_score:
            best_pair, best_score = p, score
    return list(question) + [t.word for t in best_pair.answer]


def training_query(pair: QAPair) -> list[str]:
    """Training-time retrieval query: the question concatenated with its answer."""
    return [t.word for t in pair.question] + [t.word for t in pair.answer]


def _candidate_snippets(pair_query: Sequence[str], reviews: Sequence[Review],
                        t: int, vectors: WordVectors) -> list[Snippet]:
    return [best_snippet(r, pair_query, t, vectors) for r in reviews]


def calibrate_pi(training_pairs: Sequence[QAPair], reviews: Sequence[Review],
                 vectors: WordVectors, t: int = DEFAULT_WINDOW) -> float:
    """Mean WMD score over the union of every training pair's top-10 (lowest
    scoring) candidate snippets; pairs with fewer contribute all of theirs."""
    by_product: dict[str, list[Review]] = {}
    for r in reviews:
        by_product.setdefault(r.product_id, []).append(r)
    union: list[float] = []
    for pair in training_pairs:
        cands = _candidate_snippets(training_query(pair),
                                    by_product.get(pair.product_id, []), t, vectors)
        scores = sorted(s.wmd_score for s in cands)
        union.extend(scores[:TOP_SNIPPETS_FOR_PI])
    if not union:
        raise CalibrationError("no candidate snippets in any training pair")
    return float(np.mean(union))


def collect_snippets(pair_id: str, query_doc: Sequence[str], reviews: Sequence[Review],
                     pi: float, t: int, vectors: WordVectors,
                     prefilter: bool = False) -> SnippetSet:
    """Best snippet per review, kept when its score is within the threshold;
    sets the excluded flag when fewer than two remain.

    With prefilter on, windows whose centroid distance (a WMD lower bound)
    already exceeds pi are skipped; the retained set is unchanged.
    """
    kept: list[Snippet] = []
    query_centroid = vectors.matrix(list(query_doc)).mean(axis=0) if prefilter else None
    for review in reviews:
        snip = (_best_snippet_bounded(review, query_doc, query_centroid, pi, t, vectors)
                if prefilter else best_snippet(review, query_doc, t, vectors))
        if snip is not None and snip.wmd_score <= pi:
            kept.append(snip)
    return SnippetSet(pair_id, kept, excluded=len(kept) < MIN_SNIPPETS_PER_PAIR)


def _best_snippet_bounded(review: Review, query_doc: Sequence[str],
                          query_centroid: np.ndarray, pi: float, t: int,
                          vectors: WordVectors) -> Snippet | None:
    """best_snippet restricted to windows that could score within pi."""
    words = _review_words(review)
    starts = [0] if len(words) <= t else range(len(words) - t + 1)
    size = len(words) if len(words) <= t else t
    best: Snippet | None = None
    for start in starts:
        window = words[start:start + size]
        lower = float(np.linalg.norm(vectors.matrix(window).mean(axis=0) - query_centroid))
        if lower > pi:
            continue
        score = wmd(window, query_doc, vectors)
        if best is None or score < best.wmd_score:
            best = Snippet(window, score, review.review_id, start)
    return best


# ---------------------------------------------------------------------------
# Snippet word weighting
# ---------------------------------------------------------------------------

@dataclass
class WeightedSnippetVocab:
    """The snippet-set vocabulary with raw weights, max-normalized weights, and
    the weight-magnified embedding rows (one per word, same order)."""
    words: list[str]
    omega: np.ndarray
    omega_hat: np.ndarray
    magnified: np.ndarray  # (|V_q|, d)

    def __len__(self) -> int:
        return len(self.words)


def snippet_word_weights(snippet_set: SnippetSet, vectors: WordVectors) -> WeightedSnippetVocab:
    """Weight each word of the snippet vocabulary by snippet frequency times
    summed per-snippet maximum cosine relatedness, then max-normalize and
    magnify the (raw, pre-weighting) embeddings."""
    snippets = snippet_set.snippets
    n_q = len(snippets)
    if n_q < 1:
        raise ValueError("snippet_word_weights needs at least one snippet")
    vocab_words = sorted({w for s in snippets for w in s.tokens})
    word_vecs = vectors.matrix(vocab_words)
    norms = np.linalg.norm(word_vecs, axis=1)
    if not np.any(norms > 0):
        raise DegenerateWeightsError("all snippet-vocabulary embeddings are zero")

    omega = np.zeros(len(vocab_words))
    snippet_mats = []
    for s in snippets:
        mat = vectors.matrix(sorted(set(s.tokens)))
        mat_norms = np.linalg.norm(mat, axis=1)
        mat_norms[mat_norms == 0] = 1.0
        snippet_mats.append((mat, mat_norms, set(s.tokens)))
    safe_norms = norms.copy()
    safe_norms[safe_norms == 0] = 1.0
    for i, w in enumerate(vocab_words):
        freq = sum(1 for _, _, toks in snippet_mats if w in toks)
        rel_sum = 0.0
        for mat, mat_norms, _ in snippet_mats:
            cos = (mat @ word_vecs[i]) / (mat_norms * safe_norms[i])
            rel_sum += float(cos.max())
        omega[i] = (freq / n_q) * rel_sum

    peak = omega.max()
    if peak <= 0:
        raise DegenerateWeightsError("maximum snippet word weight is not positive")
    omega_hat = omega / peak
    return WeightedSnippetVocab(vocab_words, omega, omega_hat,
                                omega_hat[:, None] * word_vecs)


# ---------------------------------------------------------------------------
# Cache file
# ---------------------------------------------------------------------------

def save_snippet_cache(path: str | Path, sets: Iterable[SnippetSet]) -> None:
    with open(path, "w") as f:
        for s in sets:
            f.write(json.dumps({
                "pair_id": s.pair_id,
                "snippets": [{"tokens": sn.tokens, "score": sn.wmd_score,
                              "review_id": sn.review_id} for sn in s.snippets],
                "excluded": s.excluded,
            }) + "\n")


def load_snippet_cache(path: str | Path) -> dict[str, SnippetSet]:
    sets: dict[str, SnippetSet] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            sets[rec["pair_id"]] = SnippetSet(
                rec["pair_id"],
                [Snippet(sn["tokens"], sn["score"], sn["review_id"]) for sn in rec["snippets"]],
                rec["excluded"])
    return sets


def build_snippet_sets(dataset: Dataset, vectors: WordVectors,
                       t: int = DEFAULT_WINDOW, pi: float | None = None,
                       prefilter: bool = False) -> tuple[float, dict[str, SnippetSet]]:
    """Retrieval pass over every pair: calibrate the threshold on the training
    split (unless overridden), then collect each pair's snippet set. Training
    queries concatenate question and answer; test queries use expansion."""
    by_product: dict[str, list[Review]] = {}
    for r in dataset.reviews:
        by_product.setdefault(r.product_id, []).append(r)
    train_pairs = dataset.pairs_in("train")

    queries: dict[str, list[str]] = {}
    candidates: dict[str, list[Snippet]] = {}
    for pair in dataset.pairs:
        if pair.split == "test":
            queries[pair.pair_id] = expand_question(
                [t_.word for t_ in pair.question], pair.product_id, train_pairs, vectors)
        else:
            queries[pair.pair_id] = training_query(pair)

    if pi is None:
        union: list[float] = []
        for pair in dataset.pairs:
            if pair.split != "train":
                continue
            cands = _candidate_snippets(queries[pair.pair_id],
                                        by_product.get(pair.product_id, []), t, vectors)
            candidates[pair.pair_id] = cands
            scores = sorted(s.wmd_score for s in cands)
            union.extend(scores[:TOP_SNIPPETS_FOR_PI])
        if not union:
            raise CalibrationError("no candidate snippets in any training pair")
        pi = float(np.mean(union))

    sets: dict[str, SnippetSet] = {}
    for pair in dataset.pairs:
        if pair.pair_id in candidates:
            kept = [s for s in candidates[pair.pair_id] if s.wmd_score <= pi]
            sets[pair.pair_id] = SnippetSet(pair.pair_id, kept,
                                            excluded=len(kept) < MIN_SNIPPETS_PER_PAIR)
        else:
            sets[pair.pair_id] = collect_snippets(
                pair.pair_id, queries[pair.pair_id],
                by_product.get(pair.product_id, []), pi, t, vectors, prefilter)
    return pi, sets
