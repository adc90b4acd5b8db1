"""Automatic metrics: distinct-1/2 diversity ratios and embedding-based cosine
similarity against the reference answer, aggregated over a test set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Dataset, QAPair
from .decoding import beam_search
from .model import Model
from .retrieval import SnippetSet, WordVectors, snippet_word_weights


class UndefinedMetricError(ValueError):
    """Metric undefined for this input (empty answer or zero vector)."""


def distinct_n(tokens: Sequence[str], n: int) -> float:
    """Ratio of distinct to total n-grams; answers shorter than n score 0."""
    if len(tokens) == 0:
        raise UndefinedMetricError("distinct_n of an empty answer is undefined")
    if len(tokens) < n:
        return 0.0
    grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
    return len(set(grams)) / len(grams)


def embedding_similarity(generated: Sequence[str], reference: Sequence[str],
                         vectors: WordVectors) -> float:
    """Cosine between the unweighted mean word embeddings of the two sides;
    out-of-vocabulary tokens use the UNK vector."""
    if len(generated) == 0 or len(reference) == 0:
        raise UndefinedMetricError("embedding similarity of an empty answer is undefined")
    g = vectors.matrix(list(generated)).mean(axis=0)
    r = vectors.matrix(list(reference)).mean(axis=0)
    ng, nr = np.linalg.norm(g), np.linalg.norm(r)
    if ng == 0 or nr == 0:
        raise UndefinedMetricError("zero mean-embedding vector")
    return float(g @ r / (ng * nr))


@dataclass
class EvalReport:
    distinct_1: float
    distinct_2: float
    es: float
    items: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"distinct_1": self.distinct_1, "distinct_2": self.distinct_2,
                "es": self.es, "items": self.items}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def evaluate(test_pairs: Sequence[QAPair], vectors: WordVectors,
             snippet_sets: dict[str, SnippetSet],
             model: Model | None = None,
             answers: dict[str, list[str]] | None = None,
             beam_width: int = 5, max_len: int = 40,
             length_normalize: bool = True) -> EvalReport:
    """Score one answer per test pair: either decode it with the model or look
    it up in an answer file mapping. Pairs flagged excluded by retrieval are
    skipped; other failures become per-item error entries."""
    if model is None and answers is None:
        raise ValueError("evaluate needs a model or an answers mapping")
    items: list[dict] = []
    d1s, d2s, ess = [], [], []
    for pair in test_pairs:
        ss = snippet_sets.get(pair.pair_id)
        if ss is None or ss.excluded:
            items.append({"pair_id": pair.pair_id, "skipped": "excluded"})
            continue
        try:
            if answers is not None:
                if pair.pair_id not in answers:
                    raise KeyError(f"no answer for {pair.pair_id}")
                tokens = answers[pair.pair_id]
            else:
                wv = snippet_word_weights(ss, vectors) if ss.snippets else None
                hyps = beam_search(model, pair.question, wv, beam_width, max_len,
                                   length_normalize)
                tokens = hyps[0].words
            reference = [t.word for t in pair.answer]
            item = {
                "pair_id": pair.pair_id,
                "answer_tokens": list(tokens),
                "distinct_1": distinct_n(tokens, 1),
                "distinct_2": distinct_n(tokens, 2),
                "es": embedding_similarity(tokens, reference, vectors),
            }
            d1s.append(item["distinct_1"])
            d2s.append(item["distinct_2"])
            ess.append(item["es"])
            items.append(item)
        except (KeyError, UndefinedMetricError) as exc:
            items.append({"pair_id": pair.pair_id, "error": str(exc)})
    if not d1s:
        return EvalReport(float("nan"), float("nan"), float("nan"), items)
    return EvalReport(float(np.mean(d1s)), float(np.mean(d2s)), float(np.mean(ess)), items)


def save_answers(path: str | Path, answers: dict[str, list[str]]) -> None:
    with open(path, "w") as f:
        for pid, tokens in answers.items():
            f.write(json.dumps({"pair_id": pid, "answer_tokens": tokens}) + "\n")


def load_answers(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["pair_id"]] = rec["answer_tokens"]
    return out
