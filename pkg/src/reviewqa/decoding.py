"""Beam-search answer generation; the top hypothesis is the system answer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .corpus import MAX_SEQ_LEN, TaggedToken
from .model import DecoderState, Model
from .retrieval import WeightedSnippetVocab


@dataclass
class Hypothesis:
    """A (partial) answer: generated words, accumulated log-probability, and
    whether it ended with END or hit the length cap."""
    words: list[str]
    log_prob: float
    finished: bool = False
    emitted_end: bool = False
    state: DecoderState | None = None

    @property
    def n_steps(self) -> int:
        """Number of scored steps (END, when emitted, is one of them)."""
        return len(self.words) + (1 if self.emitted_end else 0)

    def ranking_score(self, length_normalize: bool) -> float:
        return self.log_prob / max(1, self.n_steps) if length_normalize else self.log_prob


def sequence_score(model: Model, question: Sequence[TaggedToken],
                   weighted_vocab: WeightedSnippetVocab | None,
                   words: Sequence[str], count_end: bool) -> float:
    """Sum of step log-probabilities for a generated sequence, recomputed by
    the teacher-forced forward pass (the END step included when it was
    emitted). Finished beam hypotheses carry exactly this score."""
    with nm.no_grad():
        logp, targets = model.forward_train(question, list(words), weighted_vocab)
    n_terms = len(words) + (1 if count_end else 0)
    return float(logp.data[np.arange(n_terms), targets[:n_terms]].sum())


def beam_search(model: Model, question: Sequence[TaggedToken],
                weighted_vocab: WeightedSnippetVocab | None,
                beam_width: int = 5, max_len: int = MAX_SEQ_LEN,
                length_normalize: bool = True) -> list[Hypothesis]:
    """Expand the beam_width best hypotheses by accumulated log-probability;
    finished hypotheses (END emitted, or force-finished at max_len) move to a
    completed pool with their score recomputed through the training forward,
    and the pool is returned ranked best-first. Beam width 1 is greedy."""
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    if not (1 <= max_len <= MAX_SEQ_LEN):
        raise ValueError(f"max_len must be in 1..{MAX_SEQ_LEN}")
    ctx = model.question_context(question, weighted_vocab)
    wv = weighted_vocab
    end_word = model.vocab.words[model.vocab.end_id]
    live = [Hypothesis([], 0.0, state=model.start_state(ctx))]
    completed: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        candidates: list[tuple[float, int, Hypothesis, int]] = []
        for h_idx, hyp in enumerate(live):
            logp = model.step(hyp.state)
            k = min(beam_width, logp.shape[0])
            top = np.argpartition(-logp, k - 1)[:k]
            for tok in top:
                candidates.append((hyp.log_prob + float(logp[tok]), h_idx, hyp, int(tok)))
        # best beam_width extensions by raw accumulated log-probability; ties
        # break deterministically by hypothesis index then token id
        candidates.sort(key=lambda c: (-c[0], c[1], c[3]))
        next_live: list[Hypothesis] = []
        for acc_score, _, hyp, tok in candidates[:beam_width]:
            word = model.vocab.words[tok]
            if word == end_word:
                score = sequence_score(model, question, wv, hyp.words, count_end=True)
                completed.append(Hypothesis(list(hyp.words), score, True, True))
            elif len(hyp.words) + 1 >= max_len:
                words = hyp.words + [word]
                score = sequence_score(model, question, wv, words, count_end=False)
                completed.append(Hypothesis(words, score, True, False))
            else:
                next_live.append(Hypothesis(hyp.words + [word], acc_score,
                                            state=hyp.state.extend(word)))
        live = next_live
    completed.sort(key=lambda h: -h.ranking_score(length_normalize))
    return completed
