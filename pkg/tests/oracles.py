"""Independent brute-force oracles the tests check the real paths against.

Nothing here may import the solver or search code it verifies.
"""

from __future__ import annotations

import itertools

import numpy as np


def enumerate_transport_cost(mass_a, mass_b, cost) -> float:
    """Exact optimal transport by recursive cell saturation.

    Every basic feasible solution of a transportation problem can be built by
    repeatedly picking some cell and shipping the full remaining supply or
    demand through it (leaf-first elimination of its support forest), so
    enumerating all saturation orders covers all vertices of the polytope.
    """
    best = [float("inf")]

    def rec(a, b, acc):
        if acc >= best[0] - 1e-15:
            return
        alive_a = [i for i, x in enumerate(a) if x > 1e-12]
        alive_b = [j for j, x in enumerate(b) if x > 1e-12]
        if not alive_a or not alive_b:
            best[0] = min(best[0], acc)
            return
        for i in alive_a:
            for j in alive_b:
                move = min(a[i], b[j])
                a2 = list(a)
                b2 = list(b)
                a2[i] -= move
                b2[j] -= move
                rec(a2, b2, acc + move * cost[i][j])

    rec(list(mass_a), list(mass_b), 0.0)
    return best[0]


def nbow(doc):
    """Distinct words with normalized counts, in first-appearance order."""
    words, counts = [], []
    for w in doc:
        if w in words:
            counts[words.index(w)] += 1
        else:
            words.append(w)
            counts.append(1)
    total = sum(counts)
    return words, [c / total for c in counts]


def brute_force_wmd(doc_a, doc_b, embedding: dict[str, np.ndarray]) -> float:
    """WMD via transport-plan enumeration on small documents."""
    wa, ma = nbow(doc_a)
    wb, mb = nbow(doc_b)
    cost = [[float(np.linalg.norm(embedding[x] - embedding[y])) for y in wb] for x in wa]
    return enumerate_transport_cost(ma, mb, cost)


def exhaustive_best_sequence(score_fn, word_ids, max_len: int):
    """Best candidate by enumerating the whole sequence space a beam searches:
    every word sequence of length < max_len terminated by END, plus every
    unterminated sequence of exactly max_len words (END is not a word).

    score_fn(words, ended_by_end) returns the total log-probability of the
    candidate. Returns (words, score, ended_by_end).
    """
    best = (None, -float("inf"), False)
    for m in range(0, max_len):
        for seq in itertools.product(word_ids, repeat=m):
            score = score_fn(list(seq), True)
            if score > best[1]:
                best = (list(seq), score, True)
    for seq in itertools.product(word_ids, repeat=max_len):
        score = score_fn(list(seq), False)
        if score > best[1]:
            best = (list(seq), score, False)
    return best
