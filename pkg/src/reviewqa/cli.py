"""Command-line pipeline: prepare -> snippets -> train -> generate -> evaluate,
plus a selftest. One JSON config drives every stage; flags override it.

Diagnostics go to stderr as single JSON lines; every artifact is a file under
the configured workdir.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import numerics as nm
from .corpus import Dataset, EmbeddingTable, Vocabulary, make_rule_tagger, synth_corpus
from .decoding import beam_search
from .evaluation import EvalReport, distinct_n, embedding_similarity, evaluate, load_answers, save_answers
from .model import Model, ModelConfig
from .numerics import Parameter, Tensor
from .retrieval import (WordVectors, build_snippet_sets, load_snippet_cache,
                        save_snippet_cache, snippet_word_weights, wmd)
from .training import Checkpoint, TrainConfig, build_weighted_vocabs, train

DEFAULT_CONFIG = {
    "seed": 0,
    "workdir": "run",
    "corpus": {"kind": "synthetic", "n_products": 10, "n_pairs": 50, "n_reviews": 4},
    "embeddings": {"path": None, "dim": 48},
    "retrieval": {"window": 10, "pi": None, "prefilter": False},
    "train": {},
    "decode": {"beam": 5, "max_len": 40, "length_normalize": True},
}


def log(**fields) -> None:
    print(json.dumps(fields), file=sys.stderr)


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        user = json.loads(Path(path).read_text())
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(**cfg["train"])
    tc.seed = cfg.get("seed", tc.seed)
    if tc.d != cfg["embeddings"]["dim"]:
        tc.d = cfg["embeddings"]["dim"]
    return tc


def _workdir(cfg: dict) -> Path:
    wd = Path(cfg["workdir"])
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _load_prepared(cfg: dict) -> tuple[Dataset, Vocabulary, EmbeddingTable]:
    wd = _workdir(cfg)
    dataset = Dataset.load(wd / "prepared")
    vocab = Vocabulary.load(wd / "vocab.json")
    rows = np.load(wd / "word_embeddings.npy")
    return dataset, vocab, EmbeddingTable(rows, "word", False)


def cmd_prepare(cfg: dict) -> int:
    wd = _workdir(cfg)
    spec = cfg["corpus"]
    if spec["kind"] == "synthetic":
        synth = synth_corpus(cfg["seed"], spec["n_products"], spec["n_pairs"],
                             spec.get("n_reviews", 4),
                             spec.get("aspects_per_product", 3),
                             spec.get("product_in_question", True))
        records = synth.records()
        tagger = make_rule_tagger(synth.lexicon)
    elif spec["kind"] == "files":
        records = corpus_mod.read_raw_records(spec["qa"], spec["reviews"])
        tagger = make_rule_tagger()
    else:
        raise ValueError(f"unknown corpus kind {spec['kind']!r}")
    dataset = corpus_mod.preprocess(records, tagger)
    dataset.save(wd / "prepared")
    vocab = corpus_mod.build_vocabulary(dataset, min_freq=spec.get("min_freq", 1))
    vocab.save(wd / "vocab.json")
    table = corpus_mod.load_embeddings(cfg["embeddings"]["path"], vocab,
                                       cfg["embeddings"]["dim"], cfg["seed"])
    np.save(wd / "word_embeddings.npy", table.rows)
    log(stage="prepare", pairs=len(dataset.pairs), reviews=len(dataset.reviews),
        vocab=len(vocab), tags=vocab.n_tags)
    return 0


def cmd_snippets(cfg: dict) -> int:
    wd = _workdir(cfg)
    dataset, vocab, table = _load_prepared(cfg)
    vectors = WordVectors(vocab, table)
    pi_override = cfg["retrieval"].get("pi")
    pi, sets = build_snippet_sets(dataset, vectors, cfg["retrieval"]["window"],
                                  pi_override, cfg["retrieval"].get("prefilter", False))
    save_snippet_cache(wd / "snippets.jsonl", [sets[p.pair_id] for p in dataset.pairs])
    (wd / "snippets.meta.json").write_text(json.dumps(
        {"pi": pi, "window": cfg["retrieval"]["window"],
         "calibrated": pi_override is None}))
    excluded = sum(1 for s in sets.values() if s.excluded)
    log(stage="snippets", pi=pi, calibrated=pi_override is None,
        pairs=len(sets), excluded=excluded)
    return 0


def cmd_train(cfg: dict) -> int:
    wd = _workdir(cfg)
    dataset, vocab, table = _load_prepared(cfg)
    sets = load_snippet_cache(wd / "snippets.jsonl")
    tc = train_config(cfg)
    result = train(dataset, vocab, table, sets, tc, log_path=wd / "train_log.jsonl")
    result.checkpoint.save(wd / "checkpoint.json")
    log(stage="train", epochs=len(result.history),
        best_epoch=result.checkpoint.epoch, val_loss=result.checkpoint.val_loss,
        diverged=result.diverged)
    return 1 if result.diverged else 0


def cmd_generate(cfg: dict) -> int:
    wd = _workdir(cfg)
    dataset, vocab, table = _load_prepared(cfg)
    sets = load_snippet_cache(wd / "snippets.jsonl")
    ckpt = Checkpoint.load(wd / "checkpoint.json")
    model = ckpt.restore(vocab)
    vectors = WordVectors(vocab, table)
    weighted = build_weighted_vocabs(sets, vectors)
    dec = cfg["decode"]
    answers: dict[str, list[str]] = {}
    skipped = 0
    for pair in dataset.pairs_in("test"):
        ss = sets.get(pair.pair_id)
        if ss is None or ss.excluded:
            skipped += 1
            continue
        hyps = beam_search(model, pair.question, weighted.get(pair.pair_id),
                           dec["beam"], dec["max_len"], dec["length_normalize"])
        answers[pair.pair_id] = hyps[0].words
    save_answers(wd / "answers.jsonl", answers)
    log(stage="generate", answered=len(answers), skipped_excluded=skipped,
        beam=dec["beam"])
    return 0


def cmd_evaluate(cfg: dict, answers_path: str | None = None) -> int:
    wd = _workdir(cfg)
    dataset, vocab, table = _load_prepared(cfg)
    sets = load_snippet_cache(wd / "snippets.jsonl")
    vectors = WordVectors(vocab, table)
    answers = load_answers(answers_path or wd / "answers.jsonl")
    report = evaluate(dataset.pairs_in("test"), vectors, sets, answers=answers)
    report.save(wd / "report.json")
    log(stage="evaluate", distinct_1=report.distinct_1, distinct_2=report.distinct_2,
        es=report.es, items=len(report.items))
    return 0


# ---------------------------------------------------------------------------
# Selftest
# ---------------------------------------------------------------------------

def _enumerate_transport(mass_a, mass_b, cost) -> float:
    """Brute-force optimal transport: recursively saturate cells in every
    order (covers all vertices of the transportation polytope)."""
    best = [float("inf")]

    def rec(a, b, acc):
        if acc >= best[0]:
            return
        alive_a = [i for i, x in enumerate(a) if x > 1e-12]
        alive_b = [j for j, x in enumerate(b) if x > 1e-12]
        if not alive_a or not alive_b:
            best[0] = min(best[0], acc)
            return
        for i in alive_a:
            for j in alive_b:
                move = min(a[i], b[j])
                a2, b2 = list(a), list(b)
                a2[i] -= move
                b2[j] -= move
                rec(a2, b2, acc + move * cost[i][j])

    rec(list(mass_a), list(mass_b), 0.0)
    return best[0]


def cmd_selftest(cfg: dict) -> int:
    checks: list[tuple[str, bool]] = []

    def check(name: str, ok: bool) -> None:
        checks.append((name, bool(ok)))
        log(check=name, ok=bool(ok))

    # gated linear unit at exact points
    g = nm.glu(Tensor([1.0, 2.0, 0.0, 0.0], dtype=np.float64))
    check("glu.sigma0", np.allclose(g.data, [0.5, 1.0], atol=0))
    g = nm.glu(Tensor([2.0, -1.0, np.log(3), np.log(3)], dtype=np.float64))
    check("glu.sigma_ln3", np.allclose(g.data, [1.5, -0.75], atol=1e-12))

    # softmax examples
    s = nm.softmax(Tensor([np.log(1), np.log(2), np.log(3)], dtype=np.float64))
    check("softmax.logs", np.allclose(s.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12))
    s = nm.softmax(Tensor([7.0, 7.0, 7.0, 7.0], dtype=np.float64))
    check("softmax.shift", np.allclose(s.data, 0.25, atol=1e-15))

    # gradient check on a small two-layer gated conv net
    rng = np.random.default_rng(0)
    seq = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
    params = [Parameter(f"w{i}", Tensor(rng.standard_normal((8, 8)) * 0.3, dtype=np.float64))
              for i in range(2)]
    biases = [Parameter(f"b{i}", Tensor(rng.standard_normal(8) * 0.1, dtype=np.float64))
              for i in range(2)]

    def loss_fn():
        x = seq
        for w, b in zip(params, biases):
            x = nm.glu(nm.conv1d_window(x, w.tensor, b.tensor, 2, 1, 0)) + x
        return nm.tsum(nm.mul(x, x))

    err = nm.gradient_check(loss_fn, params + biases)
    check("numerics.gradcheck", err < 1e-4)

    # wmd against brute-force transport enumeration
    words = ["a", "b", "c", "d"]
    emb = {w: rng.standard_normal(2) for w in words}
    vocab = Vocabulary(words, ["NN"])
    rows = np.zeros((len(vocab), 2))
    for w in words:
        rows[vocab.word_to_id[w]] = emb[w]
    vectors = WordVectors(vocab, EmbeddingTable(rows, "word", False))
    ok = True
    for _ in range(5):
        da = [words[i] for i in rng.integers(0, 4, size=int(rng.integers(1, 4)))]
        db = [words[i] for i in rng.integers(0, 4, size=int(rng.integers(1, 4)))]
        wa, ma = np.unique(da, return_counts=True)
        wb, mb = np.unique(db, return_counts=True)
        cost = [[float(np.linalg.norm(rows[vocab.word_to_id[x]] - rows[vocab.word_to_id[y]]))
                 for y in wb] for x in wa]
        brute = _enumerate_transport(ma / ma.sum(), mb / mb.sum(), cost)
        ok = ok and abs(wmd(da, db, vectors) - brute) < 1e-9
    check("retrieval.wmd_oracle", ok)

    # metric units
    check("evaluation.distinct1", abs(distinct_n(["ok", "ok", "good"], 1) - 2 / 3) < 1e-12)
    check("evaluation.es_identity",
          abs(embedding_similarity(["a", "b"], ["a", "b"], vectors) - 1.0) < 1e-9)

    failed = [name for name, ok in checks if not ok]
    log(stage="selftest", checks=len(checks), failed=failed)
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reviewqa",
                                     description="review-grounded answer generation pipeline")
    parser.add_argument("command",
                        choices=["prepare", "snippets", "train", "generate", "evaluate", "selftest"])
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--beam", type=int, default=None)
    parser.add_argument("--no-pos", action="store_true", help="drop POS embeddings")
    parser.add_argument("--no-review", action="store_true", help="drop review guidance")
    parser.add_argument("--precision", type=int, choices=[32, 64], default=None)
    parser.add_argument("--answers", default=None, help="answer file for evaluate")
    return parser


def apply_overrides(cfg: dict, args: argparse.Namespace) -> None:
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if args.beam is not None:
        cfg["decode"]["beam"] = args.beam
    if args.no_pos:
        cfg["train"]["use_pos"] = False
    if args.no_review:
        cfg["train"]["use_review"] = False
    if args.precision is not None:
        cfg["train"]["precision"] = args.precision


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        apply_overrides(cfg, args)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "snippets":
            return cmd_snippets(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.answers)
        return cmd_selftest(cfg)
    except Exception as exc:  # one machine-readable line, nonzero exit
        log(error=str(exc), type=type(exc).__name__)
        return 1


if __name__ == "__main__":
    sys.exit(main())
