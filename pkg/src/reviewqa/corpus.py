"""Corpus ingestion: tokenize-and-tag records, filters, vocabularies, embeddings.

Also builds the synthetic desk-scale corpus used by the pipeline tests: products
carry latent aspect->polarity facts, questions ask about aspects, and reviews
verbalize the facts among distractor clauses.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

MIN_QA_TOKENS = 4
MAX_QA_TOKENS = 40
MIN_REVIEW_TOKENS = 10
MAX_SEQ_LEN = 40

PAD, START, END, UNK = "<pad>", "<s>", "</s>", "<unk>"
TAG_PAD, TAG_UNK = "<pad>", "<unk>"


class CorpusError(ValueError):
    """Malformed corpus input."""


class EmptyDatasetError(CorpusError):
    """Every record was filtered out."""


class EmbeddingFormatError(CorpusError):
    """Embedding file disagrees with the configured dimension or format."""


@dataclass(slots=True)
class TaggedToken:
    word: str
    pos: str


@dataclass(slots=True)
class QAPair:
    pair_id: str
    product_id: str
    question: list[TaggedToken]
    answer: list[TaggedToken]
    split: str  # train | validation | test


@dataclass(slots=True)
class Review:
    review_id: str
    product_id: str
    tokens: list[TaggedToken]


@dataclass
class Dataset:
    pairs: list[QAPair]
    reviews: list[Review]

    def pairs_in(self, split: str) -> list[QAPair]:
        return [p for p in self.pairs if p.split == split]

    def reviews_of(self, product_id: str) -> list[Review]:
        return [r for r in self.reviews if r.product_id == product_id]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "pairs.jsonl", "w") as f:
            for p in self.pairs:
                f.write(json.dumps({
                    "pair_id": p.pair_id,
                    "product_id": p.product_id,
                    "question": [t.word for t in p.question],
                    "question_tags": [t.pos for t in p.question],
                    "answer": [t.word for t in p.answer],
                    "answer_tags": [t.pos for t in p.answer],
                    "split": p.split,
                }) + "\n")
        with open(directory / "reviews.jsonl", "w") as f:
            for r in self.reviews:
                f.write(json.dumps({
                    "review_id": r.review_id,
                    "product_id": r.product_id,
                    "tokens": [t.word for t in r.tokens],
                    "tags": [t.pos for t in r.tokens],
                }) + "\n")

    @staticmethod
    def load(directory: str | Path) -> "Dataset":
        directory = Path(directory)
        pairs, reviews = [], []
        for rec in _read_jsonl(directory / "pairs.jsonl"):
            pairs.append(QAPair(
                pair_id=rec["pair_id"], product_id=rec["product_id"],
                question=[TaggedToken(w, t) for w, t in zip(rec["question"], rec["question_tags"])],
                answer=[TaggedToken(w, t) for w, t in zip(rec["answer"], rec["answer_tags"])],
                split=rec["split"]))
        for rec in _read_jsonl(directory / "reviews.jsonl"):
            reviews.append(Review(
                review_id=rec["review_id"], product_id=rec["product_id"],
                tokens=[TaggedToken(w, t) for w, t in zip(rec["tokens"], rec["tags"])]))
        return Dataset(pairs, reviews)


def _read_jsonl(path: str | Path) -> Iterable[dict]:
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def read_raw_records(qa_path: str | Path, reviews_path: str | Path) -> list[dict]:
    """Raw corpus files: one JSON object per line (QA or review records)."""
    records = list(_read_jsonl(qa_path))
    records.extend(_read_jsonl(reviews_path))
    return records


# ---------------------------------------------------------------------------
# Tagging
# ---------------------------------------------------------------------------

Tagger = Callable[[str], list[TaggedToken]]

_BASE_LEXICON = {
    "the": "DT", "a": "DT", "an": "DT", "this": "DT", "that": "DT",
    "is": "VB", "are": "VB", "was": "VB", "be": "VB", "seems": "VB", "looks": "VB",
    "how": "WRB", "what": "WP", "does": "VB", "do": "VB",
    "of": "IN", "on": "IN", "in": "IN", "for": "IN", "with": "IN",
    "it": "PR", "my": "PR", "i": "PR",
    "good": "JJ", "bad": "JJ", "very": "RB", "really": "RB", "quite": "RB",
    "and": "CC", "or": "CC", "not": "RB", "have": "VB",
}


def make_rule_tagger(lexicon: dict[str, str] | None = None, default_tag: str = "NN") -> Tagger:
    """Whitespace tokenizer plus a lookup tagger; real taggers plug in behind
    the same text -> TaggedToken list interface."""
    table = dict(_BASE_LEXICON)
    if lexicon:
        table.update(lexicon)

    def tag(text: str) -> list[TaggedToken]:
        return [TaggedToken(w, table.get(w, default_tag)) for w in text.split()]

    return tag


default_tagger = make_rule_tagger()


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def preprocess(raw_records: Iterable[dict], tagger: Tagger = default_tagger) -> Dataset:
    """Tokenize and filter, in order: tag everything; drop short reviews; drop
    out-of-length QA pairs; keep only the longest answer per question."""
    reviews: list[Review] = []
    qa_candidates: list[tuple[str, list[TaggedToken], list[TaggedToken], str]] = []
    for rec in raw_records:
        if "text" in rec:
            tokens = tagger(rec["text"])
            if len(tokens) >= MIN_REVIEW_TOKENS:
                reviews.append(Review(f"r{len(reviews):05d}", rec["product_id"], tokens))
        elif "question" in rec:
            q = tagger(rec["question"])
            a = tagger(rec["answer"])
            if MIN_QA_TOKENS <= len(q) <= MAX_QA_TOKENS and MIN_QA_TOKENS <= len(a) <= MAX_QA_TOKENS:
                qa_candidates.append((rec["product_id"], q, a, rec.get("split", "train")))
        else:
            raise CorpusError(f"record is neither QA nor review: {sorted(rec)}")

    # one pair per question: the longest surviving answer wins (first on ties)
    best: dict[tuple[str, tuple[str, ...]], tuple[str, list[TaggedToken], list[TaggedToken], str]] = {}
    order: list[tuple[str, tuple[str, ...]]] = []
    for cand in qa_candidates:
        key = (cand[0], tuple(t.word for t in cand[1]))
        if key not in best:
            best[key] = cand
            order.append(key)
        elif len(cand[2]) > len(best[key][2]):
            best[key] = cand

    pairs = [QAPair(f"pair{i:05d}", pid, q, a, split)
             for i, (pid, q, a, split) in enumerate(best[k] for k in order)]
    if not pairs and not reviews:
        raise EmptyDatasetError("no records survived preprocessing")
    return Dataset(pairs, reviews)


def dominating_tags(dataset: Dataset) -> dict[str, str]:
    """Most frequent tag per word over the whole training collection
    (train/validation pairs plus their products' reviews); ties break to the
    lexicographically smallest tag."""
    counts: dict[str, Counter] = defaultdict(Counter)
    train_products = set()
    for p in dataset.pairs:
        if p.split == "test":
            continue
        train_products.add(p.product_id)
        for tok in p.question + p.answer:
            counts[tok.word][tok.pos] += 1
    for r in dataset.reviews:
        if r.product_id in train_products:
            for tok in r.tokens:
                counts[tok.word][tok.pos] += 1
    return {w: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for w, c in counts.items()}


def dominating_pos(word: str, dataset: Dataset) -> str:
    """Dominating tag of `word` in the collection; UNK tag for unseen words."""
    return dominating_tags(dataset).get(word, TAG_UNK)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocabulary:
    """word<->id and tag<->id bijections with stable reserved ids."""

    RESERVED = [PAD, START, END, UNK]
    RESERVED_TAGS = [TAG_PAD, TAG_UNK]

    def __init__(self, words: Sequence[str], tags: Sequence[str],
                 dominating_tag: dict[str, str] | None = None):
        self.words = list(self.RESERVED) + [w for w in words if w not in self.RESERVED]
        self.tags = list(self.RESERVED_TAGS) + [t for t in tags if t not in self.RESERVED_TAGS]
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.tag_to_id = {t: i for i, t in enumerate(self.tags)}
        self.dominating_tag = dict(dominating_tag or {})

    pad_id, start_id, end_id, unk_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.words)

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.word_to_id.get(w, self.unk_id) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def encode_tags(self, tags: Iterable[str]) -> list[int]:
        unk = self.tag_to_id[TAG_UNK]
        return [self.tag_to_id.get(t, unk) for t in tags]

    def tag_for(self, word: str) -> str:
        """Decoder-side tag: the corpus-level dominating tag, UNK if unseen."""
        return self.dominating_tag.get(word, TAG_UNK)

    def to_dict(self) -> dict:
        return {"format_version": 1, "words": self.words, "tags": self.tags,
                "dominating_tag": self.dominating_tag}

    @staticmethod
    def from_dict(d: dict) -> "Vocabulary":
        v = Vocabulary([], [], d.get("dominating_tag"))
        v.words = list(d["words"])
        v.tags = list(d["tags"])
        v.word_to_id = {w: i for i, w in enumerate(v.words)}
        v.tag_to_id = {t: i for i, t in enumerate(v.tags)}
        return v

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @staticmethod
    def load(path: str | Path) -> "Vocabulary":
        return Vocabulary.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_vocabulary(dataset: Dataset, min_freq: int = 1) -> Vocabulary:
    """Vocabulary over the training collection; words under min_freq map to UNK."""
    freq: Counter = Counter()
    tagset: set[str] = set()
    train_products = set()
    for p in dataset.pairs:
        if p.split == "test":
            continue
        train_products.add(p.product_id)
        for tok in p.question + p.answer:
            freq[tok.word] += 1
            tagset.add(tok.pos)
    for r in dataset.reviews:
        if r.product_id in train_products:
            for tok in r.tokens:
                freq[tok.word] += 1
                tagset.add(tok.pos)
    words = sorted(w for w, c in freq.items() if c >= min_freq)
    return Vocabulary(words, sorted(tagset), dominating_tags(dataset))


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    rows: np.ndarray  # (|vocab|, d)
    kind: str  # word | pos | position
    trainable: bool


def seeded_vector(word: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudorandom unit vector for a word missing from the
    embedding file. Components are nonnegative so cosine similarities between
    seeded vectors stay positive."""
    digest = hashlib.sha256(word.encode()).digest()
    entropy = (seed, int.from_bytes(digest[:8], "little"))
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    v = rng.uniform(0.05, 1.0, size=dim)
    return v / np.linalg.norm(v)


def load_embeddings(path: str | Path | None, vocab: Vocabulary, dim: int,
                    seed: int = 0) -> EmbeddingTable:
    """Word table from a textual embedding file: header "<V> <d>", then one
    line per word. Vocabulary words absent from the file get seeded vectors;
    the PAD row is zero. Pass path=None for an all-seeded table."""
    loaded: dict[str, np.ndarray] = {}
    if path is not None:
        with open(path) as f:
            header = f.readline().split()
            if len(header) != 2:
                raise EmbeddingFormatError(f"{path}:1: expected '<V> <d>' header")
            n_words, file_dim = int(header[0]), int(header[1])
            if file_dim != dim:
                raise EmbeddingFormatError(
                    f"{path}: file dimension {file_dim} != configured dimension {dim}")
            for lineno, line in enumerate(f, start=2):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise EmbeddingFormatError(f"{path}:{lineno}: expected word + {dim} floats")
                loaded[parts[0]] = np.array([float(x) for x in parts[1:]])
            if len(loaded) != n_words:
                raise EmbeddingFormatError(
                    f"{path}: header declares {n_words} words, found {len(loaded)}")
    rows = np.zeros((len(vocab), dim))
    for i, w in enumerate(vocab.words):
        if w == PAD:
            continue
        rows[i] = loaded.get(w) if w in loaded else seeded_vector(w, dim, seed)
    return EmbeddingTable(rows=rows, kind="word", trainable=False)


def write_embeddings(path: str | Path, words: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(f"{len(words)} {matrix.shape[1]}\n")
        for w, row in zip(words, matrix):
            f.write(w + " " + " ".join(f"{x:.6f}" for x in row) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

ASPECTS: dict[str, tuple[str, str]] = {
    "battery": ("long", "weak"),
    "screen": ("bright", "dull"),
    "camera": ("sharp", "blurry"),
    "sound": ("loud", "muffled"),
    "handle": ("sturdy", "loose"),
    "casing": ("smooth", "scratchy"),
}

_QUESTION_TEMPLATES = [
    "how is the {aspect} of {prod}",
    "is the {aspect} of {prod} good",
    "what about the {aspect} on {prod}",
    "does {prod} have a good {aspect}",
]

# Product-blind questions: the same question text recurs across products with
# different answers, so the answer is determined only by the product's reviews.
_BLIND_QUESTION_TEMPLATES = [
    "how is the {aspect} here",
    "is the {aspect} any good",
    "what about the {aspect} overall",
    "does it have a good {aspect}",
]

_FACT_TEMPLATES = [
    "the {aspect} is really {polarity}",
    "the {aspect} is {polarity} indeed",
]

_DISTRACTORS = [
    "arrived on tuesday in plain packaging",
    "my cousin ordered another unit yesterday",
    "delivery courier was polite and punctual",
    "box corner looked slightly dented overall",
    "seller answered my message within hours",
    "coupon made checkout marginally cheaper today",
    "manual included several translated language sections",
    "warranty card fell out while unpacking",
]

SYNTH_LEXICON: dict[str, str] = {
    **{a: "NN" for a in ASPECTS},
    **{p: "JJ" for pair in ASPECTS.values() for p in pair},
    "here": "RB", "arrived": "VB", "tuesday": "NN", "plain": "JJ",
    "packaging": "NN", "cousin": "NN", "ordered": "VB", "another": "DT",
    "unit": "NN", "yesterday": "RB", "delivery": "NN", "courier": "NN",
    "polite": "JJ", "punctual": "JJ", "box": "NN", "corner": "NN",
    "looked": "VB", "slightly": "RB", "dented": "JJ", "seller": "NN",
    "answered": "VB", "message": "NN", "within": "IN", "hours": "NN",
    "coupon": "NN", "made": "VB", "checkout": "NN", "marginally": "RB",
    "cheaper": "JJ", "today": "RB", "manual": "NN", "included": "VB",
    "several": "JJ", "translated": "JJ", "language": "NN", "sections": "NN",
    "warranty": "NN", "card": "NN", "fell": "VB", "out": "IN",
    "while": "IN", "unpacking": "VB", "about": "IN", "any": "DT",
    "overall": "RB", "indeed": "RB",
}


@dataclass
class SynthCorpus:
    qa_records: list[dict]
    review_records: list[dict]
    lexicon: dict[str, str] = field(default_factory=dict)
    facts: dict[str, dict[str, str]] = field(default_factory=dict)  # product -> aspect -> polarity

    def records(self) -> list[dict]:
        return self.qa_records + self.review_records


def synth_corpus(seed: int, n_products: int, n_pairs: int, n_reviews: int,
                 aspects_per_product: int = 3,
                 product_in_question: bool = True) -> SynthCorpus:
    """Deterministic templated corpus. Products on the tail of the id range are
    reserved for the test split, so test questions concern products whose facts
    appear only in reviews, never in training answers. Every product aspect is
    verbalized by n_reviews reviews (so each pair has >= 2 fact-bearing reviews
    whenever n_reviews >= 2). With product_in_question off, questions never
    name the product and the answer follows from the reviews alone."""
    if min(n_products, n_pairs, n_reviews) < 1:
        raise ValueError("synth_corpus sizes must be >= 1")
    rng = np.random.default_rng(seed)
    aspect_names = list(ASPECTS)
    templates = _QUESTION_TEMPLATES if product_in_question else _BLIND_QUESTION_TEMPLATES
    n_test_products = max(1, round(n_products * 0.2)) if n_products > 1 else 0
    products = [f"prod{i:03d}" for i in range(n_products)]
    test_products = set(products[n_products - n_test_products:])

    facts: dict[str, dict[str, str]] = {}
    for prod in products:
        chosen = rng.permutation(aspect_names)[:aspects_per_product]
        facts[prod] = {a: ASPECTS[a][int(rng.integers(2))] for a in sorted(chosen)}

    # (product, aspect, template) triples cycle so every question is unique
    # within its product
    capacity = n_products * aspects_per_product * len(templates)
    if n_pairs > capacity:
        raise ValueError(f"n_pairs={n_pairs} exceeds {capacity} distinct questions")
    qa_records = []
    train_seen = 0
    for i in range(n_pairs):
        prod = products[i % n_products]
        aspect_list = sorted(facts[prod])
        aspect = aspect_list[(i // n_products) % len(aspect_list)]
        polarity = facts[prod][aspect]
        template = templates[(i // (n_products * aspects_per_product)) % len(templates)]
        question = template.format(aspect=aspect, prod=prod)
        answer = f"the {aspect} is {polarity}"
        if prod in test_products:
            split = "test"
        else:
            split = "validation" if train_seen % 8 == 7 else "train"
            train_seen += 1
        qa_records.append({"product_id": prod, "question": question,
                           "answer": answer, "split": split})

    # One fact clause per review (n_reviews per product aspect) plus distractor
    # filler, so window scores split cleanly around the calibrated threshold:
    # matching-aspect windows score low, distractor/other-aspect windows high.
    review_records = []
    for prod in products:
        for aspect, polarity in facts[prod].items():
            for _ in range(n_reviews):
                fact = _FACT_TEMPLATES[int(rng.integers(len(_FACT_TEMPLATES)))].format(
                    aspect=aspect, polarity=polarity)
                filler = _DISTRACTORS[int(rng.integers(len(_DISTRACTORS)))]
                first_fact = bool(rng.integers(2))
                text = f"{fact} {filler}" if first_fact else f"{filler} {fact}"
                review_records.append({"product_id": prod, "text": text})

    lexicon = dict(SYNTH_LEXICON)
    lexicon.update({p: "NN" for p in products})
    return SynthCorpus(qa_records, review_records, lexicon, facts)
