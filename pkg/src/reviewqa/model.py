"""Model assembly: embedding tables, encoder and generator parameters, the
teacher-forced training pass, and the incremental decoding state."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from . import generator as gen
from . import numerics as nm
from .corpus import MAX_SEQ_LEN, START, EmbeddingTable, TaggedToken, Vocabulary
from .numerics import Parameter, Tensor
from .retrieval import WeightedSnippetVocab


@dataclass
class ModelConfig:
    d: int = 300
    enc_layers: int = 4
    dec_layers: int = 4
    k_enc: int = 2
    k_dec: int = 4
    use_pos: bool = True
    use_review: bool = True
    precision: int = 32
    seed: int = 0

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self) -> dict:
        return {"d": self.d, "enc_layers": self.enc_layers, "dec_layers": self.dec_layers,
                "k_enc": self.k_enc, "k_dec": self.k_dec, "use_pos": self.use_pos,
                "use_review": self.use_review, "precision": self.precision, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


class Model:
    """All parameters plus the forward passes the trainer and decoder need."""

    def __init__(self, vocab: Vocabulary, word_table: EmbeddingTable, config: ModelConfig):
        if word_table.rows.shape != (len(vocab), config.d):
            raise nm.ShapeError(
                f"word table {word_table.rows.shape} != (|vocab|={len(vocab)}, d={config.d})")
        self.vocab = vocab
        self.config = config
        dtype = config.dtype
        rng = np.random.default_rng(config.seed)
        self.word_emb = Parameter("emb.word", Tensor(word_table.rows, dtype=dtype),
                                  trainable=False)
        pos_rows = rng.normal(0, 1 / np.sqrt(config.d), (vocab.n_tags, config.d))
        self.pos_emb = Parameter("emb.pos", Tensor(pos_rows, dtype=dtype))
        position_rows = rng.normal(0, 1 / np.sqrt(config.d), (MAX_SEQ_LEN + 1, config.d))
        position_rows[0] = 0.0  # PAD position
        self.position_emb = Parameter("emb.position", Tensor(position_rows, dtype=dtype))
        self.encoder = enc.init_encoder(config.d, config.enc_layers, config.k_enc, rng, dtype)
        self.generator = gen.init_generator(config.d, config.dec_layers, config.k_dec,
                                            len(vocab), rng, dtype)

    def parameters(self) -> list[Parameter]:
        return [self.word_emb, self.pos_emb, self.position_emb,
                *self.encoder.parameters(), *self.generator.parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.tensor.zero_grad()

    # ----- question side -------------------------------------------------

    def embed_question(self, question: Sequence[TaggedToken]) -> Tensor:
        enc.check_length(len(question))
        ids = self.vocab.encode(t.word for t in question)
        tag_ids = self.vocab.encode_tags(t.pos for t in question)
        positions = list(range(1, len(question) + 1))
        return enc.embed(ids, tag_ids, positions, self.word_emb, self.pos_emb,
                         self.position_emb, self.config.use_pos)

    def encode_question(self, question: Sequence[TaggedToken]) -> tuple[Tensor, Tensor]:
        e_x = self.embed_question(question)
        return enc.encode(e_x, self.encoder), e_x

    # ----- answer side ----------------------------------------------------

    def _answer_io(self, answer_words: Sequence[str]) -> tuple[list[int], list[int], list[int], list[int]]:
        """Teacher-forcing inputs and targets.

        Inputs are START + answer words, targets the words + END, both clipped
        to MAX_SEQ_LEN steps (a full-length answer ends by the length cap, so
        no END step is added for it). Tags come from the corpus-level
        dominating tag of each word.
        """
        n = len(answer_words)
        if n > MAX_SEQ_LEN:
            raise nm.ShapeError(f"answer of {n} tokens exceeds {MAX_SEQ_LEN}")
        steps = min(n + 1, MAX_SEQ_LEN)
        input_words = [START] + list(answer_words[:steps - 1])
        in_ids = [self.vocab.start_id] + self.vocab.encode(answer_words[:steps - 1])
        tag_ids = self.vocab.encode_tags(self.vocab.tag_for(w) for w in input_words)
        positions = list(range(1, steps + 1))
        targets = self.vocab.encode(answer_words) + ([self.vocab.end_id] if n < MAX_SEQ_LEN else [])
        return in_ids, tag_ids, positions, targets

    def embed_answer_prefix(self, in_ids: Sequence[int], tag_ids: Sequence[int],
                            positions: Sequence[int]) -> Tensor:
        return enc.embed(list(in_ids), list(tag_ids), list(positions), self.word_emb,
                         self.pos_emb, self.position_emb, self.config.use_pos)

    def forward_train(self, question: Sequence[TaggedToken], answer_words: Sequence[str],
                      weighted_vocab: WeightedSnippetVocab | None) -> tuple[Tensor, np.ndarray]:
        """Per-step next-word log-probabilities under teacher forcing, and the
        gold target ids; all steps are evaluated in parallel."""
        z, e_x = self.encode_question(question)
        in_ids, tag_ids, positions, targets = self._answer_io(answer_words)
        e_y = self.embed_answer_prefix(in_ids, tag_ids, positions)
        magnified = gen.magnified_tensor(weighted_vocab, self.config.dtype) \
            if self.config.use_review else None
        hidden = gen.decoder_forward(e_y, z, e_x, self.generator, magnified)
        return gen.output_log_probs(hidden, self.generator), np.array(targets)

    # ----- incremental decoding -------------------------------------------

    def question_context(self, question: Sequence[TaggedToken],
                         weighted_vocab: WeightedSnippetVocab | None) -> "QuestionContext":
        """Question-side work shared by every decoding step and hypothesis."""
        with nm.no_grad():
            z, e_x = self.encode_question(question)
            magnified = gen.magnified_tensor(weighted_vocab, self.config.dtype) \
                if self.config.use_review else None
        return QuestionContext(z, e_x, magnified)

    def start_state(self, ctx: "QuestionContext") -> "DecoderState":
        return DecoderState(ctx, [])

    def step(self, state: "DecoderState") -> np.ndarray:
        """Log-probabilities of the next word given the state's prefix.

        The prefix is replayed through the same vectorized forward that
        training uses, so the distribution is bit-identical to the matching
        column of a full recomputation.
        """
        words = state.words
        if len(words) >= MAX_SEQ_LEN:
            raise nm.ShapeError(f"prefix already has {len(words)} tokens; emit END")
        in_ids = [self.vocab.start_id] + self.vocab.encode(words)
        tag_ids = self.vocab.encode_tags(
            self.vocab.tag_for(w) for w in [START] + list(words))
        positions = list(range(1, len(words) + 2))
        with nm.no_grad():
            e_y = self.embed_answer_prefix(in_ids, tag_ids, positions)
            hidden = gen.decoder_forward(e_y, state.ctx.z, state.ctx.e_x,
                                         self.generator, state.ctx.magnified)
            logp = gen.output_log_probs(hidden, self.generator)
        return logp.data[-1]


@dataclass
class QuestionContext:
    z: Tensor
    e_x: Tensor
    magnified: Tensor | None


@dataclass
class DecoderState:
    """Generated prefix plus the cached question-side tensors."""
    ctx: QuestionContext
    words: list[str] = field(default_factory=list)

    def extend(self, word: str) -> "DecoderState":
        return DecoderState(self.ctx, self.words + [word])
