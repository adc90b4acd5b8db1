"""Training: regularized NLL loss, Nesterov accelerated gradient with global
norm clipping, validation-based early stopping, and exact checkpoint I/O."""

from __future__ import annotations

import base64
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .corpus import Dataset, EmbeddingTable, QAPair, Vocabulary
from .model import Model, ModelConfig
from .numerics import Parameter, Tensor
from .retrieval import SnippetSet, WeightedSnippetVocab, WordVectors, snippet_word_weights


@dataclass
class TrainConfig:
    batch_size: int = 64
    d: int = 300
    enc_layers: int = 4
    dec_layers: int = 4
    k_enc: int = 2
    k_dec: int = 4
    l2_coeff: float = 0.001
    learning_rate: float = 0.25
    momentum: float = 0.99
    clip_norm: float | None = 5.0
    max_epochs: int = 50
    patience: int = 5
    val_size: int = 1000
    seed: int = 0
    use_pos: bool = True
    use_review: bool = True
    precision: int = 32

    def model_config(self) -> ModelConfig:
        return ModelConfig(d=self.d, enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                           k_enc=self.k_enc, k_dec=self.k_dec, use_pos=self.use_pos,
                           use_review=self.use_review, precision=self.precision, seed=self.seed)

    def to_dict(self) -> dict:
        return dict(vars(self))

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint was preserved."""


def batch_loss(pairs: Sequence[QAPair], model: Model,
               weighted_vocabs: dict[str, WeightedSnippetVocab | None],
               l2_coeff: float) -> tuple[Tensor, float, int]:
    """Mean per-token NLL over the batch plus l2_coeff * sum(theta^2) over
    trainable parameters (no 1/2 factor). Returns (loss node, nll, tokens)."""
    if not pairs:
        raise ValueError("batch_loss needs a non-empty batch")
    total_nll: Tensor | None = None
    tokens = 0
    batch_ids = ", ".join(p.pair_id for p in pairs)
    for pair in pairs:
        try:
            logp, targets = model.forward_train(pair.question,
                                                [t.word for t in pair.answer],
                                                weighted_vocabs.get(pair.pair_id))
        except nm.NumericError as exc:
            raise nm.NumericError(f"non-finite forward on batch [{batch_ids}] "
                                  f"at {pair.pair_id}: {exc}") from exc
        picked = nm.tsum(nm.pick(logp, targets))
        total_nll = picked if total_nll is None else total_nll + picked
        tokens += len(targets)
    loss = nm.mul_const(total_nll, -1.0 / tokens)
    nll = loss.item()
    if l2_coeff:
        penalty: Tensor | None = None
        for p in model.trainable_parameters():
            sq = nm.tsum(nm.mul(p.tensor, p.tensor))
            penalty = sq if penalty is None else penalty + sq
        loss = loss + nm.mul_const(penalty, l2_coeff)
    if not np.isfinite(loss.item()):
        raise nm.NumericError(
            f"non-finite loss on batch [{batch_ids}]: nll={nll}, loss={loss.item()}")
    return loss, nll, tokens


def clip_gradients(params: Sequence[Parameter], max_norm: float | None) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    grads = [p.tensor.grad for p in params if p.trainable and p.tensor.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm is not None and norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= g.dtype.type(scale)
    return norm


def nesterov_step(params: Sequence[Parameter], grads: dict[str, np.ndarray],
                  velocity: dict[str, np.ndarray], lr: float, momentum: float
                  ) -> tuple[Sequence[Parameter], dict[str, np.ndarray]]:
    """Nesterov update, look-ahead form applied at the parameters:
    v <- mu*v - lr*g; theta <- theta + mu*v - lr*g. The gradient is the one
    evaluated at the current theta (which already carries the look-ahead), so
    mu=0 reduces to plain gradient descent."""
    for p in params:
        if not p.trainable or p.name not in grads:
            continue
        g = grads[p.name]
        v = velocity.get(p.name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v - lr * g
        velocity[p.name] = v
        p.tensor.data = p.data + momentum * v - lr * g
    return params, velocity


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: ModelConfig
    train_config: dict
    vocab_hash: str
    epoch: int
    val_loss: float

    def save(self, path: str | Path) -> None:
        """JSON with base64-encoded little-endian array bytes; bit-exact."""
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "vocab_hash": self.vocab_hash,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "params": {
                name: {"dtype": str(arr.dtype), "shape": list(arr.shape),
                       "data": base64.b64encode(np.ascontiguousarray(arr).tobytes()).decode()}
                for name, arr in self.params.items()
            },
        }
        Path(path).write_text(json.dumps(payload))

    @staticmethod
    def load(path: str | Path) -> "Checkpoint":
        payload = json.loads(Path(path).read_text())
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('format_version')}")
        params = {}
        for name, spec in payload["params"].items():
            arr = np.frombuffer(base64.b64decode(spec["data"]), dtype=spec["dtype"])
            params[name] = arr.reshape(spec["shape"]).copy()
        return Checkpoint(params, ModelConfig.from_dict(payload["model_config"]),
                          payload["train_config"], payload["vocab_hash"],
                          payload["epoch"], payload["val_loss"])

    def restore(self, vocab: Vocabulary) -> Model:
        """Rebuild the model; forward outputs reproduce bit-identically."""
        if vocab.content_hash() != self.vocab_hash:
            raise ValueError("checkpoint was trained with a different vocabulary")
        word = EmbeddingTable(self.params["emb.word"].astype(np.float64), "word", False)
        m = Model(vocab, word, self.model_config)
        for p in m.parameters():
            stored = self.params[p.name]
            if stored.shape != p.data.shape:
                raise ValueError(f"checkpoint param {p.name} has shape {stored.shape}, "
                                 f"expected {p.data.shape}")
            p.tensor.data = stored.astype(self.model_config.dtype).copy()
        return m


def snapshot_params(model: Model) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.parameters()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best validation loss
    history: list[dict] = field(default_factory=list)
    diverged: bool = False
    final_params: dict[str, np.ndarray] = field(default_factory=dict)


def build_weighted_vocabs(snippet_sets: dict[str, SnippetSet],
                          vectors: WordVectors) -> dict[str, WeightedSnippetVocab | None]:
    """One WeightedSnippetVocab per non-excluded pair (None when excluded)."""
    out: dict[str, WeightedSnippetVocab | None] = {}
    for pid, ss in snippet_sets.items():
        out[pid] = None if ss.excluded or not ss.snippets else snippet_word_weights(ss, vectors)
    return out


def validation_loss(model: Model, pairs: Sequence[QAPair],
                    weighted_vocabs: dict[str, WeightedSnippetVocab | None]) -> float:
    """Mean per-token NLL (no regularizer) in a fixed order."""
    total, tokens = 0.0, 0
    with nm.no_grad():
        for pair in pairs:
            logp, targets = model.forward_train(pair.question,
                                                [t.word for t in pair.answer],
                                                weighted_vocabs.get(pair.pair_id))
            total -= float(logp.data[np.arange(len(targets)), targets].sum())
            tokens += len(targets)
    return total / tokens


def train(dataset: Dataset, vocab: Vocabulary, word_table: EmbeddingTable,
          snippet_sets: dict[str, SnippetSet], config: TrainConfig,
          log_path: str | Path | None = None, quiet: bool = True) -> TrainResult:
    """Optimize until `patience` epochs pass without validation improvement or
    max_epochs is hit; the best-validation parameters form the checkpoint.
    Pairs flagged excluded by retrieval are dropped, matching the data rules.
    """
    vectors = WordVectors(vocab, word_table)
    weighted = build_weighted_vocabs(snippet_sets, vectors)

    def usable(p: QAPair) -> bool:
        ss = snippet_sets.get(p.pair_id)
        return ss is not None and not ss.excluded

    train_pairs = [p for p in dataset.pairs_in("train") if usable(p)]
    val_pairs = [p for p in dataset.pairs_in("validation") if usable(p)]
    if not train_pairs:
        raise ValueError("no usable training pairs (all excluded or missing snippets)")
    if not val_pairs:
        rng = np.random.default_rng(config.seed)
        n_val = min(config.val_size, max(1, len(train_pairs) // 5))
        idx = rng.permutation(len(train_pairs))[:n_val]
        val_pairs = [train_pairs[i] for i in idx]

    model = Model(vocab, word_table, config.model_config())
    velocity: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(config.seed + 1)
    history: list[dict] = []
    # epoch-0 baseline so divergence always leaves a good checkpoint behind
    best = (validation_loss(model, val_pairs, weighted), snapshot_params(model), 0)
    stale = 0
    diverged = False
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_pairs))
            epoch_losses, epoch_nlls, epoch_tokens = [], [], []
            try:
                for lo in range(0, len(order), config.batch_size):
                    batch = [train_pairs[i] for i in order[lo:lo + config.batch_size]]
                    model.zero_grads()
                    loss, nll, n_tok = batch_loss(batch, model, weighted, config.l2_coeff)
                    nm.backward(loss)
                    clip_gradients(model.parameters(), config.clip_norm)
                    grads = {p.name: p.tensor.grad for p in model.trainable_parameters()
                             if p.tensor.grad is not None}
                    nesterov_step(model.parameters(), grads, velocity,
                                  config.learning_rate, config.momentum)
                    epoch_losses.append(loss.item())
                    epoch_nlls.append(nll * n_tok)
                    epoch_tokens.append(n_tok)
            except nm.NumericError:
                diverged = True
            if not diverged:
                try:
                    val = validation_loss(model, val_pairs, weighted)
                except nm.NumericError:
                    diverged = True
                    val = float("nan")
            else:
                val = float("nan")
            entry = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                     "train_nll": float(np.sum(epoch_nlls) / np.sum(epoch_tokens)) if epoch_tokens else float("nan"),
                     "val_loss": val, "seconds": time.perf_counter() - t0}
            history.append(entry)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
            if not quiet:
                print(json.dumps(entry))
            if diverged:
                break
            if val < best[0]:
                best = (val, snapshot_params(model), epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if log_file:
            log_file.close()

    val_loss, params, epoch = best
    ckpt = Checkpoint(params, config.model_config(), config.to_dict(),
                      vocab.content_hash(), epoch, val_loss)
    return TrainResult(ckpt, history, diverged, snapshot_params(model))
