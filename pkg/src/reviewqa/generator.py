"""Answer generator: causal gated convolutions, per-layer question attention,
and gated injection of weighted review-snippet words.

Teacher-forced training evaluates every time step in one pass per layer; the
incremental decoding state reuses the question-side work and replays the
prefix through the same vectorized path, so step outputs match a full
recomputation bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .corpus import MAX_SEQ_LEN
from .numerics import Parameter, Tensor
from .retrieval import WeightedSnippetVocab


@dataclass
class GeneratorLayer:
    conv_w: Parameter   # (2d, k*d)
    conv_b: Parameter   # (2d,)
    attn_w: Parameter   # (d, d)
    attn_b: Parameter   # (d,)
    gate_w1: Parameter  # (3d, d)
    gate_b1: Parameter  # (d,)
    gate_w2: Parameter  # (d, 1)
    gate_b2: Parameter  # (1,)

    def parameters(self) -> list[Parameter]:
        return [self.conv_w, self.conv_b, self.attn_w, self.attn_b,
                self.gate_w1, self.gate_b1, self.gate_w2, self.gate_b2]


@dataclass
class GeneratorParams:
    layers: list[GeneratorLayer]
    out_w: Parameter  # (d, |vocab|)
    out_b: Parameter  # (|vocab|,)
    k: int

    def parameters(self) -> list[Parameter]:
        ps: list[Parameter] = []
        for layer in self.layers:
            ps.extend(layer.parameters())
        ps.extend([self.out_w, self.out_b])
        return ps


def init_generator(d: int, n_layers: int, k: int, vocab_size: int,
                   rng: np.random.Generator, dtype=np.float32) -> GeneratorParams:
    layers = []
    for i in range(1, n_layers + 1):
        layers.append(GeneratorLayer(
            conv_w=Parameter(f"dec.conv{i}.W", Tensor(rng.normal(0, 1 / np.sqrt(k * d), (2 * d, k * d)), dtype=dtype)),
            conv_b=Parameter(f"dec.conv{i}.b", Tensor(np.zeros(2 * d), dtype=dtype)),
            attn_w=Parameter(f"dec.attn{i}.W", Tensor(rng.normal(0, 1 / np.sqrt(d), (d, d)), dtype=dtype)),
            attn_b=Parameter(f"dec.attn{i}.b", Tensor(np.zeros(d), dtype=dtype)),
            gate_w1=Parameter(f"dec.gate{i}.W1", Tensor(rng.normal(0, 1 / np.sqrt(3 * d), (3 * d, d)), dtype=dtype)),
            gate_b1=Parameter(f"dec.gate{i}.b1", Tensor(np.zeros(d), dtype=dtype)),
            gate_w2=Parameter(f"dec.gate{i}.W2", Tensor(rng.normal(0, 1 / np.sqrt(d), (d, 1)), dtype=dtype)),
            gate_b2=Parameter(f"dec.gate{i}.b2", Tensor(np.zeros(1), dtype=dtype)),
        ))
    out_w = Parameter("dec.out.W", Tensor(rng.normal(0, 1 / np.sqrt(d), (d, vocab_size)), dtype=dtype))
    out_b = Parameter("dec.out.b", Tensor(np.zeros(vocab_size), dtype=dtype))
    return GeneratorParams(layers, out_w, out_b, k)


def question_attention(h: Tensor, e_y: Tensor, z: Tensor, e_x: Tensor,
                       layer: GeneratorLayer) -> tuple[Tensor, Tensor]:
    """Attention of each decoder step over question positions.

    d_j = W h_j + b + e_{y_j}; weights softmax over dot products with encoder
    outputs; context sums encoder outputs plus question embeddings.
    Returns (context (T, d), weights (T, m)).
    """
    d = nm.matmul(h, layer.attn_w.tensor) + layer.attn_b.tensor + e_y
    weights = nm.softmax(nm.matmul(d, nm.transpose(z)))
    context = nm.matmul(weights, z + e_x)
    return context, weights


def review_injection(h: Tensor, c: Tensor, magnified: Tensor,
                     layer: GeneratorLayer) -> tuple[Tensor, Tensor, Tensor]:
    """Blend the question context with a review summary through a learned gate.

    Attention over the magnified snippet-word embeddings (driven by the
    question context) yields a per-step review summary o; a two-layer MLP on
    (h, c, o) emits a scalar gate in (0,1); the state update interpolates
    h + g*c + (1-g)*o. Returns (updated h, gate (T,1), summary (T,d)).
    """
    weights = nm.softmax(nm.matmul(c, nm.transpose(magnified)))
    o = nm.matmul(weights, magnified)
    hid = nm.tanh(nm.matmul(nm.concat([h, c, o], axis=1), layer.gate_w1.tensor)
                  + layer.gate_b1.tensor)
    g = nm.sigmoid(nm.matmul(hid, layer.gate_w2.tensor) + layer.gate_b2.tensor)
    one_minus_g = nm.add_const(nm.mul_const(g, -1.0), 1.0)
    return h + g * c + one_minus_g * o, g, o


def decoder_forward(e_y: Tensor, z: Tensor, e_x: Tensor, params: GeneratorParams,
                    magnified: Tensor | None) -> Tensor:
    """Hidden states for every decoder position in parallel (teacher forcing).

    Per layer: causal conv over the k most recent positions (k-1 zero vectors
    padded on the left), GLU, question attention, review injection (or the
    plain h+c update when no snippet vocabulary is given), then a residual
    from the layer input.
    """
    x = e_y
    for layer in params.layers:
        conv = nm.conv1d_window(x, layer.conv_w.tensor, layer.conv_b.tensor,
                                params.k, pad_left=params.k - 1, pad_right=0)
        h = nm.glu(conv)
        c, _ = question_attention(h, e_y, z, e_x, layer)
        if magnified is not None:
            h, _, _ = review_injection(h, c, magnified, layer)
        else:
            h = h + c
        x = h + x
    return x


def output_log_probs(hidden: Tensor, params: GeneratorParams) -> Tensor:
    """Per-step next-word log-probabilities."""
    return nm.log_softmax(nm.matmul(hidden, params.out_w.tensor) + params.out_b.tensor)


def magnified_tensor(weighted_vocab: WeightedSnippetVocab | None, dtype) -> Tensor | None:
    """Constant tensor of magnified snippet-word embeddings; None when the
    vocabulary is empty or absent (callers fall back to the review-free path)."""
    if weighted_vocab is None or len(weighted_vocab) == 0:
        return None
    return Tensor(weighted_vocab.magnified, dtype=dtype)
