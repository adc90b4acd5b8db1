"""Question encoder: summed word/tag/position embeddings through stacked gated
convolutions with residual connections, plus a final linear projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .corpus import MAX_SEQ_LEN
from .numerics import Parameter, Tensor


@dataclass
class EncoderParams:
    """Per-layer conv kernel/bias plus the output projection."""
    conv_w: list[Parameter]  # (2d, k*d) each
    conv_b: list[Parameter]  # (2d,) each
    out_w: Parameter         # (d, d), applied as Z @ out_w
    out_b: Parameter         # (d,)
    k: int

    @property
    def n_layers(self) -> int:
        return len(self.conv_w)

    def parameters(self) -> list[Parameter]:
        return [*self.conv_w, *self.conv_b, self.out_w, self.out_b]


def init_encoder(d: int, n_layers: int, k: int, rng: np.random.Generator,
                 dtype=np.float32) -> EncoderParams:
    """Zero biases; kernel entries zero-mean with scale 1/sqrt(k*d)."""
    conv_w, conv_b = [], []
    for layer in range(1, n_layers + 1):
        w = rng.normal(0.0, 1.0 / np.sqrt(k * d), size=(2 * d, k * d))
        conv_w.append(Parameter(f"enc.conv{layer}.W", Tensor(w, dtype=dtype)))
        conv_b.append(Parameter(f"enc.conv{layer}.b", Tensor(np.zeros(2 * d), dtype=dtype)))
    out_w = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
    return EncoderParams(conv_w, conv_b,
                         Parameter("enc.out.W", Tensor(out_w, dtype=dtype)),
                         Parameter("enc.out.b", Tensor(np.zeros(d), dtype=dtype)),
                         k)


def embed(word_ids, tag_ids, positions, word_table: Parameter, pos_table: Parameter,
          position_table: Parameter, use_pos: bool = True) -> Tensor:
    """Per-token representation: word + tag + absolute-position embeddings
    (element-wise sum); the tag term is dropped under the no-POS ablation."""
    positions = np.asarray(positions)
    if positions.size and positions.max() >= position_table.tensor.shape[0]:
        raise nm.ShapeError(
            f"position {positions.max()} beyond table of {position_table.tensor.shape[0]} rows")
    e = nm.gather_rows(word_table.tensor, word_ids)
    if use_pos:
        e = e + nm.gather_rows(pos_table.tensor, tag_ids)
    return e + nm.gather_rows(position_table.tensor, positions)


def encode(e: Tensor, params: EncoderParams) -> Tensor:
    """Stacked gated-conv layers with residuals over the embedded question.

    Each layer pads with zero vectors and convolves a k-token window around
    every position (window i-k/2 .. i+k/2-1 for even k, so length is
    preserved), applies the gated linear unit, and adds the layer input.
    Returns the projected final-layer states, one row per question token.
    """
    k = params.k
    z = e
    for w, b in zip(params.conv_w, params.conv_b):
        conv = nm.conv1d_window(z, w.tensor, b.tensor, k,
                                pad_left=k // 2, pad_right=(k - 1) // 2)
        z = nm.glu(conv) + z
    return nm.matmul(z, params.out_w.tensor) + params.out_b.tensor


def check_length(m: int) -> None:
    if not (1 <= m <= MAX_SEQ_LEN):
        raise nm.ShapeError(f"sequence length {m} outside 1..{MAX_SEQ_LEN}")
