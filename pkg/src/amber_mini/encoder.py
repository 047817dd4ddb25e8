"""Miniature pre-norm transformer encoder with asymmetric attention masking.

Supports four mask regimes over a concatenated sentence pair [x; y]:

* FULL      — every position attends everywhere (joint masked-LM encoding)
* TGT2SRC   — x positions attend within x; y position i attends all of x
              plus strictly preceding y positions (decoder-like over x)
* SRC2TGT   — the mirror image (x behaves like a decoder over y)
* SEPARATE  — block-diagonal: each sentence only attends within itself

The per-head post-softmax attention matrices of every layer are exposed so
the word-level agreement loss can differentiate through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .tensor import (MaskError, ShapeError, Tensor, gelu, layer_norm, masked_softmax,
                     matmul)

__all__ = ["ModelConfig", "MaskRegime", "EncoderOutput", "Encoder",
           "build_mask", "cross_attention"]


class MaskRegime(Enum):
    FULL = "full"
    TGT2SRC = "tgt2src"
    SRC2TGT = "src2tgt"
    SEPARATE = "separate"


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn_dim: int = 128
    max_positions: int = 40
    dropout: float = 0.0
    precision: str = "train32"  # "train32" | "test64"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by "
                             f"heads ({self.heads})")
        if self.precision not in ("train32", "test64"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def dtype(self):
        return np.float32 if self.precision == "train32" else np.float64

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "layers": self.layers,
                "heads": self.heads, "hidden": self.hidden,
                "ffn_dim": self.ffn_dim, "max_positions": self.max_positions,
                "dropout": self.dropout, "precision": self.precision}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def build_mask(regime: MaskRegime, len_x: int, len_y: int) -> np.ndarray:
    """Boolean attention mask over the concatenation [x; y].

    Row = query position, column = key position, True = attention allowed.
    Under TGT2SRC a y query sees all of x plus strictly earlier y positions
    (its own position is excluded); SRC2TGT mirrors the roles.
    """
    if len_x < 1:
        raise MaskError("build_mask: source side must be non-empty")
    if len_y < 1 and regime is not MaskRegime.SEPARATE:
        raise MaskError(f"build_mask: {regime.value} needs a non-empty target side")
    n = len_x + len_y
    if regime is MaskRegime.FULL:
        return np.ones((n, n), dtype=bool)
    mask = np.zeros((n, n), dtype=bool)
    if regime is MaskRegime.SEPARATE:
        mask[:len_x, :len_x] = True
        if len_y:
            mask[len_x:, len_x:] = True
        return mask
    if regime is MaskRegime.TGT2SRC:
        mask[:len_x, :len_x] = True
        mask[len_x:, :len_x] = True
        for i in range(len_y):
            mask[len_x + i, len_x:len_x + i] = True
        return mask
    # SRC2TGT: y attends within y, x position j sees all of y plus x_{<j}
    mask[len_x:, len_x:] = True
    mask[:len_x, len_x:] = True
    for j in range(len_x):
        mask[j, :j] = True
    return mask


@dataclass
class EncoderOutput:
    """Per-layer hidden states g^l and per-layer (H, n, n) attention weights."""
    hidden_states: list  # list of Tensor, one per layer; last is the top layer
    attentions: list     # list of Tensor (heads, n, n), post-softmax
    regime: Optional[MaskRegime] = None
    x_span: Optional[tuple] = None  # (start, stop) of x tokens, specials excluded
    y_span: Optional[tuple] = None

    @property
    def top(self) -> Tensor:
        return self.hidden_states[-1]


def cross_attention(out: EncoderOutput, direction: str) -> list:
    """Per-head cross-sentence attention from the top layer, rows renormalized.

    direction "y2x" (requires a TGT2SRC encoding) returns one |y| x |x| row
    stochastic Tensor per head; "x2y" (SRC2TGT) the |x| x |y| analogue.
    Renormalization removes the within-sentence mass a query spent on its
    preceding same-side tokens.
    """
    if direction not in ("y2x", "x2y"):
        raise ValueError(f"cross_attention: unknown direction {direction!r}")
    wanted = MaskRegime.TGT2SRC if direction == "y2x" else MaskRegime.SRC2TGT
    if out.regime is not wanted:
        raise ValueError(f"cross_attention: direction {direction!r} needs a "
                         f"{wanted.value} encoding, got "
                         f"{out.regime.value if out.regime else None}")
    if out.x_span is None or out.y_span is None:
        raise ValueError("cross_attention: encoding carries no sentence spans")
    xs, xe = out.x_span
    ys, ye = out.y_span
    attn = out.attentions[-1]  # (H, n, n)
    heads = attn.shape[0]
    if direction == "y2x":
        rows, cols = (ys, ye), (xs, xe)
    else:
        rows, cols = (xs, xe), (ys, ye)
    result = []
    for h in range(heads):
        block = attn[h, rows[0]:rows[1], cols[0]:cols[1]]
        # the tiny floor only matters when a query's cross-sentence mass
        # underflowed to zero; it keeps the division finite in float32
        denom = block.sum(axis=-1, keepdims=True) + 1e-20
        result.append(block / denom)
    return result


class Encoder:
    """mBERT-shaped encoder scaled to desk size.

    Parameters live in `params`, an insertion-ordered name -> Tensor map;
    the checkpoint writer relies on that ordering.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, f, v = config.hidden, config.ffn_dim, config.vocab_size
        dt = config.dtype

        def param(name, shape, scale=0.02):
            arr = (rng.normal(0.0, scale, size=shape)).astype(dt)
            t = Tensor(arr, requires_grad=True)
            self.params[name] = t
            return t

        def zeros_param(name, shape):
            t = Tensor(np.zeros(shape, dtype=dt), requires_grad=True)
            self.params[name] = t
            return t

        def ones_param(name, shape):
            t = Tensor(np.ones(shape, dtype=dt), requires_grad=True)
            self.params[name] = t
            return t

        param("tok_emb", (v, d))
        param("pos_emb", (config.max_positions, d))
        param("seg_emb", (2, d))
        for l in range(config.layers):
            p = f"layer{l}."
            ones_param(p + "ln1.g", (d,)); zeros_param(p + "ln1.b", (d,))
            param(p + "wq", (d, d)); zeros_param(p + "bq", (d,))
            param(p + "wk", (d, d)); zeros_param(p + "bk", (d,))
            param(p + "wv", (d, d)); zeros_param(p + "bv", (d,))
            param(p + "wo", (d, d)); zeros_param(p + "bo", (d,))
            ones_param(p + "ln2.g", (d,)); zeros_param(p + "ln2.b", (d,))
            param(p + "w1", (d, f)); zeros_param(p + "b1", (f,))
            param(p + "w2", (f, d)); zeros_param(p + "b2", (d,))
        ones_param("ln_f.g", (d,)); zeros_param("ln_f.b", (d,))
        zeros_param("out.b", (v,))

    # -- parameter plumbing --------------------------------------------------

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def set_param(self, name: str, value: np.ndarray):
        """Replace a parameter's storage (used by the optimizer and loaders)."""
        old = self.params[name]
        if old.shape != value.shape:
            raise ShapeError(f"param {name}: shape {value.shape} != {old.shape}")
        t = Tensor(np.asarray(value, dtype=old.dtype), requires_grad=True)
        self.params[name] = t

    # -- forward -------------------------------------------------------------

    def encode(self, tokens, segments, positions, mask: np.ndarray,
               regime: Optional[MaskRegime] = None,
               x_span: Optional[tuple] = None,
               y_span: Optional[tuple] = None,
               dropout_rng: Optional[np.random.Generator] = None) -> EncoderOutput:
        """Run the encoder over one sequence under an explicit attention mask."""
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        segments = np.asarray(segments, dtype=np.int64)
        positions = np.asarray(positions, dtype=np.int64)
        n = len(tokens)
        if not (len(segments) == len(positions) == n):
            raise ShapeError("encode: tokens/segments/positions lengths differ")
        if n > cfg.max_positions:
            raise ValueError(f"encode: sequence length {n} exceeds "
                             f"max_positions {cfg.max_positions}")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (n, n):
            raise ShapeError(f"encode: mask shape {mask.shape} != ({n}, {n})")
        if not mask.any(axis=1).all():
            raise MaskError("encode: a query row allows no key positions")

        p = self.params
        h = p["tok_emb"][tokens] + p["pos_emb"][positions] + p["seg_emb"][segments]
        heads = cfg.heads
        dh = cfg.hidden // heads
        scale = 1.0 / math.sqrt(dh)
        rate = cfg.dropout if dropout_rng is not None else 0.0

        def maybe_dropout(t: Tensor) -> Tensor:
            if rate <= 0.0:
                return t
            keep = (dropout_rng.random(t.shape) >= rate).astype(t.dtype)
            return t * Tensor(keep / (1.0 - rate))

        states = []
        attns = []
        for l in range(cfg.layers):
            pref = f"layer{l}."
            a = layer_norm(h, p[pref + "ln1.g"], p[pref + "ln1.b"])
            q = (matmul(a, p[pref + "wq"]) + p[pref + "bq"]) \
                .reshape(n, heads, dh).transpose(1, 0, 2)
            k = (matmul(a, p[pref + "wk"]) + p[pref + "bk"]) \
                .reshape(n, heads, dh).transpose(1, 0, 2)
            vv = (matmul(a, p[pref + "wv"]) + p[pref + "bv"]) \
                .reshape(n, heads, dh).transpose(1, 0, 2)
            scores = matmul(q, k.swapaxes(-1, -2)) * scale
            probs = masked_softmax(scores, mask[None, :, :])
            attns.append(probs)
            ctx = matmul(probs, vv).transpose(1, 0, 2).reshape(n, cfg.hidden)
            h = h + maybe_dropout(matmul(ctx, p[pref + "wo"]) + p[pref + "bo"])
            ff_in = layer_norm(h, p[pref + "ln2.g"], p[pref + "ln2.b"])
            ff = matmul(gelu(matmul(ff_in, p[pref + "w1"]) + p[pref + "b1"]),
                        p[pref + "w2"]) + p[pref + "b2"]
            h = h + maybe_dropout(ff)
            if l == cfg.layers - 1:
                h = layer_norm(h, p["ln_f.g"], p["ln_f.b"])
            states.append(h)

        return EncoderOutput(hidden_states=states, attentions=attns,
                             regime=regime, x_span=x_span, y_span=y_span)

    def logits(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits for a (n, d) block of hidden states.

        The output projection is tied to the token embedding table, so the
        masked-LM objective shapes the same vectors the input layer reads.
        """
        return matmul(hidden, self.params["tok_emb"].transpose(1, 0)) \
            + self.params["out.b"]
