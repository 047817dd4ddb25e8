"""Training objectives: masked-LM, sentence alignment, word alignment.

All loss functions return scalar Tensors wired into the differentiation
tape, so a single backward() call yields gradients for every enabled
objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import corpus as corpus_mod
from .corpus import MASK, Batch, PairEncoding, SentencePair, encode_pair
from .encoder import Encoder, MaskRegime, cross_attention
from .tensor import ShapeError, Tensor, log_softmax, stack

__all__ = [
    "MaskingPlan", "LossBreakdown", "ObjectiveFlags", "ObjectiveWeights",
    "BatchCompositionError",
    "select_mask_positions", "apply_masking_plan", "mlm_loss",
    "sentence_embedding", "sentence_alignment_loss", "word_alignment_loss",
    "combined_loss",
]

_N_SPECIALS = 4


class BatchCompositionError(ValueError):
    """Raised when a batch cannot support the enabled objectives."""


@dataclass
class MaskingPlan:
    positions: np.ndarray      # indices into the laid-out sequence
    actions: np.ndarray        # per position: "mask" | "random" | "keep"
    originals: np.ndarray      # the token ids being predicted

    def __len__(self):
        return len(self.positions)


@dataclass
class ObjectiveFlags:
    mlm: bool = True
    tlm: bool = True
    wa: bool = True
    sa: bool = True

    @classmethod
    def from_names(cls, names: Sequence[str]) -> "ObjectiveFlags":
        valid = {"mlm", "tlm", "wa", "sa"}
        names = set(names)
        unknown = names - valid
        if unknown:
            raise ValueError(f"unknown objectives: {sorted(unknown)}")
        return cls(**{k: k in names for k in valid})

    def names(self) -> list:
        return [k for k in ("mlm", "tlm", "wa", "sa") if getattr(self, k)]

    @property
    def any_parallel(self) -> bool:
        return self.tlm or self.wa or self.sa


@dataclass
class ObjectiveWeights:
    mlm: float = 1.0
    sa: float = 1.0
    wa: float = 1.0


@dataclass
class LossBreakdown:
    """Per-objective scalar losses and their weighted total.

    `mlm` covers masked-token prediction on monolingual pairs and, when the
    translation variant is enabled, on parallel pairs as well (one
    expectation over the whole batch, averaged per masked token).
    """
    mlm: float = 0.0
    sa: float = 0.0
    wa: float = 0.0
    total: float = 0.0
    masked_tokens: int = 0
    parallel_pairs: int = 0

    def to_dict(self) -> dict:
        return {"mlm": self.mlm, "sa": self.sa, "wa": self.wa,
                "total": self.total, "masked_tokens": self.masked_tokens,
                "parallel_pairs": self.parallel_pairs}


# -- masking ------------------------------------------------------------------

def select_mask_positions(ids: np.ndarray, rate: float,
                          rng: np.random.Generator) -> MaskingPlan:
    """Choose masked positions over the non-special tokens of a sequence.

    Each maskable position is selected independently with probability
    `rate`; if the draw selects none, one is forced uniformly.  Selected
    positions get 80% mask / 10% random / 10% keep actions.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"mask rate {rate} outside (0, 1]")
    ids = np.asarray(ids)
    maskable = np.flatnonzero(ids >= _N_SPECIALS)
    if len(maskable) == 0:
        raise ValueError("select_mask_positions: sequence has no maskable tokens")
    picks = maskable[rng.random(len(maskable)) < rate]
    if len(picks) == 0:
        picks = np.array([maskable[rng.integers(len(maskable))]])
    r = rng.random(len(picks))
    actions = np.where(r < 0.8, "mask", np.where(r < 0.9, "random", "keep"))
    return MaskingPlan(positions=picks, actions=actions, originals=ids[picks])


def apply_masking_plan(ids: np.ndarray, plan: MaskingPlan, vocab_size: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Corrupt a sequence per the plan; random replacements avoid specials."""
    out = np.array(ids, copy=True)
    for pos, action in zip(plan.positions, plan.actions):
        if action == "mask":
            out[pos] = MASK
        elif action == "random":
            out[pos] = rng.integers(_N_SPECIALS, vocab_size)
    return out


# -- losses -------------------------------------------------------------------

def mlm_loss(model: Encoder, enc: PairEncoding, plan: MaskingPlan,
             rng: Optional[np.random.Generator] = None) -> tuple:
    """Summed cross-entropy over masked positions of a FULL-regime encoding.

    Returns (loss_sum Tensor, masked count); callers divide by the batch-wide
    masked-token count.
    """
    if enc.regime is not MaskRegime.FULL:
        raise ValueError("mlm_loss: expects a FULL-regime encoding")
    corrupt_rng = rng if rng is not None else np.random.default_rng(0)
    corrupted = apply_masking_plan(enc.ids, plan, model.config.vocab_size,
                                   corrupt_rng)
    out = model.encode(corrupted, enc.segments, enc.positions, enc.mask,
                       regime=enc.regime, x_span=enc.x_span, y_span=enc.y_span)
    logits = model.logits(out.top[plan.positions])
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(plan)), plan.originals]
    return -picked.sum(), len(plan)


def sentence_embedding(out, span: tuple) -> Tensor:
    """Mean of the top-layer states over a sentence span (specials excluded)."""
    start, stop = span
    if stop <= start:
        raise ValueError("sentence_embedding: empty span")
    return out.top[start:stop].mean(axis=0)


def sentence_alignment_loss(c_x: Tensor, c_y: Tensor) -> Tensor:
    """In-batch translation-ranking loss over aligned embedding rows.

    Row b of `c_x` pairs with row b of `c_y`; all target rows in the batch
    serve as candidates.  Mean negative log-likelihood of the correct match
    under a dot-product softmax.
    """
    if c_x.shape != c_y.shape or c_x.ndim != 2:
        raise ShapeError(f"sentence_alignment_loss: shapes {c_x.shape} vs "
                         f"{c_y.shape}")
    b = c_x.shape[0]
    if b < 2:
        raise BatchCompositionError("sentence_alignment_loss: need >= 2 pairs "
                                    "for in-batch negatives")
    logits = c_x @ c_y.swapaxes(0, 1)
    logp = log_softmax(logits, axis=-1)
    return -logp[np.arange(b), np.arange(b)].mean()


def word_alignment_loss(a_fwd: Sequence[Tensor], a_bwd: Sequence[Tensor]) -> Tensor:
    """Disagreement between bidirectional cross-attention matrices.

    `a_fwd` holds per-head |y| x |x| row-stochastic matrices (target queries
    over source keys); `a_bwd` the |x| x |y| opposites.  The per-head
    agreement sum_{i,j} fwd[i,j] * bwd[j,i] generalizes the matched-trace
    score to unequal lengths and is bounded by min(|x|, |y|), so the loss
    lies in [0, 1] and hits 0 exactly on transposed hard alignments.
    """
    if len(a_fwd) == 0 or len(a_fwd) != len(a_bwd):
        raise ShapeError(f"word_alignment_loss: head counts {len(a_fwd)} vs "
                         f"{len(a_bwd)}")
    heads = len(a_fwd)
    ny, nx = a_fwd[0].shape
    agreement = None
    for f, b in zip(a_fwd, a_bwd):
        if f.shape != (ny, nx) or b.shape != (nx, ny):
            raise ShapeError(f"word_alignment_loss: shapes {f.shape} / {b.shape} "
                             f"inconsistent with ({ny}, {nx})")
        f = f if isinstance(f, Tensor) else Tensor(f)
        b = b if isinstance(b, Tensor) else Tensor(b)
        term = (f * b.swapaxes(0, 1)).sum()
        agreement = term if agreement is None else agreement + term
    return 1.0 - agreement * (1.0 / (heads * min(nx, ny)))


def _pair_wa_loss(model: Encoder, pair: SentencePair) -> Tensor:
    mp = model.config.max_positions
    enc_fwd = encode_pair(pair, MaskRegime.TGT2SRC, mp)
    enc_bwd = encode_pair(pair, MaskRegime.SRC2TGT, mp)
    out_fwd = model.encode(enc_fwd.ids, enc_fwd.segments, enc_fwd.positions,
                           enc_fwd.mask, regime=enc_fwd.regime,
                           x_span=enc_fwd.x_span, y_span=enc_fwd.y_span)
    out_bwd = model.encode(enc_bwd.ids, enc_bwd.segments, enc_bwd.positions,
                           enc_bwd.mask, regime=enc_bwd.regime,
                           x_span=enc_bwd.x_span, y_span=enc_bwd.y_span)
    return word_alignment_loss(cross_attention(out_fwd, "y2x"),
                               cross_attention(out_bwd, "x2y"))


def combined_loss(model: Encoder, batch: Batch, flags: ObjectiveFlags,
                  rng: np.random.Generator, mask_rate: float = 0.15,
                  weights: Optional[ObjectiveWeights] = None) -> tuple:
    """Weighted sum of the enabled objectives over one mixed batch.

    Returns (total Tensor, LossBreakdown).  Monolingual pairs contribute
    masked-LM terms; parallel pairs contribute the translation variant plus
    the word/sentence alignment terms when enabled.
    """
    if len(batch) == 0:
        raise BatchCompositionError("combined_loss: empty batch")
    weights = weights or ObjectiveWeights()
    parallel = batch.parallel
    if (flags.wa or flags.sa) and not parallel:
        raise BatchCompositionError("combined_loss: wa/sa enabled but batch has "
                                    "no parallel pairs")
    if flags.sa and len(parallel) < 2:
        raise BatchCompositionError("combined_loss: sa needs >= 2 parallel pairs "
                                    f"in the batch, got {len(parallel)}")

    mp = model.config.max_positions
    mlm_sum = None
    mlm_count = 0
    mlm_pairs = list(batch.monolingual) if flags.mlm else []
    if flags.tlm:
        mlm_pairs.extend(parallel)
    for pair in mlm_pairs:
        enc = encode_pair(pair, MaskRegime.FULL, mp)
        plan = select_mask_positions(enc.ids, mask_rate, rng)
        loss_sum, count = mlm_loss(model, enc, plan, rng)
        mlm_sum = loss_sum if mlm_sum is None else mlm_sum + loss_sum
        mlm_count += count

    wa_total = None
    if flags.wa:
        for pair in parallel:
            term = _pair_wa_loss(model, pair)
            wa_total = term if wa_total is None else wa_total + term
        wa_total = wa_total * (1.0 / len(parallel))

    sa_total = None
    if flags.sa:
        cx, cy = [], []
        for pair in parallel:
            enc = encode_pair(pair, MaskRegime.SEPARATE, mp)
            out = model.encode(enc.ids, enc.segments, enc.positions, enc.mask,
                               regime=enc.regime, x_span=enc.x_span,
                               y_span=enc.y_span)
            cx.append(sentence_embedding(out, enc.x_span))
            cy.append(sentence_embedding(out, enc.y_span))
        sa_total = sentence_alignment_loss(stack(cx), stack(cy))

    total = None

    def add(term):
        nonlocal total
        total = term if total is None else total + term

    breakdown = LossBreakdown(masked_tokens=mlm_count,
                              parallel_pairs=len(parallel))
    if mlm_sum is not None and mlm_count > 0:
        mlm_mean = mlm_sum * (1.0 / mlm_count)
        breakdown.mlm = mlm_mean.item()
        add(mlm_mean * weights.mlm)
    if wa_total is not None:
        breakdown.wa = wa_total.item()
        add(wa_total * weights.wa)
    if sa_total is not None:
        breakdown.sa = sa_total.item()
        add(sa_total * weights.sa)
    if total is None:
        raise BatchCompositionError("combined_loss: no objective produced a term "
                                    "for this batch")
    breakdown.total = total.item()
    return total, breakdown
