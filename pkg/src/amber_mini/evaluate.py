"""Evaluation: sentence retrieval, word-alignment quality, tag transfer.

All tasks run on a frozen model.  Sentence embeddings use the separate
(single-sentence) encoding and mean pooling over non-special positions;
alignment extraction reads the head-averaged top-layer cross attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression

from .corpus import SentencePair, encode_pair, encode_single
from .encoder import Encoder, MaskRegime, cross_attention
from .objectives import sentence_embedding
from .tensor import no_grad

__all__ = [
    "EvalError", "RetrievalReport", "AlignmentReport", "TransferReport",
    "embed_sentences", "retrieval_accuracy", "retrieval_from_embeddings",
    "extract_alignments", "alignment_error_rate", "zero_shot_tag_transfer",
]


class EvalError(ValueError):
    """Raised for degenerate evaluation inputs (e.g. zero-norm embeddings)."""


@dataclass
class RetrievalReport:
    accuracy: float
    candidates: int
    ties: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "candidates": self.candidates,
                "ties": self.ties}


@dataclass
class AlignmentReport:
    precision: float
    recall: float
    aer: float
    predicted: int
    gold: int

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall,
                "aer": self.aer, "predicted": self.predicted, "gold": self.gold}


@dataclass
class TransferReport:
    train_language: str
    train_accuracy: float
    per_language: dict
    n_classes: int

    @property
    def transfer_gap(self) -> float:
        targets = [v for k, v in self.per_language.items()
                   if k != self.train_language]
        return self.train_accuracy - (sum(targets) / len(targets) if targets else 0.0)

    def to_dict(self) -> dict:
        return {"train_language": self.train_language,
                "train_accuracy": self.train_accuracy,
                "per_language": dict(self.per_language),
                "transfer_gap": self.transfer_gap,
                "n_classes": self.n_classes}


# -- retrieval ----------------------------------------------------------------

def embed_sentences(model: Encoder, sentences: Sequence[np.ndarray]) -> np.ndarray:
    """Mean-pooled top-layer embeddings, one row per sentence."""
    rows = []
    with no_grad():
        for sent in sentences:
            enc = encode_single(sent, model.config.max_positions)
            out = model.encode(enc.ids, enc.segments, enc.positions, enc.mask,
                               regime=enc.regime, x_span=enc.x_span,
                               y_span=enc.y_span)
            rows.append(sentence_embedding(out, enc.x_span).data)
    return np.stack(rows)


def retrieval_from_embeddings(src: np.ndarray, tgt: np.ndarray) -> RetrievalReport:
    """Argmax-cosine retrieval; gold match of source i is candidate i.

    Exact score ties are broken toward the lowest candidate index and
    counted in the report.
    """
    if src.shape != tgt.shape:
        raise EvalError(f"retrieval: {src.shape[0]} sources vs "
                        f"{tgt.shape[0]} candidates")
    if src.shape[0] < 2:
        raise EvalError("retrieval: need at least 2 candidates")
    src_norm = np.linalg.norm(src, axis=1)
    tgt_norm = np.linalg.norm(tgt, axis=1)
    if (src_norm == 0).any() or (tgt_norm == 0).any():
        raise EvalError("retrieval: zero-norm sentence embedding")
    sims = (src / src_norm[:, None]) @ (tgt / tgt_norm[:, None]).T
    best = sims.argmax(axis=1)
    row_max = sims.max(axis=1)
    ties = int(((sims == row_max[:, None]).sum(axis=1) > 1).sum())
    correct = int((best == np.arange(len(src))).sum())
    return RetrievalReport(accuracy=correct / len(src), candidates=len(src),
                           ties=ties)


def retrieval_accuracy(model: Encoder, src_sentences: Sequence[np.ndarray],
                       tgt_sentences: Sequence[np.ndarray]) -> RetrievalReport:
    src = embed_sentences(model, src_sentences)
    tgt = embed_sentences(model, tgt_sentences)
    return retrieval_from_embeddings(src, tgt)


# -- word alignment -----------------------------------------------------------

def extract_alignments(model: Encoder, pair: SentencePair,
                       per_head: bool = False):
    """Greedy argmax links from the head-averaged target-to-source attention.

    Returns {(i over y, j over x)}; ties at a row maximum resolve to the
    lowest source index.  With per_head=True, returns one link set per head.
    """
    if not pair.is_parallel:
        raise EvalError("extract_alignments: pair is not parallel")
    enc = encode_pair(pair, MaskRegime.TGT2SRC, model.config.max_positions)
    with no_grad():
        out = model.encode(enc.ids, enc.segments, enc.positions, enc.mask,
                           regime=enc.regime, x_span=enc.x_span,
                           y_span=enc.y_span)
        heads = [t.data for t in cross_attention(out, "y2x")]
    if per_head:
        return [frozenset((i, int(h[i].argmax())) for i in range(h.shape[0]))
                for h in heads]
    avg = np.mean(heads, axis=0)
    return frozenset((i, int(avg[i].argmax())) for i in range(avg.shape[0]))


def alignment_error_rate(pred: frozenset, gold: frozenset) -> AlignmentReport:
    """Sure-links AER: 1 - 2|P&G| / (|P| + |G|); empty pred counts precision 1."""
    pred, gold = frozenset(pred), frozenset(gold)
    hits = len(pred & gold)
    precision = hits / len(pred) if pred else 1.0
    recall = hits / len(gold) if gold else 0.0
    denom = len(pred) + len(gold)
    aer = 1.0 - (2.0 * hits / denom) if denom else 0.0
    return AlignmentReport(precision=precision, recall=recall, aer=aer,
                           predicted=len(pred), gold=len(gold))


# -- zero-shot tag transfer ---------------------------------------------------

def _token_features(model: Encoder, sentences: Sequence[np.ndarray],
                    concepts: Sequence[np.ndarray], n_classes: int):
    feats, labels = [], []
    with no_grad():
        for sent, base in zip(sentences, concepts):
            enc = encode_single(sent, model.config.max_positions)
            out = model.encode(enc.ids, enc.segments, enc.positions, enc.mask,
                               regime=enc.regime, x_span=enc.x_span,
                               y_span=enc.y_span)
            start, stop = enc.x_span
            feats.append(out.top.data[start:stop])
            labels.append(np.asarray(base) % n_classes)
    return np.concatenate(feats), np.concatenate(labels)


def zero_shot_tag_transfer(model: Encoder, train_lang: str,
                           sentences_by_lang: dict, concepts_by_lang: dict,
                           n_classes: int = 4, seed: int = 0) -> TransferReport:
    """Linear softmax probe on frozen token features, trained on one language.

    `sentences_by_lang` maps language id -> surfaced sentences and
    `concepts_by_lang` the matching reordered base-concept sequences; the
    tag of a token is its base concept modulo `n_classes`, so gold tags are
    identical for translation-equivalent tokens.
    """
    if train_lang not in sentences_by_lang:
        raise EvalError(f"transfer: train language {train_lang!r} missing")
    x_train, y_train = _token_features(model, sentences_by_lang[train_lang],
                                       concepts_by_lang[train_lang], n_classes)
    if len(np.unique(y_train)) < 2:
        raise EvalError("transfer: training set collapses to a single class")
    probe = LogisticRegression(max_iter=1000, C=10.0, random_state=seed)
    probe.fit(x_train, y_train)
    per_language = {}
    for lang, sentences in sentences_by_lang.items():
        feats, labels = _token_features(model, sentences,
                                        concepts_by_lang[lang], n_classes)
        per_language[lang] = float((probe.predict(feats) == labels).mean())
    return TransferReport(train_language=train_lang,
                          train_accuracy=float(probe.score(x_train, y_train)),
                          per_language=per_language, n_classes=n_classes)
