"""Synthetic multilingual corpora built from cipher languages.

A base language over a small concept vocabulary is turned into several
surface languages by a bijective token substitution (cipher) plus a
deterministic length-indexed reordering.  Translation pairs therefore come
with exact gold word alignments.  Surface vocabularies are disjoint across
languages but share one embedding table.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoder import MaskRegime, build_mask

__all__ = [
    "PAD", "CLS", "SEP", "MASK",
    "LanguageSpec", "Vocabulary", "SentencePair", "Batch", "PairEncoding",
    "DataError",
    "reorder_permutation", "generate_base_sentences", "generate_corpus",
    "surface", "make_parallel", "make_monolingual_pair",
    "smoothed_probs", "sample_batch", "encode_pair", "encode_single",
    "write_sentences", "read_sentences", "write_alignments", "read_alignments",
    "file_sha256",
]

PAD, CLS, SEP, MASK = 0, 1, 2, 3
_N_SPECIALS = 4
_SPECIAL_TOKENS = {"<pad>": PAD, "<cls>": CLS, "<sep>": SEP, "<mask>": MASK}


class DataError(ValueError):
    """Raised for invalid corpus inputs or malformed data files."""


@dataclass(eq=False)
class LanguageSpec:
    """One synthetic language: a cipher over the base vocabulary + a reorder rule."""
    id: str
    index: int
    cipher: list            # permutation of range(n_concepts)
    reorder: str = "identity"   # identity | adjacent-swap | window-reverse
    window: int = 3             # window size for window-reverse
    corpus_size: int = 0

    def __post_init__(self):
        if sorted(self.cipher) != list(range(len(self.cipher))):
            raise DataError(f"language {self.id}: cipher is not a bijection")
        if self.reorder not in ("identity", "adjacent-swap", "window-reverse"):
            raise DataError(f"language {self.id}: unknown reorder {self.reorder!r}")

    def to_dict(self) -> dict:
        return {"id": self.id, "index": self.index, "cipher": list(self.cipher),
                "reorder": self.reorder, "window": self.window,
                "corpus_size": self.corpus_size}

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageSpec":
        return cls(**d)


class Vocabulary:
    """Dense token-id space: 4 specials, then one block per language.

    The surface token for base concept c in language l is the string
    "<lang>:w<ciphered-index>"; its id is 4 + l.index * C + ciphered-index.
    """

    def __init__(self, languages: Sequence[LanguageSpec], n_concepts: int):
        self.languages = list(languages)
        self.n_concepts = n_concepts
        self.token_to_id: dict[str, int] = dict(_SPECIAL_TOKENS)
        self.id_to_token: dict[int, str] = {v: k for k, v in _SPECIAL_TOKENS.items()}
        for lang in self.languages:
            if len(lang.cipher) != n_concepts:
                raise DataError(f"language {lang.id}: cipher size "
                                f"{len(lang.cipher)} != {n_concepts} concepts")
            for w in range(n_concepts):
                tok = f"{lang.id}:w{w}"
                tid = _N_SPECIALS + lang.index * n_concepts + w
                self.token_to_id[tok] = tid
                self.id_to_token[tid] = tok

    def __len__(self) -> int:
        return _N_SPECIALS + len(self.languages) * self.n_concepts

    @property
    def size(self) -> int:
        return len(self)

    def id_of(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise DataError(f"unknown token {token!r}") from None

    def token_of(self, tid: int) -> str:
        try:
            return self.id_to_token[int(tid)]
        except KeyError:
            raise DataError(f"unknown token id {tid}") from None

    def lang_block(self, lang: LanguageSpec) -> tuple:
        start = _N_SPECIALS + lang.index * self.n_concepts
        return start, start + self.n_concepts


@dataclass
class SentencePair:
    """A training pair: two sentences, optionally parallel with gold alignment."""
    x: np.ndarray           # token ids
    y: np.ndarray
    x_lang: str
    y_lang: str
    is_parallel: bool
    gold_alignment: Optional[frozenset] = None  # {(i over y, j over x)}
    base_x: Optional[np.ndarray] = None         # base concept indices (diagnostics)
    base_y: Optional[np.ndarray] = None


@dataclass
class Batch:
    pairs: list
    mono_language: Optional[str] = None
    parallel_pair: Optional[str] = None

    @property
    def parallel(self) -> list:
        return [p for p in self.pairs if p.is_parallel]

    @property
    def monolingual(self) -> list:
        return [p for p in self.pairs if not p.is_parallel]

    def __len__(self):
        return len(self.pairs)


# -- generation ---------------------------------------------------------------

def reorder_permutation(kind: str, length: int, window: int = 3) -> np.ndarray:
    """Permutation sigma with new[sigma[p]] = base[p], deterministic in length."""
    perm = np.arange(length)
    if kind == "identity":
        return perm
    if kind == "adjacent-swap":
        for i in range(0, length - 1, 2):
            perm[i], perm[i + 1] = perm[i + 1], perm[i]
        return perm
    if kind == "window-reverse":
        for start in range(0, length, window):
            stop = min(start + window, length)
            perm[start:stop] = perm[start:stop][::-1]
        return perm
    raise DataError(f"unknown reorder kind {kind!r}")


def zipf_probs(n_concepts: int, exponent: float = 1.2) -> np.ndarray:
    ranks = np.arange(1, n_concepts + 1, dtype=np.float64)
    p = ranks ** -exponent
    return p / p.sum()


def generate_base_sentences(n: int, n_concepts: int, rng: np.random.Generator,
                            min_len: int = 3, max_len: int = 12,
                            zipf_exponent: float = 1.2) -> list:
    """Base-concept sentences: lengths uniform in [min_len, max_len], Zipf tokens."""
    probs = zipf_probs(n_concepts, zipf_exponent)
    lengths = rng.integers(min_len, max_len + 1, size=n)
    return [rng.choice(n_concepts, size=int(ln), p=probs) for ln in lengths]


def surface(base_sentence: np.ndarray, lang: LanguageSpec, vocab: Vocabulary) -> np.ndarray:
    """Cipher + reorder a base sentence into language-specific token ids."""
    cipher = np.asarray(lang.cipher)
    start, _ = vocab.lang_block(lang)
    ids = start + cipher[np.asarray(base_sentence)]
    perm = reorder_permutation(lang.reorder, len(ids), lang.window)
    out = np.empty_like(ids)
    out[perm] = ids
    return out


def reordered_base(base_sentence: np.ndarray, lang: LanguageSpec) -> np.ndarray:
    perm = reorder_permutation(lang.reorder, len(base_sentence), lang.window)
    out = np.empty_like(np.asarray(base_sentence))
    out[perm] = np.asarray(base_sentence)
    return out


def generate_corpus(spec: LanguageSpec, base_seed: int, vocab: Vocabulary,
                    n_sentences: Optional[int] = None) -> list:
    """Deterministic monolingual corpus for one language (list of id arrays)."""
    n = n_sentences if n_sentences is not None else spec.corpus_size
    if n < 1:
        raise DataError(f"language {spec.id}: corpus_size must be >= 1")
    rng = np.random.default_rng([base_seed, spec.index])
    base = generate_base_sentences(n, vocab.n_concepts, rng)
    return [surface(b, spec, vocab) for b in base]


def make_parallel(base_sentence: np.ndarray, src: LanguageSpec, tgt: LanguageSpec,
                  vocab: Vocabulary) -> SentencePair:
    """Translation pair with the gold alignment implied by the two reorders."""
    base_sentence = np.asarray(base_sentence)
    n = len(base_sentence)
    x = surface(base_sentence, src, vocab)
    y = surface(base_sentence, tgt, vocab)
    perm_src = reorder_permutation(src.reorder, n, src.window)
    perm_tgt = reorder_permutation(tgt.reorder, n, tgt.window)
    # y position perm_tgt[p] and x position perm_src[p] hold base position p
    gold = frozenset((int(perm_tgt[p]), int(perm_src[p])) for p in range(n))
    return SentencePair(x=x, y=y, x_lang=src.id, y_lang=tgt.id, is_parallel=True,
                        gold_alignment=gold,
                        base_x=reordered_base(base_sentence, src),
                        base_y=reordered_base(base_sentence, tgt))


def make_monolingual_pair(corpus: list, k: int, lang: LanguageSpec) -> SentencePair:
    """Two contiguous sentences of one language, used as an MLM pair."""
    return SentencePair(x=corpus[k], y=corpus[k + 1], x_lang=lang.id,
                        y_lang=lang.id, is_parallel=False)


# -- batch sampling -----------------------------------------------------------

def smoothed_probs(sizes: Sequence[int], s: float) -> np.ndarray:
    """Selection probabilities proportional to n^s (s=0 flat, s=1 proportional)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    w = sizes ** s
    return w / w.sum()


def sample_batch(mono_corpora: dict, parallel_corpora: dict, batch_size: int,
                 smoothing: float, rng: np.random.Generator,
                 parallel_fraction: float = 0.5) -> Batch:
    """Mixed mini-batch: one smoothed-sampled mono language + one parallel pair.

    `mono_corpora` maps LanguageSpec -> sentence list; `parallel_corpora` maps
    a (src, tgt) label -> list of SentencePair.  Monolingual entries are
    contiguous-sentence pairs drawn without replacement within the batch.
    """
    if batch_size < 2:
        raise DataError("sample_batch: batch_size must be >= 2")
    if not mono_corpora and not parallel_corpora:
        raise DataError("sample_batch: no corpora to sample from")

    n_par = 0
    if parallel_corpora:
        n_par = int(round(batch_size * parallel_fraction))
        n_par = min(max(n_par, 2), batch_size) if parallel_fraction > 0 else 0
    n_mono = batch_size - n_par
    pairs: list[SentencePair] = []
    mono_language = None
    parallel_label = None

    if n_mono > 0:
        if not mono_corpora:
            raise DataError("sample_batch: monolingual slots requested but no "
                            "monolingual corpora")
        langs = list(mono_corpora)
        probs = smoothed_probs([len(mono_corpora[l]) for l in langs], smoothing)
        lang = langs[rng.choice(len(langs), p=probs)]
        corpus = mono_corpora[lang]
        avail = len(corpus) - 1
        if n_mono > avail:
            raise DataError(f"sample_batch: {n_mono} monolingual pairs requested "
                            f"but only {avail} available in {lang.id}")
        ks = rng.choice(avail, size=n_mono, replace=False)
        pairs.extend(make_monolingual_pair(corpus, int(k), lang) for k in ks)
        mono_language = lang.id

    if n_par > 0:
        labels = list(parallel_corpora)
        probs = smoothed_probs([len(parallel_corpora[l]) for l in labels], smoothing)
        label = labels[rng.choice(len(labels), p=probs)]
        pool = parallel_corpora[label]
        if n_par > len(pool):
            raise DataError(f"sample_batch: {n_par} parallel pairs requested but "
                            f"only {len(pool)} available in {label}")
        ks = rng.choice(len(pool), size=n_par, replace=False)
        pairs.extend(pool[int(k)] for k in ks)
        parallel_label = label if isinstance(label, str) else "-".join(label)

    return Batch(pairs=pairs, mono_language=mono_language,
                 parallel_pair=parallel_label)


# -- sequence layout ----------------------------------------------------------

@dataclass
class PairEncoding:
    """A SentencePair laid out as model-ready id/segment/position sequences."""
    ids: np.ndarray
    segments: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    regime: MaskRegime
    x_span: tuple  # (start, stop) of x tokens, specials excluded
    y_span: tuple


def encode_pair(pair: SentencePair, regime: MaskRegime,
                max_positions: int) -> PairEncoding:
    """Lay out a pair for one regime.

    FULL uses the joint layout [CLS] x [SEP] y [SEP] with continuous
    positions and 0/1 segments.  The other regimes use x [SEP] y [SEP] with
    the y side's positions restarted at 0; TGT2SRC/SRC2TGT tag the y side
    with segment 1 while SEPARATE keeps both sides at segment 0 so each
    block is computed exactly as if the sentence were encoded alone.
    """
    x, y = np.asarray(pair.x), np.asarray(pair.y)
    lx, ly = len(x), len(y)
    if regime is MaskRegime.FULL:
        n = lx + ly + 3
        if n > max_positions:
            raise DataError(f"encode_pair: length {n} exceeds max_positions "
                            f"{max_positions}")
        ids = np.concatenate(([CLS], x, [SEP], y, [SEP]))
        segments = np.concatenate((np.zeros(lx + 2, dtype=np.int64),
                                   np.ones(ly + 1, dtype=np.int64)))
        positions = np.arange(n)
        mask = build_mask(MaskRegime.FULL, lx + 2, ly + 1)
        return PairEncoding(ids, segments, positions, mask, regime,
                            x_span=(1, 1 + lx), y_span=(lx + 2, lx + 2 + ly))

    n = lx + ly + 2
    if n > max_positions:
        raise DataError(f"encode_pair: length {n} exceeds max_positions "
                        f"{max_positions}")
    ids = np.concatenate((x, [SEP], y, [SEP]))
    seg_y = 0 if regime is MaskRegime.SEPARATE else 1
    segments = np.concatenate((np.zeros(lx + 1, dtype=np.int64),
                               np.full(ly + 1, seg_y, dtype=np.int64)))
    positions = np.concatenate((np.arange(lx + 1), np.arange(ly + 1)))
    mask = build_mask(regime, lx + 1, ly + 1)
    return PairEncoding(ids, segments, positions, mask, regime,
                        x_span=(0, lx), y_span=(lx + 1, lx + 1 + ly))


def encode_single(sentence: np.ndarray, max_positions: int) -> PairEncoding:
    """Single-sentence layout x [SEP]; identical to one SEPARATE block."""
    x = np.asarray(sentence)
    n = len(x) + 1
    if n > max_positions:
        raise DataError(f"encode_single: length {n} exceeds max_positions "
                        f"{max_positions}")
    ids = np.concatenate((x, [SEP]))
    segments = np.zeros(n, dtype=np.int64)
    positions = np.arange(n)
    mask = build_mask(MaskRegime.SEPARATE, n, 0)
    return PairEncoding(ids, segments, positions, mask, MaskRegime.SEPARATE,
                        x_span=(0, len(x)), y_span=(0, 0))


# -- text formats -------------------------------------------------------------

def write_sentences(path: Path, sentences: Iterable[np.ndarray], lang_id: str,
                    vocab: Vocabulary) -> None:
    """One sentence per line: language tag then space-separated tokens."""
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            toks = " ".join(vocab.token_of(t) for t in sent)
            fh.write(f"{lang_id} {toks}\n")


def read_sentences(path: Path, vocab: Vocabulary) -> tuple:
    sentences = []
    lang_id = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: expected 'lang tok tok ...'")
            if lang_id is None:
                lang_id = parts[0]
            elif parts[0] != lang_id:
                raise DataError(f"{path}:{lineno}: mixed language tags "
                                f"{lang_id!r} and {parts[0]!r}")
            sentences.append(np.array([vocab.id_of(t) for t in parts[1:]],
                                      dtype=np.int64))
    return lang_id, sentences


def write_alignments(path: Path, alignments: Iterable[frozenset]) -> None:
    """Pharaoh-style lines of "i-j" links, i over y positions, j over x."""
    with open(path, "w", encoding="utf-8") as fh:
        for links in alignments:
            fh.write(" ".join(f"{i}-{j}" for i, j in sorted(links)) + "\n")


def read_alignments(path: Path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            links = set()
            for chunk in line.split():
                try:
                    i, j = chunk.split("-")
                    links.add((int(i), int(j)))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad link {chunk!r}") from None
            out.append(frozenset(links))
    return out


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
