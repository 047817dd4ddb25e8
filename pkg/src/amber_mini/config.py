"""Experiment configuration and synthetic dataset generation.

A single JSON file fully determines an experiment: corpus shape, model
size, and training schedule.  Every field has a default; the effective
(fully defaulted) configuration is written next to the outputs for
provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import (DataError, LanguageSpec, SentencePair, Vocabulary,
                     generate_base_sentences, make_parallel, read_alignments,
                     read_sentences, reordered_base, surface, write_alignments,
                     write_sentences)
from .encoder import ModelConfig
from .trainer import ConfigError, TrainConfig

__all__ = ["ExperimentConfig", "ExperimentData", "DEFAULT_CONFIG",
           "load_config", "generate_data", "load_data", "ConfigError"]


DEFAULT_CONFIG: dict = {
    "seed": 0,
    "corpus": {
        "n_concepts": 64,
        "languages": [
            {"id": "l0", "reorder": "identity", "mono_size": 2500},
            {"id": "l1", "reorder": "identity", "mono_size": 2000},
            {"id": "l2", "reorder": "adjacent-swap", "mono_size": 1200},
            {"id": "l3", "reorder": "window-reverse", "window": 3,
             "mono_size": 800},
        ],
        # deliberately skewed parallel sizes; held-out slice is size // 4
        # capped at `heldout_cap` pairs
        "parallel": [
            {"src": "l0", "tgt": "l1", "size": 1600},
            {"src": "l0", "tgt": "l2", "size": 500},
            {"src": "l0", "tgt": "l3", "size": 240},
        ],
        "heldout_cap": 240,
        "heldout_mono": 120,
    },
    "model": {
        "layers": 2,
        "heads": 4,
        "hidden": 64,
        "ffn_dim": 128,
        "max_positions": 40,
        "dropout": 0.0,
        "precision": "train32",
    },
    "train": {
        "steps": 4000,
        "warmup_steps": 200,
        "peak_lr": 1e-3,
        "batch_size": 12,
        "objectives": ["mlm", "tlm", "wa", "sa"],
        "weights": {"mlm": 1.0, "sa": 1.0, "wa": 1.0},
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "clip_norm": 1.0,
        "mask_rate": 0.15,
        "smoothing": 0.7,
        "parallel_fraction": 0.5,
        "checkpoint_every": 0,
    },
    "eval": {
        "tag_classes": 4,
        "probe_seed": 0,
    },
}


def _merge_defaults(user: dict, defaults: dict, path: str = "") -> dict:
    """Recursively overlay user settings on the defaults; reject unknown keys."""
    out = {}
    for key, dval in defaults.items():
        here = f"{path}.{key}" if path else key
        if key not in user:
            out[key] = json.loads(json.dumps(dval))
        elif isinstance(dval, dict) and isinstance(user[key], dict):
            out[key] = _merge_defaults(user[key], dval, here)
        else:
            out[key] = user[key]
    unknown = set(user) - set(defaults)
    if unknown:
        where = path or "<root>"
        raise ConfigError(f"unknown config field(s) {sorted(unknown)} under {where}")
    return out


@dataclass
class ExperimentConfig:
    seed: int
    corpus: dict
    model: dict
    train: dict
    eval: dict

    @property
    def n_concepts(self) -> int:
        return self.corpus["n_concepts"]

    def language_specs(self) -> list:
        """LanguageSpec per configured language; ciphers derived from the seed.

        Language 0 keeps the identity cipher (readability); the others get a
        seed-determined random permutation of the concept vocabulary.
        """
        specs = []
        for idx, entry in enumerate(self.corpus["languages"]):
            if idx == 0:
                cipher = list(range(self.n_concepts))
            else:
                rng = np.random.default_rng([self.seed, 7000 + idx])
                cipher = [int(v) for v in rng.permutation(self.n_concepts)]
            specs.append(LanguageSpec(
                id=entry["id"], index=idx, cipher=cipher,
                reorder=entry.get("reorder", "identity"),
                window=entry.get("window", 3),
                corpus_size=entry["mono_size"]))
        return specs

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.language_specs(), self.n_concepts)

    def model_config(self) -> ModelConfig:
        return ModelConfig(vocab_size=len(self.vocabulary()), **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seed})

    def to_dict(self) -> dict:
        return {"seed": self.seed, "corpus": self.corpus, "model": self.model,
                "train": self.train, "eval": self.eval}


def _validate(cfg: ExperimentConfig) -> None:
    langs = cfg.corpus["languages"]
    if len(langs) < 2:
        raise ConfigError("corpus.languages: need at least 2 languages")
    ids = [l["id"] for l in langs]
    if len(set(ids)) != len(ids):
        raise ConfigError("corpus.languages: duplicate language ids")
    for i, lang in enumerate(langs):
        if lang.get("mono_size", 0) < 2:
            raise ConfigError(f"corpus.languages[{i}].mono_size: must be >= 2")
    for i, pair in enumerate(cfg.corpus["parallel"]):
        for side in ("src", "tgt"):
            if pair.get(side) not in ids:
                raise ConfigError(f"corpus.parallel[{i}].{side}: unknown "
                                  f"language {pair.get(side)!r}")
        if pair.get("size", 0) < 8:
            raise ConfigError(f"corpus.parallel[{i}].size: must be >= 8")
    if cfg.corpus["n_concepts"] < cfg.eval["tag_classes"]:
        raise ConfigError("corpus.n_concepts: must be >= eval.tag_classes")
    # constructing these validates their own invariants
    cfg.model_config()
    cfg.train_config()


def load_config(source, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Load an experiment config from a JSON file path or a dict."""
    if isinstance(source, (str, Path)):
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {source}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {source} is not valid JSON: {exc}") \
                from None
    else:
        raw = dict(source)
    merged = _merge_defaults(raw, DEFAULT_CONFIG)
    if seed_override is not None:
        merged["seed"] = seed_override
    cfg = ExperimentConfig(**merged)
    _validate(cfg)
    return cfg


# -- data generation ----------------------------------------------------------

@dataclass
class ExperimentData:
    vocab: Vocabulary
    languages: list                      # LanguageSpec, indexed order
    mono: dict                           # LanguageSpec -> [sentence ids]
    parallel: dict                       # "src-tgt" -> [SentencePair] (training)
    heldout_parallel: dict               # "src-tgt" -> [SentencePair] with gold
    heldout_mono: dict                   # lang id -> (sentences, base concepts)
    parallel_sizes: dict                 # "src-tgt" -> configured total size

    def lang_by_id(self, lang_id: str) -> LanguageSpec:
        for lang in self.languages:
            if lang.id == lang_id:
                return lang
        raise DataError(f"unknown language {lang_id!r}")


def _heldout_count(size: int, cap: int) -> int:
    return max(2, min(size // 4, cap))


def generate_data(cfg: ExperimentConfig, data_dir: Path) -> ExperimentData:
    """Generate and write the full synthetic dataset for one experiment."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    langs = cfg.language_specs()
    vocab = Vocabulary(langs, cfg.n_concepts)
    by_id = {l.id: l for l in langs}
    heldout_mono_n = cfg.corpus["heldout_mono"]

    mono, heldout_mono = {}, {}
    for lang in langs:
        rng = np.random.default_rng([cfg.seed, 100 + lang.index])
        base = generate_base_sentences(lang.corpus_size + heldout_mono_n,
                                       cfg.n_concepts, rng)
        train_base = base[:lang.corpus_size]
        held_base = base[lang.corpus_size:]
        sentences = [surface(b, lang, vocab) for b in train_base]
        mono[lang] = sentences
        held_sents = [surface(b, lang, vocab) for b in held_base]
        held_concepts = [reordered_base(b, lang) for b in held_base]
        heldout_mono[lang.id] = (held_sents, held_concepts)
        write_sentences(data_dir / f"mono.{lang.id}.txt", sentences, lang.id, vocab)
        write_sentences(data_dir / f"heldout.{lang.id}.txt", held_sents,
                        lang.id, vocab)
        with open(data_dir / f"heldout.{lang.id}.concepts.txt", "w",
                  encoding="utf-8") as fh:
            for cs in held_concepts:
                fh.write(" ".join(str(int(c)) for c in cs) + "\n")

    parallel, heldout_parallel, parallel_sizes = {}, {}, {}
    for p_idx, entry in enumerate(cfg.corpus["parallel"]):
        src, tgt = by_id[entry["src"]], by_id[entry["tgt"]]
        label = f"{src.id}-{tgt.id}"
        size = entry["size"]
        parallel_sizes[label] = size
        rng = np.random.default_rng([cfg.seed, 500 + p_idx])
        base = generate_base_sentences(size, cfg.n_concepts, rng)
        pairs = [make_parallel(b, src, tgt, vocab) for b in base]
        n_held = _heldout_count(size, cfg.corpus["heldout_cap"])
        heldout_parallel[label] = pairs[:n_held]
        parallel[label] = pairs[n_held:]
        for split, subset in (("para", parallel[label]),
                              ("heldout.para", heldout_parallel[label])):
            write_sentences(data_dir / f"{split}.{label}.src.txt",
                            [p.x for p in subset], src.id, vocab)
            write_sentences(data_dir / f"{split}.{label}.tgt.txt",
                            [p.y for p in subset], tgt.id, vocab)
            write_alignments(data_dir / f"{split}.{label}.align.txt",
                             [p.gold_alignment for p in subset])

    meta = {
        "seed": cfg.seed,
        "n_concepts": cfg.n_concepts,
        "languages": [l.to_dict() for l in langs],
        "parallel": [{"label": label, "size": parallel_sizes[label]}
                     for label in parallel],
        "heldout_mono": heldout_mono_n,
        "heldout_cap": cfg.corpus["heldout_cap"],
    }
    (data_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True)
                                        + "\n", encoding="utf-8")
    return ExperimentData(vocab=vocab, languages=langs, mono=mono,
                          parallel=parallel, heldout_parallel=heldout_parallel,
                          heldout_mono=heldout_mono,
                          parallel_sizes=parallel_sizes)


def load_data(data_dir: Path) -> ExperimentData:
    """Reload a generated dataset from its directory."""
    data_dir = Path(data_dir)
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no dataset at {data_dir} (missing meta.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    langs = [LanguageSpec.from_dict(d) for d in meta["languages"]]
    vocab = Vocabulary(langs, meta["n_concepts"])
    by_id = {l.id: l for l in langs}

    mono, heldout_mono = {}, {}
    for lang in langs:
        _, sentences = read_sentences(data_dir / f"mono.{lang.id}.txt", vocab)
        mono[lang] = sentences
        _, held = read_sentences(data_dir / f"heldout.{lang.id}.txt", vocab)
        concepts = []
        with open(data_dir / f"heldout.{lang.id}.concepts.txt",
                  encoding="utf-8") as fh:
            for line in fh:
                concepts.append(np.array([int(v) for v in line.split()],
                                         dtype=np.int64))
        heldout_mono[lang.id] = (held, concepts)

    parallel, heldout_parallel, parallel_sizes = {}, {}, {}
    for entry in meta["parallel"]:
        label = entry["label"]
        parallel_sizes[label] = entry["size"]
        src_id, tgt_id = label.split("-")
        for split, store in (("para", parallel), ("heldout.para", heldout_parallel)):
            _, xs = read_sentences(data_dir / f"{split}.{label}.src.txt", vocab)
            _, ys = read_sentences(data_dir / f"{split}.{label}.tgt.txt", vocab)
            golds = read_alignments(data_dir / f"{split}.{label}.align.txt")
            if not (len(xs) == len(ys) == len(golds)):
                raise DataError(f"{split}.{label}: src/tgt/align line counts differ")
            store[label] = [SentencePair(x=x, y=y, x_lang=src_id, y_lang=tgt_id,
                                         is_parallel=True, gold_alignment=g)
                            for x, y, g in zip(xs, ys, golds)]
    return ExperimentData(vocab=vocab, languages=langs, mono=mono,
                          parallel=parallel, heldout_parallel=heldout_parallel,
                          heldout_mono=heldout_mono,
                          parallel_sizes=parallel_sizes)
