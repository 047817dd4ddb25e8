"""Experiment orchestration shared by the CLI and the test suite.

Wires corpus loading, training, evaluation, and report/figure writing
together so a whole experiment is a few function calls.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, ExperimentData
from .corpus import file_sha256
from .encoder import Encoder, ModelConfig
from .evaluate import (AlignmentReport, RetrievalReport, TransferReport,
                       alignment_error_rate, embed_sentences,
                       extract_alignments, retrieval_from_embeddings,
                       zero_shot_tag_transfer)
from .objectives import ObjectiveFlags
from .trainer import Adam, TrainConfig, load_checkpoint, run_training, \
    save_checkpoint

__all__ = ["train_experiment", "eval_retrieval", "eval_alignment",
           "eval_transfer", "write_tsv", "corpus_hash", "LADDER"]

# the objective ladder, weakest to strongest
LADDER = [
    ("mlm", ["mlm"]),
    ("mlm_tlm", ["mlm", "tlm"]),
    ("mlm_tlm_wa", ["mlm", "tlm", "wa"]),
    ("mlm_tlm_wa_sa", ["mlm", "tlm", "wa", "sa"]),
]


def corpus_hash(data_dir: Path) -> str:
    """Order-independent digest over every corpus file in a data directory."""
    import hashlib
    digest = hashlib.sha256()
    for path in sorted(Path(data_dir).glob("*.txt")):
        digest.update(path.name.encode())
        digest.update(bytes.fromhex(file_sha256(path)))
    return digest.hexdigest()


def train_experiment(cfg: ExperimentConfig, data: ExperimentData,
                     out_dir: Optional[Path] = None,
                     objectives: Optional[Sequence[str]] = None,
                     steps: Optional[int] = None,
                     seed: Optional[int] = None,
                     phase2_from: Optional[Path] = None) -> tuple:
    """Train one model; returns (model, summary dict).

    When `out_dir` is given, writes metrics.jsonl, checkpoint.bin, the
    effective config, and a summary file there.
    """
    train_cfg = cfg.train_config()
    if objectives is not None:
        train_cfg.objectives = ObjectiveFlags.from_names(objectives)
    if steps is not None:
        overrides = train_cfg.to_dict()
        overrides["steps"] = steps
        overrides["warmup_steps"] = min(train_cfg.warmup_steps,
                                        max(steps // 10, 0) if steps else 0)
        train_cfg = TrainConfig.from_dict(overrides)
    if seed is not None:
        train_cfg.seed = seed

    model_cfg = ModelConfig(vocab_size=len(data.vocab), **cfg.model)
    model = Encoder(model_cfg, seed=train_cfg.seed)
    if phase2_from is not None:
        state = load_checkpoint(phase2_from)
        for name, arr in state.params.items():
            model.set_param(name, arr)
    optimizer = Adam(model, train_cfg.adam_beta1, train_cfg.adam_beta2,
                     train_cfg.adam_eps, train_cfg.clip_norm)

    metrics_path = checkpoint_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("", encoding="utf-8")
        checkpoint_dir = out_dir
        effective = cfg.to_dict()
        effective["train"] = {k: v for k, v in train_cfg.to_dict().items()
                              if k != "seed"}
        effective["seed"] = train_cfg.seed
        (out_dir / "config.json").write_text(
            json.dumps(effective, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")

    history = run_training(model, optimizer, train_cfg, data.mono,
                           data.parallel, metrics_path=metrics_path,
                           checkpoint_dir=checkpoint_dir)

    summary = {
        "steps": train_cfg.steps,
        "objectives": train_cfg.objectives.names(),
        "seed": train_cfg.seed,
        "first_loss": history[0].total if history else None,
        "final_loss": history[-1].total if history else None,
    }
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.bin", model, optimizer,
                        train_cfg.steps, train_cfg)
        (out_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    return model, summary


# -- task evaluations ---------------------------------------------------------

def eval_retrieval(model: Encoder, data: ExperimentData) -> dict:
    """Per language pair: argmax-cosine retrieval of the source translation.

    Sources are the target-language sentences of the held-out parallel
    pairs; candidates are their source-language counterparts.
    """
    reports = {}
    for label, pairs in data.heldout_parallel.items():
        srcs = embed_sentences(model, [p.y for p in pairs])
        tgts = embed_sentences(model, [p.x for p in pairs])
        reports[label] = retrieval_from_embeddings(srcs, tgts)
    return reports


def eval_alignment(model: Encoder, data: ExperimentData,
                   max_pairs: int = 200) -> dict:
    """Micro-averaged alignment quality against gold links, per language pair."""
    reports = {}
    for label, pairs in data.heldout_parallel.items():
        hits = n_pred = n_gold = 0
        for pair in pairs[:max_pairs]:
            pred = extract_alignments(model, pair)
            gold = pair.gold_alignment
            hits += len(pred & gold)
            n_pred += len(pred)
            n_gold += len(gold)
        precision = hits / n_pred if n_pred else 1.0
        recall = hits / n_gold if n_gold else 0.0
        denom = n_pred + n_gold
        aer = 1.0 - 2.0 * hits / denom if denom else 0.0
        reports[label] = AlignmentReport(precision=precision, recall=recall,
                                         aer=aer, predicted=n_pred, gold=n_gold)
    return reports


def eval_transfer(model: Encoder, data: ExperimentData,
                  n_classes: int = 4, probe_seed: int = 0) -> TransferReport:
    train_lang = data.languages[0].id
    sentences = {lang: held[0] for lang, held in data.heldout_mono.items()}
    concepts = {lang: held[1] for lang, held in data.heldout_mono.items()}
    return zero_shot_tag_transfer(model, train_lang, sentences, concepts,
                                  n_classes=n_classes, seed=probe_seed)


def write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(f"{v:.6f}" if isinstance(v, float) else str(v)
                               for v in row) + "\n")
