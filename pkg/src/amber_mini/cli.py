"""Command-line entry points: gen / train / eval / ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence, 5 io error.  Every failure prints a single machine-parseable
line "ERROR:<kind>: message" to stderr.

The AMBER_MINI_THREADS environment variable, when set, caps the BLAS
thread pools used during evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_IO = 5


def _cap_threads() -> None:
    cap = os.environ.get("AMBER_MINI_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


_cap_threads()

import numpy as np  # noqa: E402  (after the thread cap on purpose)

from .config import ExperimentConfig, generate_data, load_config, load_data  # noqa: E402
from .corpus import DataError  # noqa: E402
from .evaluate import EvalError  # noqa: E402
from .objectives import BatchCompositionError  # noqa: E402
from .pipeline import (LADDER, corpus_hash, eval_alignment, eval_retrieval,  # noqa: E402
                       eval_transfer, train_experiment, write_tsv)
from .trainer import (CheckpointFormatError, ConfigError, DivergenceError,  # noqa: E402
                      load_checkpoint)
from . import plots  # noqa: E402


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amber-mini",
        description="Train and evaluate a miniature multilingual encoder with "
                    "explicit cross-lingual alignment objectives on synthetic "
                    "cipher-language corpora.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic corpora")
    gen.add_argument("--config", help="experiment config JSON (defaults apply)")
    gen.add_argument("--seed", type=int, help="override the config seed")
    gen.add_argument("--out", required=True, help="data output directory")

    train = sub.add_parser("train", help="train a model on generated corpora")
    train.add_argument("--config", help="experiment config JSON")
    train.add_argument("--seed", type=int)
    train.add_argument("--data", required=True, help="data directory from gen")
    train.add_argument("--out", required=True, help="run output directory")
    train.add_argument("--objectives",
                       help="comma list drawn from mlm,tlm,wa,sa")
    train.add_argument("--steps", type=int, help="override training steps")
    train.add_argument("--phase2-from", dest="phase2_from",
                       help="checkpoint to warm-start from (two-phase regimen)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--task", required=True,
                    choices=["retrieve", "align", "transfer"])
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)

    ab = sub.add_parser("ablate",
                        help="run the four-objective ladder and compare")
    ab.add_argument("--config")
    ab.add_argument("--seed", type=int)
    ab.add_argument("--out", required=True)
    return parser


def _load_cfg(args) -> ExperimentConfig:
    source = args.config if args.config else {}
    return load_config(source, seed_override=args.seed)


def cmd_gen(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    data = generate_data(cfg, out)
    (out / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    for lang in data.languages:
        print(f"{lang.id}: {len(data.mono[lang])} monolingual sentences")
    for label, pairs in data.parallel.items():
        held = len(data.heldout_parallel[label])
        print(f"{label}: {len(pairs)} parallel pairs (+{held} held out)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = load_data(Path(args.data))
    objectives = args.objectives.split(",") if args.objectives else None
    phase2 = Path(args.phase2_from) if args.phase2_from else None
    out = Path(args.out)
    _, summary = train_experiment(cfg, data, out_dir=out,
                                  objectives=objectives, steps=args.steps,
                                  seed=args.seed, phase2_from=phase2)
    if (out / "metrics.jsonl").stat().st_size > 0:
        plots.save_training_curve(out / "metrics.jsonl",
                                  out / "training_curve.png")
    print(f"trained {summary['steps']} steps "
          f"[{','.join(summary['objectives'])}] "
          f"final loss {summary['final_loss'] if summary['final_loss'] is not None else 'n/a'}")
    return EXIT_OK


def _run_eval_task(model, data, task: str, out: Path, probe_seed: int = 0):
    if task == "retrieve":
        reports = eval_retrieval(model, data)
        rows = [(label, r.accuracy, r.candidates, r.ties)
                for label, r in reports.items()]
        avg = sum(r.accuracy for r in reports.values()) / len(reports)
        write_tsv(out / "retrieval.tsv",
                  ["pair", "accuracy", "candidates", "ties"], rows)
        plots.save_bar_figure([r[0] for r in rows], [r[1] for r in rows],
                              out / "retrieval.png", "sentence retrieval",
                              "accuracy@1", ylim=(0, 1.05))
        return f"retrieval average accuracy {avg:.4f}", {"average": avg,
                "per_pair": {label: r.accuracy for label, r in reports.items()}}
    if task == "align":
        reports = eval_alignment(model, data)
        rows = [(label, r.aer, r.precision, r.recall)
                for label, r in reports.items()]
        avg = sum(r.aer for r in reports.values()) / len(reports)
        write_tsv(out / "alignment.tsv",
                  ["pair", "aer", "precision", "recall"], rows)
        plots.save_bar_figure([r[0] for r in rows], [r[1] for r in rows],
                              out / "alignment.png", "word alignment",
                              "AER", ylim=(0, 1.05))
        return f"alignment average AER {avg:.4f}", {"average_aer": avg,
                "per_pair": {label: r.aer for label, r in reports.items()}}
    report = eval_transfer(model, data, probe_seed=probe_seed)
    rows = [(lang, acc) for lang, acc in report.per_language.items()]
    write_tsv(out / "transfer.tsv", ["language", "accuracy"], rows)
    write_tsv(out / "transfer_summary.tsv",
              ["train_language", "train_accuracy", "transfer_gap"],
              [(report.train_language, report.train_accuracy,
                report.transfer_gap)])
    plots.save_bar_figure([r[0] for r in rows], [r[1] for r in rows],
                          out / "transfer.png", "zero-shot tagging",
                          "token accuracy", ylim=(0, 1.05))
    targets = [acc for lang, acc in report.per_language.items()
               if lang != report.train_language]
    mean_target = sum(targets) / len(targets)
    return f"transfer mean target-language accuracy {mean_target:.4f}", \
        {"mean_target": mean_target, "per_language": report.per_language}


def cmd_eval(args) -> int:
    data = load_data(Path(args.data))
    state = load_checkpoint(Path(args.checkpoint))
    if state.model_config.vocab_size != len(data.vocab):
        raise DataError(f"checkpoint vocabulary ({state.model_config.vocab_size}) "
                        f"does not match dataset ({len(data.vocab)})")
    model = state.build_model()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_line, payload = _run_eval_task(model, data, args.task, out)
    (out / f"{args.task}.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(summary_line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    data = generate_data(cfg, data_dir)
    digest = corpus_hash(data_dir)

    table_rows = []
    per_rung = {}
    for rung_name, objectives in LADDER:
        rung_dir = out / f"rung_{rung_name}"
        model, _ = train_experiment(cfg, data, out_dir=rung_dir,
                                    objectives=objectives)
        _, retrieval = _run_eval_task(model, data, "retrieve", rung_dir)
        _, alignment = _run_eval_task(model, data, "align", rung_dir)
        _, transfer = _run_eval_task(model, data, "transfer", rung_dir,
                                     probe_seed=cfg.eval["probe_seed"])
        per_rung[rung_name] = {"retrieval": retrieval, "alignment": alignment,
                               "transfer": transfer}
        table_rows.append((rung_name, "+".join(objectives),
                           retrieval["average"], alignment["average_aer"],
                           transfer["mean_target"], digest))
        print(f"{rung_name}: retrieval {retrieval['average']:.4f} "
              f"AER {alignment['average_aer']:.4f} "
              f"transfer {transfer['mean_target']:.4f}")

    write_tsv(out / "ablation.tsv",
              ["rung", "objectives", "retrieval_acc", "aer",
               "transfer_acc", "corpus_sha256"], table_rows)
    plots.save_ablation_figure(
        [r[0] for r in table_rows],
        {"retrieval": [r[2] for r in table_rows],
         "transfer": [r[4] for r in table_rows]},
        out / "ablation.png")

    # per-language gain of the full objective over the masked-LM baseline
    base = per_rung["mlm"]["retrieval"]["per_pair"]
    full = per_rung["mlm_tlm_wa_sa"]["retrieval"]["per_pair"]
    deltas = [(label, data.parallel_sizes[label], full[label] - base[label])
              for label in full]
    write_tsv(out / "deltas.tsv",
              ["pair", "parallel_pairs", "retrieval_delta"], deltas)
    plots.save_delta_figure(deltas, out / "deltas.png")
    (out / "ablation.json").write_text(
        json.dumps(per_rung, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
                "ablate": cmd_ablate}
    try:
        return handlers[args.command](args)
    except (ConfigError,) as exc:
        print(f"ERROR:config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"ERROR:divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, CheckpointFormatError, BatchCompositionError,
            EvalError) as exc:
        print(f"ERROR:data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"ERROR:io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
