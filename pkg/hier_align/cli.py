"""
CLI for toy hierarchical contrastive alignment.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from hier_align.config import RunConfig, merge_layers, parse_overrides, resolve_config, run_meta
from hier_align.errors import DataError, NonFiniteError, exit_code_for
from hier_align.log import die, info, set_log_path

SUBCOMMANDS = ("generate", "decompose", "train", "eval", "inspect-targets", "heatmap")

# flag, section, key, help
_ALIASES: Tuple[Tuple[str, str, str, str], ...] = (
    ("--seed", "run", "seed", "Master seed for data, initialization and sampling."),
    ("--count", "world", "train_count", "Number of training scenes to generate."),
    ("--val-count", "world", "val_count", "Number of validation scenes to generate."),
    ("--mode", "train", "mode", "Alignment loss: ce or bce."),
    ("--beta", "train", "beta", "Intra-image positive weight in [0, 1]."),
    ("--steps", "train", "steps", "Optimizer steps (overrides epochs when > 0)."),
    ("--epochs", "train", "epochs", "Training epochs."),
    ("--k-sent", "train", "k_sent", "Sentence slots per hierarchy."),
    ("--k-phrase", "train", "k_phrase", "Phrase slots per hierarchy."),
    ("--data-dir", "paths", "data_dir", "Directory holding train.jsonl and val.jsonl."),
    ("--run-dir", "paths", "run_dir", "Run directory for logs, metrics and checkpoints."),
    ("--checkpoint", "paths", "checkpoint", "Checkpoint path (default: <run-dir>/checkpoint.bclp)."),
    ("--out-dir", "paths", "out_dir", "Report directory (default: the run directory)."),
)


def _parser(name: str, description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=f"python -m hier_align {name}", description=description)
    parser.add_argument("--config", default=None, metavar="FILE", help="Sectioned key = value config file.")
    for flag, section, key, text in _ALIASES:
        parser.add_argument(flag, dest=f"{section}.{key}", default=None, metavar="VALUE", help=text)
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars.")
    return parser


def _resolve(
    parser: argparse.ArgumentParser,
    argv: Sequence[str],
    extras: Sequence[Tuple[str, str, str]] = (),
) -> Tuple[RunConfig, argparse.Namespace]:
    """
    Parse known flags, treat the rest as --section.key overrides, and layer
    everything over the config file and BCLIP_* environment variables.
    ``extras`` maps command-specific flags (attr, section, key) into the config.
    """
    raw, rest = parser.parse_known_args(list(argv))
    flags: Dict[str, Dict[str, str]] = {}
    for _flag, section, key, _text in _ALIASES:
        value = getattr(raw, f"{section}.{key}")
        if value is not None:
            flags.setdefault(section, {})[key] = value
    if raw.quiet:
        flags.setdefault("run", {})["progress"] = "false"
    for attr, section, key in extras:
        value = getattr(raw, attr)
        if value is True:
            flags.setdefault(section, {})[key] = "true"
        elif value is not None and value is not False:
            flags.setdefault(section, {})[key] = str(value)
    try:
        layer = merge_layers(flags, parse_overrides(rest))
        cfg = resolve_config(Path(raw.config).expanduser() if raw.config else None, os.environ, layer)
    except ValueError as exc:
        parser.error(str(exc))
    return cfg, raw


def _echo(cfg: RunConfig) -> Dict[str, Any]:
    return cfg.to_dict()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(argv: Sequence[str]) -> None:
    from hier_align.orchestrator import Step, run_pipeline
    from hier_align.storage import write_json
    from hier_align.toyworld import generate_dataset, write_dataset

    parser = _parser("generate", "Generate synthetic train/val scene datasets as JSON lines.")
    cfg, _ = _resolve(parser, argv)
    set_log_path(cfg.paths.run_dir / "run.log")
    seed, world, paths = cfg.run.seed, cfg.world, cfg.paths

    def _split(split: str, count: int, path: Path) -> int:
        return write_dataset(path, generate_dataset(seed, count, world, split), world, seed, split)

    steps = [
        Step("Generate training split", lambda: _split("train", world.train_count, paths.train_file)),
        Step("Generate validation split", lambda: _split("val", world.val_count, paths.val_file)),
    ]
    steps.append(
        Step(
            "Write dataset manifest",
            lambda: write_json(
                paths.data_dir / "dataset.json",
                {
                    "config": _echo(cfg),
                    "files": {"train": str(paths.train_file), "val": str(paths.val_file)},
                    "counts": {"train": steps[0].result, "val": steps[1].result},
                    "meta": run_meta(),
                },
            ),
        )
    )
    run_pipeline("generate", steps, progress=cfg.run.progress)
    info(f"Wrote {steps[0].result} training and {steps[1].result} validation scenes to {paths.data_dir}.")


def cmd_decompose(argv: Sequence[str]) -> None:
    from collections import Counter

    from hier_align.decompose import assemble_hierarchy, decompose_caption
    from hier_align.numerics import Rng
    from hier_align.storage import dumps_canonical, iter_jsonl
    from hier_align.vocab import tokenize

    parser = _parser("decompose", "Clean, split and phrase-chunk captions into K-slot hierarchies.")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--text", default=None, metavar="CAPTION", help="One caption to decompose.")
    source.add_argument("--input", default=None, metavar="FILE", help="JSON lines with a 'caption' token list.")
    cfg, raw = _resolve(parser, argv)

    captions: List[List[str]] = []
    if raw.text is not None:
        captions.append(tokenize(raw.text))
    else:
        for lineno, rec in iter_jsonl(Path(raw.input).expanduser()):
            caption = rec.get("caption")
            if isinstance(caption, str):
                caption = tokenize(caption)
            if not isinstance(caption, list) or not caption:
                raise DataError(f"{raw.input}:{lineno}: record has no caption")
            captions.append([str(t) for t in caption])

    rng = Rng(cfg.run.seed, ("decompose",))
    for i, tokens in enumerate(captions):
        counters: Counter = Counter()
        cleaned, sentences, phrases = decompose_caption(tokens)
        hierarchy = assemble_hierarchy(
            cleaned, sentences, phrases, cfg.train.k_sent, cfg.train.k_phrase, rng.child(i), counters
        )
        print(
            dumps_canonical(
                {
                    "cleaned": list(cleaned),
                    "sentences": [list(s) for s in sentences],
                    "phrases": [list(p) for p in phrases],
                    "hierarchy": hierarchy.to_dict(),
                    "counters": dict(counters),
                }
            )
        )


def cmd_train(argv: Sequence[str]) -> None:
    from hier_align.model import Model
    from hier_align.orchestrator import Step, run_pipeline
    from hier_align.storage import write_json
    from hier_align.toyworld import read_dataset
    from hier_align.train import run_training
    from hier_align.vocab import default_vocabulary

    parser = _parser(
        "train",
        "Train the toy model and write a checkpoint plus metrics log. Validation metrics are logged "
        "every train.eval_every optimizer steps (default 100, 0 disables).",
    )
    parser.add_argument("--resume", default=None, metavar="FILE", help="Continue from a checkpoint with optimizer state.")
    cfg, raw = _resolve(parser, argv)
    paths = cfg.paths
    set_log_path(paths.run_dir / "run.log")
    echo = _echo(cfg)

    def _load_val() -> List[Any]:
        return read_dataset(paths.val_file) if paths.val_file.exists() else []

    def _train() -> Any:
        return run_training(
            steps[0].result,
            cfg.train,
            steps[2].result,
            paths.run_dir,
            val=steps[1].result,
            eval_cfg=cfg.eval,
            config_echo=echo,
            resume=Path(raw.resume).expanduser() if raw.resume else None,
            progress=cfg.run.progress,
        )

    steps = [
        Step("Load training split", lambda: read_dataset(paths.train_file)),
        Step("Load validation split", _load_val),
        Step("Build model", lambda: Model(cfg.model, cfg.world, default_vocabulary(), seed=cfg.run.seed)),
        Step("Train", _train),
        Step("Write config echo", lambda: write_json(paths.run_dir / "config.json", {"config": echo, "meta": run_meta()})),
    ]
    run_pipeline("train", steps, progress=cfg.run.progress)
    result = steps[3].result
    if result.losses:
        info(f"Final loss {result.losses[-1]:.4f} after {result.state.step} steps.")


def cmd_eval(argv: Sequence[str]) -> None:
    from hier_align.checkpoint import load_checkpoint, restore_model
    from hier_align.evaluation import evaluate_model, flatten_report, write_eval_report
    from hier_align.orchestrator import Step, run_pipeline
    from hier_align.storage import append_jsonl
    from hier_align.toyworld import read_dataset

    parser = _parser("eval", "Evaluate a checkpoint on the validation split.")
    parser.add_argument("--tci", action="store_true", help="Also rank with text-conditioned image embeddings.")
    cfg, _ = _resolve(parser, argv, (("tci", "eval", "tci"),))
    paths = cfg.paths
    out_dir = paths.output_dir
    set_log_path(paths.run_dir / "run.log")

    steps = [
        Step("Load checkpoint", lambda: load_checkpoint(paths.checkpoint_path)),
        Step("Load validation split", lambda: read_dataset(paths.val_file)),
    ]
    steps.append(Step("Evaluate", lambda: evaluate_model(restore_model(steps[0].result), steps[1].result, cfg.train, cfg.eval)))
    steps.append(
        Step(
            "Write reports",
            lambda: write_eval_report(out_dir / "eval.json", out_dir / "eval.csv", steps[2].result, _echo(cfg), run_meta()),
        )
    )
    run_pipeline("eval", steps, progress=cfg.run.progress)

    optimizer = steps[0].result.header.get("optimizer") or {}
    step = int(optimizer.get("step", 0))
    for name, value in sorted(flatten_report(steps[2].result).items()):
        append_jsonl(out_dir / "metrics.jsonl", {"step": step, "metric": f"eval/{name}", "value": value})
        info(f"{name} = {value:.4f}")


def _format_rows(matrix: np.ndarray) -> List[str]:
    return [",".join(f"{v:.4f}" for v in row) for row in matrix]


def cmd_inspect_targets(argv: Sequence[str]) -> None:
    from hier_align.decompose import slot_levels
    from hier_align.loss import LossMode, build_targets

    parser = _parser("inspect-targets", "Print the target matrices for a B x K grid as CSV.")
    parser.add_argument("--b", type=int, default=1, metavar="B", help="Images in the batch.")
    parser.add_argument("--k", type=int, default=2, metavar="K", help="Text slots per image.")
    parser.add_argument("--calibrate", action="store_true", help="Apply distance calibration.")
    parser.add_argument("--lambda", dest="lam", default=None, metavar="L", help="Calibration decay rate.")
    parser.add_argument("--distance", default=None, metavar="KIND", help="Calibration distance: index or level.")
    parser.add_argument(
        "--matrix",
        default="auto",
        choices=["auto", "p", "w", "y"],
        help="Matrix to print; auto prints p for ce and y then w for bce.",
    )
    cfg, raw = _resolve(
        parser,
        argv,
        (("calibrate", "train", "calibrate"), ("lam", "train", "cal_lambda"), ("distance", "train", "cal_distance")),
    )
    if raw.b < 1 or raw.k < 1:
        parser.error(f"--b={raw.b} and --k={raw.k} must both be >= 1.")
    tc = cfg.train
    tgt = build_targets(tc.mode, raw.b, raw.k, tc.beta, tc.calibration, slot_levels(raw.k - 1, 0))

    if raw.matrix == "auto" and tgt.mode == LossMode.CE:
        lines = _format_rows(tgt.p)
    elif raw.matrix == "auto":
        lines = ["# y", *_format_rows(tgt.y), "# w", *_format_rows(tgt.w)]
    else:
        matrix = getattr(tgt, raw.matrix)
        if matrix is None:
            parser.error(f"--matrix {raw.matrix} is not defined for mode {tgt.mode.value}.")
        lines = _format_rows(matrix)
    print("\n".join(lines))


def cmd_heatmap(argv: Sequence[str]) -> None:
    from hier_align import numerics as nx
    from hier_align.checkpoint import load_checkpoint, restore_model
    from hier_align.encoders import encode_token_batch
    from hier_align.evaluation import encode_images, export_heatmap
    from hier_align.loss import MAX_LOGIT_SCALE
    from hier_align.storage import dumps_canonical
    from hier_align.toyworld import read_dataset
    from hier_align.vocab import tokenize

    parser = _parser("heatmap", "Write a patch-text similarity map for one scene.")
    parser.add_argument("--scene", type=int, default=None, metavar="INDEX", help="Scene index in the split.")
    parser.add_argument("--text", default=None, metavar="TEXT", help="Query text (default: first annotated phrase).")
    parser.add_argument("--split", default="val", choices=["train", "val"])
    cfg, raw = _resolve(parser, argv, (("scene", "eval", "heatmap_scene"), ("text", "eval", "heatmap_text")))
    paths = cfg.paths
    set_log_path(paths.run_dir / "run.log")

    model = restore_model(load_checkpoint(paths.checkpoint_path))
    examples = read_dataset(paths.val_file if raw.split == "val" else paths.train_file)
    index = cfg.eval.heatmap_scene
    if index >= len(examples):
        raise DataError(f"eval.heatmap_scene={index} is outside the {len(examples)} {raw.split} scenes")
    example = examples[index]
    if cfg.eval.heatmap_text:
        query = tokenize(cfg.eval.heatmap_text)
    elif example.annotations:
        query = list(example.captions.phrases[example.annotations[0].phrase_index])
    else:
        query = list(example.captions.caption)

    image = encode_images(model, [example])
    with nx.no_grad():
        text = encode_token_batch(model.text, model.vocab, [query])
    scale = min(float(np.exp(model.log_scale.data)), MAX_LOGIT_SCALE)
    stem = paths.output_dir / f"heatmap_{raw.split}_{index}"
    values = export_heatmap(
        image,
        text.data[0],
        stem.with_suffix(".csv"),
        scale=scale,
        pgm_path=stem.with_suffix(".pgm") if cfg.eval.pgm else None,
        header=f"query={' '.join(query)} config={dumps_canonical(_echo(cfg))}",
    )
    peak = int(np.argmax(values))
    info(f"Heatmap written to {stem}.csv; peak at cell {divmod(peak, values.shape[1])}.")


_COMMANDS: Dict[str, Callable[[Sequence[str]], None]] = {
    "generate": cmd_generate,
    "decompose": cmd_decompose,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-targets": cmd_inspect_targets,
    "heatmap": cmd_heatmap,
}


def dispatch(argv: Optional[List[str]] = None) -> None:
    parser = argparse.ArgumentParser(
        prog="python -m hier_align",
        description="Hierarchical text-conditioned contrastive alignment on a synthetic grid world.",
        add_help=False,
    )
    parser.add_argument("subcommand", nargs="?", default=None, choices=SUBCOMMANDS)
    parser.add_argument("--help", "-h", action="store_true")

    args = list(sys.argv[1:] if argv is None else argv)
    known, remaining = parser.parse_known_args(args[:1])
    sub = known.subcommand
    rest = remaining + args[1:]

    if sub is None:
        _print_help()
        return
    try:
        _COMMANDS[sub](rest)
    except (DataError, NonFiniteError, OSError, ValueError) as exc:
        die(str(exc), exit_code_for(exc))


def _print_help() -> None:
    print(
        "Usage: python -m hier_align <subcommand> [options] [--section.key value ...]\n\n"
        "Subcommands:\n"
        "  generate          Write synthetic train/val scenes (JSON lines)\n"
        "  decompose         Show the caption hierarchy built from a caption\n"
        "  train             Train and write <run-dir>/checkpoint.bclp\n"
        "  eval              Evaluate a checkpoint (--tci for text-conditioned retrieval)\n"
        "  inspect-targets   Print target matrices as CSV\n"
        "  heatmap           Patch-text similarity map for one scene\n\n"
        "Examples:\n"
        "  python -m hier_align generate --seed 0 --data-dir data\n"
        "  python -m hier_align train --data-dir data --run-dir runs/ce --mode ce --beta 0.5\n"
        "  python -m hier_align inspect-targets --b 1 --k 2 --beta 0.5 --mode ce\n"
    )
