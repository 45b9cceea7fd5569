"""
AFIU command-line front door.

Subcommands::

    synth          write a synthetic bokeh corpus (images/ + masks/)
    pretrain       stage one: train from scratch on a SOD corpus
    finetune       stage two: initialise from --init and train on a DBD corpus
    train-scratch  baseline: train on a DBD corpus without stage one
    transfer       pretrain then finetune in one run
    eval           score a checkpoint on one or more corpora, write maps and CSVs
    curves         plot PR / F-measure / loss curves from CSVs
    inspect        print a checkpoint's metadata and manifest

Every artifact-producing command writes its effective ``config.txt``
next to its outputs; running the same command with ``--config`` pointed
at that file reproduces the run.  On failure a command prints one
``error:`` line, leaves a ``FAILED`` marker in its output directory and
exits with status 1.
"""
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from pydantic import ValidationError

# Optional: load .env so AFIU_* variables can live next to the project
# instead of in the shell profile.
try:
    from dotenv import load_dotenv
except ImportError:  # pragma: no cover
    load_dotenv = None

from blocks import ShapeError
from config import RunConfig, config_digest, load_run_config, write_effective_config
from curves import render_curves
from data import AugmentConfig, CorpusError, CorpusSpec, load_corpus, preprocess, sample_rng, synth_bokeh, write_corpus
from dump_checkpoint import dump
from metrics import evaluate_corpus, resize_to
from network import build_model, load_checkpoint, predict, read_checkpoint
from store import (
    CheckpointError,
    CsvFormatError,
    clear_failure_marker,
    format_kv,
    write_curve_csv,
    write_failure_marker,
    write_per_image_csv,
    write_summary_csv,
    write_text,
)
from training import TrainingError, train_stage, two_stage_transfer

logger = logging.getLogger(__name__)

HANDLED_ERRORS = (
    CorpusError,
    CheckpointError,
    CsvFormatError,
    TrainingError,
    ShapeError,
    ValidationError,
    ValueError,
    OSError,
)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _size(text: str) -> List[int]:
    """``64`` or ``64x96``."""
    parts = text.lower().split("x")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a size like 64 or 64x96, got {text!r}")
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected a size like 64 or 64x96, got {text!r}")
    return values


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--profile", choices=["full", "tiny"], help="base profile (default: full)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--out", help="output directory (default: $AFIU_OUTPUT_ROOT/<command>)")


def _run_config(args: argparse.Namespace, extra: Dict[str, Any]) -> RunConfig:
    extra = dict(extra)
    if args.out:
        extra["output_dir"] = args.out
    config = load_run_config(getattr(args, "config", None), getattr(args, "profile", None), getattr(args, "overrides", []), extra)
    if not args.out and not getattr(args, "config", None):
        config = config.model_copy(update={"output_dir": os.path.join(config.output_dir, args.command)})
    # where a failure marker goes if the command aborts
    args.out = config.output_dir
    return config


def _prepare(config: RunConfig) -> str:
    out_dir = config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    clear_failure_marker(out_dir)
    write_effective_config(config, out_dir)
    return out_dir


def _corpus(config: RunConfig, root: Optional[str], what: str) -> list:
    if not root:
        raise ValueError(f"no {what} corpus given (flag or corpus.{what} in the config)")
    return load_corpus(CorpusSpec(root=root, image_dir=config.corpus.image_dir, mask_dir=config.corpus.mask_dir))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    config = _run_config(args, {"synth.count": args.count, "synth.seed": args.seed, "synth.size": args.size})
    out_dir = _prepare(config)
    samples = synth_bokeh(config.synth.count, config.synth.seed, tuple(config.synth.size))
    write_corpus(samples, out_dir, config.corpus.image_dir, config.corpus.mask_dir)
    print(f"wrote {len(samples)} image/mask pairs to {out_dir}")
    return 0


def _train(args: argparse.Namespace, stage: str, corpus_key: str) -> int:
    extra = {f"corpus.{corpus_key}": getattr(args, corpus_key), "init_checkpoint": getattr(args, "init", None)}
    config = _run_config(args, extra)
    if stage == "dbd-finetuned" and not config.init_checkpoint:
        raise ValueError("finetune needs --init (or init_checkpoint in the config)")
    out_dir = _prepare(config)
    corpus = _corpus(config, getattr(config.corpus, corpus_key), corpus_key)
    model = build_model(config.model, seed=config.optim.seed)
    result = train_stage(
        corpus,
        model,
        config.optim,
        stage,
        out_dir,
        aug=config.augment,
        init=config.init_checkpoint if stage == "dbd-finetuned" else None,
        resume=args.resume,
        config_digest=config_digest(config),
    )
    print(f"{stage}: {result.metadata.epochs} epochs, {result.metadata.iterations} iterations -> {result.checkpoint}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    return _train(args, "sod-pretrained", "sod")


def cmd_finetune(args: argparse.Namespace) -> int:
    return _train(args, "dbd-finetuned", "dbd")


def cmd_train_scratch(args: argparse.Namespace) -> int:
    return _train(args, "scratch", "dbd")


def cmd_transfer(args: argparse.Namespace) -> int:
    config = _run_config(args, {"corpus.sod": args.sod, "corpus.dbd": args.dbd})
    out_dir = _prepare(config)
    result = two_stage_transfer(
        _corpus(config, config.corpus.sod, "sod"),
        _corpus(config, config.corpus.dbd, "dbd"),
        config.model,
        config.optim,
        out_dir,
        aug=config.augment,
        config_digest=config_digest(config),
    )
    print(f"pretrain -> {result.pretrain.checkpoint}")
    print(f"finetune -> {result.finetune.checkpoint}")
    return 0


def _dataset_names(config: RunConfig) -> List[str]:
    given = list(config.evaluate.datasets)
    if len(given) > len(config.corpus.eval):
        raise ValueError(f"{len(given)} dataset names given for {len(config.corpus.eval)} corpora")
    given += [""] * (len(config.corpus.eval) - len(given))
    names = [name or os.path.basename(os.path.normpath(root)) for name, root in zip(given, config.corpus.eval)]
    repeated = sorted({name for name in names if names.count(name) > 1})
    if repeated:
        raise ValueError(f"dataset names must be distinct, repeated: {', '.join(repeated)} (use --dataset)")
    return names


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(
        args,
        {
            "evaluate.checkpoint": args.checkpoint,
            "corpus.eval": args.corpus,
            "evaluate.datasets": args.dataset,
            "evaluate.workers": args.workers,
        },
    )
    if not config.corpus.eval:
        raise ValueError("no eval corpus given (--corpus or corpus.eval in the config)")
    names = _dataset_names(config)
    out_dir = _prepare(config)
    _, metadata = read_checkpoint(config.evaluate.checkpoint)
    model = build_model(metadata.model.model_copy(update={"backbone_init": "random", "backbone_weights": None}))
    load_checkpoint(config.evaluate.checkpoint, model)
    aug = AugmentConfig.identity(tuple(metadata.model.input_size))

    summary, per_image = [], []
    for dataset, root in zip(names, config.corpus.eval):
        samples = _corpus(config, root, "eval")
        pred_dir = os.path.join(out_dir, "predictions", dataset)
        os.makedirs(pred_dir, exist_ok=True)

        predictions = []
        for index, sample in enumerate(samples):
            image, _ = preprocess(sample, aug, sample_rng(0, 0, index))
            prob = predict(model, image[None])[0, 0].double().numpy()
            prob = resize_to(prob, sample.mask.shape)
            predictions.append(prob)
            # round half to even
            levels = np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)
            Image.fromarray(levels).save(os.path.join(pred_dir, sample.identifier + ".png"))

        report = evaluate_corpus(
            predictions,
            [s.mask for s in samples],
            dataset=dataset,
            workers=config.evaluate.workers,
            identifiers=[s.identifier for s in samples],
        )
        curve = report.curve
        write_curve_csv(os.path.join(out_dir, f"{dataset}_curve.csv"), curve.thresholds, curve.precision, curve.recall, curve.f_beta)
        summary.append(report.summary_row())
        per_image.extend((dataset, identifier, value) for identifier, value in zip(report.identifiers, report.per_image_mae))
        print(f"{dataset}: {report.count} images, MAE {report.mean_mae:.4f}, maxF {report.max_f_beta:.4f}")

    write_summary_csv(os.path.join(out_dir, "summary.csv"), summary)
    write_per_image_csv(os.path.join(out_dir, "per_image_mae.csv"), per_image)
    return 0


def cmd_curves(args: argparse.Namespace) -> int:
    out_dir = args.out or os.path.join(RunConfig().output_dir, "curves")
    os.makedirs(out_dir, exist_ok=True)
    clear_failure_marker(out_dir)
    write_text(
        os.path.join(out_dir, "config.txt"),
        format_kv({"curves": {"reports": list(args.reports), "loss_logs": list(args.loss_logs)}, "output_dir": out_dir}),
    )
    for path in render_curves(args.reports, args.loss_logs, out_dir):
        print(path)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    dump(args.checkpoint)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afiu", description="AFIU defocus blur detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic bokeh corpus")
    _add_config_flags(p)
    p.add_argument("--count", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=_size, help="64 or HxW")
    p.set_defaults(handler=cmd_synth)

    for name, handler, corpus_flag, help_text in (
        ("pretrain", cmd_pretrain, "--sod", "stage one on a SOD corpus"),
        ("finetune", cmd_finetune, "--dbd", "stage two on a DBD corpus"),
        ("train-scratch", cmd_train_scratch, "--dbd", "baseline without stage one"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.add_argument(corpus_flag, help="corpus root with images/ and masks/")
        p.add_argument("--resume", help="state.pt of an interrupted run of this stage")
        if name == "finetune":
            p.add_argument("--init", required=True, help="stage-one checkpoint")
        p.set_defaults(handler=handler)

    p = sub.add_parser("transfer", help="pretrain then finetune")
    _add_config_flags(p)
    p.add_argument("--sod")
    p.add_argument("--dbd")
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("eval", help="score a checkpoint on one or more corpora")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, action="append", help="corpus root; repeat to score several datasets")
    p.add_argument("--dataset", action="append", help="report name for the matching --corpus (default: its directory name)")
    p.add_argument("--workers", type=_positive_int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("curves", help="plot PR, F-measure and loss curves")
    p.add_argument("--reports", nargs="*", default=[], help="curve CSVs written by eval")
    p.add_argument("--loss-logs", nargs="*", default=[], help="loss.csv files written by training")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_curves)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.set_defaults(handler=cmd_inspect, out=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    if load_dotenv is not None:
        load_dotenv()
    logging.basicConfig(
        level=os.getenv("AFIU_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    threads = os.getenv("AFIU_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))

    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "curves" and not args.reports and not args.loss_logs:
        parser.error("curves needs at least one --reports or --loss-logs file")

    try:
        return args.handler(args)
    except HANDLED_ERRORS as exc:
        message = "error: " + " ".join(str(exc).split())
        print(message, file=sys.stderr)
        out_dir = getattr(args, "out", None)
        if out_dir is None and args.command not in ("inspect", "curves"):
            out_dir = os.path.join(os.getenv("AFIU_OUTPUT_ROOT", "runs"), args.command)
        if out_dir:
            try:
                write_failure_marker(out_dir, message)
            except OSError:
                logger.warning("could not write failure marker to %s", out_dir)
        return 1


if __name__ == "__main__":
    sys.exit(main())
