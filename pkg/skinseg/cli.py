"""Command-line entry point for the skin segmentation pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

from pydantic import ValidationError

from . import __version__
from .bayes import bc_prob_map, binarize, fit_histograms, load_histograms, save_histograms
from .config import PipelineConfig, derive_seed, load_pipeline_config
from .const import DEFAULT_BINS, DEFAULT_PRIORS, DEFAULT_THRESHOLD, PR_STEPS, SPLIT_FRACTIONS
from .coordinator import PipelineCoordinator
from .ensemble import (
    ModelRegistry,
    Scheme,
    infer,
    load_spec,
    model_input,
    parse_spec,
    train_second_level,
)
from .errors import (
    ArtifactFormatError,
    ContractError,
    EnsembleSpecError,
    ImageParseError,
    TrainingDivergedError,
)
from .evaluation import (
    evaluate_maps,
    pr_curve,
    read_report,
    render_overlay,
    wilcoxon_signed_rank,
    write_report,
    write_table,
)
from .imgio import (
    BinaryMask,
    ProbMap,
    generate_synthetic_dataset,
    load_dataset,
    read_image,
    read_mask,
    read_prob_map,
    read_split,
    select,
    split_dataset,
    write_dataset,
    write_image,
    write_mask,
    write_prob_map,
    write_split,
)
from .skinny import forward, load_weights, save_weights
from .train import Branch, TrainRecord, train_model, training_samples

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2

Handler = Callable[[argparse.Namespace], None]


class UsageError(Exception):
    """Raised instead of exiting when the command line cannot be parsed."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise UsageError(message)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Send log records to stderr at the requested level."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


# ---------------------------------------------------------------------------
# Helpers


def _pipeline_config(args: argparse.Namespace, **overrides: Any) -> PipelineConfig:
    return load_pipeline_config(getattr(args, "config", None), overrides)


def _write_json(path: Path | str, payload: Any) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_record(path: Path | str | None, record: TrainRecord) -> None:
    if path is not None:
        Path(path).write_text(record.model_dump_json(indent=2) + "\n", encoding="utf-8")


def _paired_maps(pred_dir: str, truth_dir: str) -> tuple[list[str], list[ProbMap], list[BinaryMask]]:
    """Pair probability maps with truth masks of the same file name."""
    preds = sorted(Path(pred_dir).glob("*.pgm"))
    if not preds:
        raise ContractError(f"no .pgm maps found in {pred_dir}")
    ids, maps, truths = [], [], []
    for path in preds:
        truth_path = Path(truth_dir) / path.name
        if not truth_path.is_file():
            raise FileNotFoundError(f"no truth mask for {path.name} in {truth_dir}")
        ids.append(path.stem)
        maps.append(read_prob_map(path))
        truths.append(read_mask(truth_path))
    return ids, maps, truths


def _save_map(path: str, prob: ProbMap, threshold: float | None) -> None:
    if threshold is None:
        write_prob_map(path, prob)
    else:
        write_mask(path, binarize(prob, threshold))


# ---------------------------------------------------------------------------
# Commands


def _cmd_gen_data(args: argparse.Namespace) -> None:
    samples = generate_synthetic_dataset(
        args.samples,
        args.size,
        derive_seed(args.seed, "data"),
        color_decoys=args.color_decoys,
        texture_decoys=args.texture_decoys,
    )
    print(write_dataset(samples, args.out))


def _cmd_split(args: argparse.Namespace) -> None:
    samples = load_dataset(args.manifest)
    train, validation, test = args.fractions
    split = split_dataset(samples, (train, validation, test), derive_seed(args.seed, "split"))
    write_split(args.out, split)


def _cmd_train_bc(args: argparse.Namespace) -> None:
    samples = load_dataset(args.manifest, args.max_side)
    if args.split is not None:
        samples = select(samples, read_split(args.split).train)
    save_histograms(fit_histograms(samples, args.bins), args.out)


def _cmd_bc_infer(args: argparse.Namespace) -> None:
    hist = load_histograms(args.hist)
    p_skin, p_nonskin = args.priors
    prob = bc_prob_map(hist, read_image(args.input), (p_skin, p_nonskin), alpha=args.alpha)
    _save_map(args.out, prob, args.binary)


def _model_name(channels: str, branch: Branch) -> str:
    if channels == "gs":
        return "skinny-gs" if branch is Branch.NONE else f"skinny-gs-{branch}"
    return "skinny-rgb" if branch is Branch.NONE else f"skinny-{branch}"


def _cmd_train_skinny(args: argparse.Namespace) -> None:
    config = _pipeline_config(
        args,
        manifest=args.manifest,
        split=args.split,
        arch=args.arch,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        max_side=args.max_side,
    )
    config.require_inputs()
    if config.manifest is None or config.split is None:
        raise ContractError("train-skinny needs --manifest and --split")
    samples = load_dataset(config.manifest, config.max_side)
    split = read_split(config.split)
    train, val = select(samples, split.train), select(samples, split.validation)
    branch = Branch(args.branch)
    checkpoint_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None

    if args.channels == "stack":
        if args.spec is None:
            raise ContractError("--channels stack needs --spec")
        spec = load_spec(args.spec)
        registry = ModelRegistry(Path(args.spec).parent)
        name = spec.name or "stack"
        weights, record = train_second_level(
            spec.sources,
            registry,
            train,
            config.train_config(name, checkpoint_dir),
            config.network_config(name, len(spec.sources)),
            val,
        )
    else:
        bc_masks = None
        if branch is not Branch.NONE:
            if args.bc is None:
                raise ContractError(f"--branch {branch} needs --bc")
            hist = load_histograms(args.bc)
            bc_masks = {
                sample.id: binarize(bc_prob_map(hist, sample.image), config.threshold)
                for sample in train
            }
        grayscale = args.channels == "gs"
        name = _model_name(args.channels, branch)
        weights, record = train_model(
            config.network_config(name, 1 if grayscale else 3),
            config.train_config(name, checkpoint_dir),
            training_samples(train, grayscale=grayscale, bc_masks=bc_masks, branch=branch),
            training_samples(val, grayscale=grayscale),
        )
    save_weights(weights, args.out)
    _write_record(args.log, record)


def _cmd_infer(args: argparse.Namespace) -> None:
    weights = load_weights(args.model)
    img = read_image(args.input)
    _save_map(args.out, forward(weights, model_input(weights, img)), args.binary)


def _cmd_train_ensemble(args: argparse.Namespace) -> None:
    config = _pipeline_config(
        args,
        manifest=args.manifest,
        split=args.split,
        arch=args.arch,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    config.require_inputs()
    if config.manifest is None or config.split is None:
        raise ContractError("train-ensemble needs --manifest and --split")
    spec = load_spec(args.spec)
    if spec.scheme is not Scheme.STACK or spec.second_level is None:
        raise EnsembleSpecError("only stacking ensembles have a trainable second level")
    registry = ModelRegistry(Path(args.spec).parent)
    samples = load_dataset(config.manifest, config.max_side)
    split = read_split(config.split)
    name = spec.name or "stack"
    weights, record = train_second_level(
        spec.sources,
        registry,
        select(samples, split.train),
        config.train_config(name),
        config.network_config(name, len(spec.sources)),
        select(samples, split.validation),
    )
    save_weights(weights, registry.resolve(spec.second_level))
    _write_record(args.log, record)


def _cmd_ensemble_infer(args: argparse.Namespace) -> None:
    spec = load_spec(args.spec)
    if args.threshold is not None:
        spec = parse_spec({**spec.model_dump(), "threshold": args.threshold})
    registry = ModelRegistry(Path(args.spec).parent)
    _save_map(args.out, infer(spec, read_image(args.input), registry), args.binary)


def _cmd_evaluate(args: argparse.Namespace) -> None:
    ids, maps, truths = _paired_maps(args.pred_dir, args.truth_dir)
    report = evaluate_maps(args.method, ids, maps, truths, threshold=args.threshold, steps=args.steps)
    write_report(args.out, report)
    if args.table is not None:
        write_table(args.table, [report])


def _cmd_pr_curve(args: argparse.Namespace) -> None:
    _, maps, truths = _paired_maps(args.pred_dir, args.truth_dir)
    _write_json(args.out, [list(point) for point in pr_curve(maps, truths, args.steps)])


def _cmd_wilcoxon(args: argparse.Namespace) -> None:
    first, second = read_report(args.a), read_report(args.b)
    scores = {item.id: item.f for item in second.per_image}
    ids = [item.id for item in first.per_image]
    if sorted(ids) != sorted(scores):
        raise ContractError("the two reports cover different images")
    result = wilcoxon_signed_rank(first.f_scores(), [scores[i] for i in ids], args.method)
    payload = result._asdict()
    if args.out is not None:
        _write_json(args.out, payload)
    print(json.dumps(payload))


def _cmd_overlay(args: argparse.Namespace) -> None:
    pred = binarize(read_prob_map(args.pred), args.threshold)
    write_image(args.out, render_overlay(read_image(args.input), pred, read_mask(args.truth)))


def _cmd_reproduce_desk(args: argparse.Namespace) -> None:
    config = _pipeline_config(
        args,
        out_dir=args.out,
        seed=args.seed,
        samples=args.samples,
        size=args.size,
        epochs=args.epochs,
        arch=args.arch,
        manifest=args.manifest,
        split=args.split,
        max_side=args.max_side,
        checkpoint_every=args.checkpoint_every,
        overlays=args.overlays,
        all_stacks=args.all_stacks or None,
    )
    print(PipelineCoordinator(config).run())


# ---------------------------------------------------------------------------
# Parser


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", help="dataset manifest.json")
    parser.add_argument("--split", help="split file")
    parser.add_argument("--arch", help="e.g. levels=3,base=16,inception=false,dense=false")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--log", help="write the training record JSON here")


def _add_map_output(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output .pgm")
    parser.add_argument(
        "--binary",
        type=float,
        metavar="THRESHOLD",
        help="write a binary mask at this threshold instead of the probability map",
    )


def build_parser() -> argparse.ArgumentParser:
    """Return the parser with every subcommand."""
    parser = _Parser(prog="skinseg", description="Skin segmentation with color, texture and ensembles.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="pipeline config JSON; flags override its values")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, handler: Handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        return sub

    sub = command("gen-data", _cmd_gen_data, "Generate a synthetic skin dataset.")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--samples", type=int, default=40)
    sub.add_argument("--size", type=int, default=64)
    sub.add_argument("--seed", type=int, default=17)
    sub.add_argument("--color-decoys", type=int, default=2)
    sub.add_argument("--texture-decoys", type=int, default=2)

    sub = command("split", _cmd_split, "Split a dataset into train, validation and test ids.")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--seed", type=int, default=17)
    sub.add_argument("--fractions", type=float, nargs=3, default=list(SPLIT_FRACTIONS))

    sub = command("train-bc", _cmd_train_bc, "Fit the Bayesian color classifier.")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--split", help="fit on the train ids only")
    sub.add_argument("--bins", type=int, default=DEFAULT_BINS)
    sub.add_argument("--max-side", type=int)
    sub.add_argument("--out", required=True, help="output .bch")

    sub = command("bc-infer", _cmd_bc_infer, "Apply the color classifier to one image.")
    sub.add_argument("--hist", required=True)
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--priors", type=float, nargs=2, default=list(DEFAULT_PRIORS))
    sub.add_argument("--alpha", type=float, default=0.0, help="add-alpha histogram smoothing")
    _add_map_output(sub)

    sub = command("train-skinny", _cmd_train_skinny, "Train one segmentation network.")
    _add_training_flags(sub)
    sub.add_argument("--channels", choices=("rgb", "gs", "stack"), default="rgb")
    sub.add_argument("--branch", choices=[b.value for b in Branch], default=Branch.NONE.value)
    sub.add_argument("--bc", help="histogram file for --branch skin/nonskin")
    sub.add_argument("--spec", help="ensemble spec giving the sources for --channels stack")
    sub.add_argument("--max-side", type=int)
    sub.add_argument("--checkpoint-every", type=int)
    sub.add_argument("--checkpoint-dir")
    sub.add_argument("--out", required=True, help="output .sknw")

    sub = command("infer", _cmd_infer, "Run a trained network on one image.")
    sub.add_argument("--model", required=True)
    sub.add_argument("--in", dest="input", required=True)
    _add_map_output(sub)

    sub = command("train-ensemble", _cmd_train_ensemble, "Train a stack's second-level network.")
    sub.add_argument("--spec", required=True)
    _add_training_flags(sub)

    sub = command("ensemble-infer", _cmd_ensemble_infer, "Run an ensemble on one image.")
    sub.add_argument("--spec", required=True)
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--threshold", type=float, help="override the spec's vote and selection threshold")
    _add_map_output(sub)

    sub = command("evaluate", _cmd_evaluate, "Score probability maps against truth masks.")
    sub.add_argument("--pred-dir", required=True)
    sub.add_argument("--truth-dir", required=True)
    sub.add_argument("--out", required=True, help="report JSON")
    sub.add_argument("--method", default="method")
    sub.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sub.add_argument("--steps", type=int, default=PR_STEPS)
    sub.add_argument("--table", help="also write a one-row results CSV")

    sub = command("pr-curve", _cmd_pr_curve, "Compute a pooled precision-recall curve.")
    sub.add_argument("--pred-dir", required=True)
    sub.add_argument("--truth-dir", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--steps", type=int, default=PR_STEPS)

    sub = command("wilcoxon", _cmd_wilcoxon, "Compare per-image F-scores of two reports.")
    sub.add_argument("--a", required=True)
    sub.add_argument("--b", required=True)
    sub.add_argument("--method", choices=("auto", "exact", "normal"), default="auto")
    sub.add_argument("--out")

    sub = command("overlay", _cmd_overlay, "Render false positives and negatives.")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--pred", required=True)
    sub.add_argument("--truth", required=True)
    sub.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    sub.add_argument("--out", required=True)

    sub = command("reproduce-desk", _cmd_reproduce_desk, "Run the full desk-scale experiment.")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--samples", type=int)
    sub.add_argument("--size", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--arch")
    sub.add_argument("--manifest")
    sub.add_argument("--split")
    sub.add_argument("--max-side", type=int)
    sub.add_argument("--checkpoint-every", type=int)
    sub.add_argument("--overlays", type=int, metavar="K", help="overlays for the first K test images")
    sub.add_argument("--all-stacks", action="store_true", help="train every stacking variant")
    return parser


def _fail(kind: str, err: BaseException, code: int) -> int:
    message = str(err).splitlines()[0] if str(err) else type(err).__name__
    print(f"skinseg: {kind}: {message}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail("usage error", err, EXIT_USER_ERROR)
    except SystemExit as exit_:
        return int(exit_.code or 0)

    setup_logging(args.verbose, args.quiet)
    handler: Handler = args.handler
    try:
        handler(args)
    except (ImageParseError, ArtifactFormatError, ValidationError, json.JSONDecodeError) as err:
        return _fail("parse error", err, EXIT_USER_ERROR)
    except OSError as err:
        return _fail("I/O error", err, EXIT_USER_ERROR)
    except (ContractError, TrainingDivergedError) as err:
        return _fail("contract violation", err, EXIT_USER_ERROR)
    except Exception as err:
        _LOGGER.debug("Unhandled error in %s", args.command, exc_info=True)
        return _fail("internal error", err, EXIT_INTERNAL_ERROR)
    return EXIT_OK


def run(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand and return its exit code; same as :func:`main`."""
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
