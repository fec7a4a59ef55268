import os

from dannseg.checkpoint import load_checkpoint
from dannseg.commands.helpers import (
    add_config_arguments,
    align_with_checkpoint,
    check_not_input,
    command_errors,
    prepare_output_dir,
    resolve_config,
)
from dannseg.dataset import read_dataset
from dannseg.error import DannSegError, ErrorCode
from dannseg.inference import evaluate
from dannseg.phantom import SPLITS


def register_eval_command(subparsers, logger):
    parser = subparsers.add_parser("eval", help="score a checkpoint per domain with Dice and Hausdorff distance")
    add_config_arguments(parser)
    parser.add_argument("--data", required=True, help="dataset directory")
    parser.add_argument("--checkpoint", required=True, help="model checkpoint (e.g. model.ckpt)")
    parser.add_argument("--split", choices=SPLITS, help="split to evaluate (default: test)")
    parser.add_argument("--compare", help="second checkpoint; adds Mann-Whitney U tests per class")

    @command_errors
    def eval_command(args):
        config = resolve_config(args, {"data_dir": args.data, "evaluation.split": args.split})
        check_not_input(args.out, args.data)
        prepare_output_dir(args.out, args.force)

        checkpoint = load_checkpoint(args.checkpoint)
        config = align_with_checkpoint(config, checkpoint, explicit_config=bool(args.config))
        config.write(args.out)

        dataset = read_dataset(args.data)
        samples = dataset.select(split=config.evaluation.split, labelled=True)
        if not samples:
            raise DannSegError(
                ErrorCode.INSUFFICIENT_SAMPLES,
                f"no labelled samples in split {config.evaluation.split!r} of {args.data}",
            )
        report = evaluate(checkpoint.segmenter, samples, config.preprocess, checkpoint=args.checkpoint)

        if args.compare:
            other = load_checkpoint(args.compare)
            if other.segmenter.config.num_classes != checkpoint.segmenter.config.num_classes:
                raise DannSegError(ErrorCode.CHECKPOINT_MISMATCH, "compared checkpoints predict different class sets")
            other_report = evaluate(other.segmenter, samples, config.preprocess, checkpoint=args.compare)
            other_report.to_csv(os.path.join(args.out, "metrics_compare.csv"))
            report.compare(other_report)

        report.to_csv(os.path.join(args.out, "metrics.csv"))
        with open(os.path.join(args.out, "metrics.json"), "w") as f:
            f.write(report.to_json())
        logger.info(f"Results for {args.checkpoint} on split {config.evaluation.split}:\n{report.to_table()}")

    parser.set_defaults(handler=eval_command)
