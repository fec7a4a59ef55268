from dannseg.commands.helpers import (
    add_config_arguments,
    check_not_input,
    command_errors,
    prepare_output_dir,
    resolve_config,
)
from dannseg.dataset import read_dataset
from dannseg.trainer import ADVERSARIAL, MODES, check_domain_contract, train


def register_train_command(subparsers, logger):
    parser = subparsers.add_parser("train", help="train an adversarial or baseline segmenter")
    add_config_arguments(parser)
    parser.add_argument("--data", required=True, help="dataset directory written by `generate`")
    parser.add_argument("--mode", choices=MODES, help="training mode (default: adversarial)")
    parser.add_argument("--resume", help="checkpoint to continue from")
    parser.add_argument("--precision", choices=["float32", "float64"], help="floating-point width")

    @command_errors
    def train_command(args):
        config = resolve_config(args, {
            "data_dir": args.data,
            "trainer.mode": args.mode,
            "trainer.precision": args.precision,
        })
        check_not_input(args.out, args.data)
        prepare_output_dir(args.out, args.force, allow_existing=bool(args.resume))

        dataset = read_dataset(args.data)
        check_domain_contract(dataset, config.trainer.mode)
        if config.trainer.mode == ADVERSARIAL:
            config.discriminator.num_domains = len(dataset.domain_ids(split="train"))
        config.write(args.out)

        result = train(
            config.trainer, config.unet, config.discriminator, config.preprocess, config.augment,
            dataset, config.seed, output_dir=args.out, resume_from=args.resume, run_config=config.to_dict(),
        )
        logger.info(
            f"Training finished: {len(result.log)} epochs, selected epoch {result.selection.epoch}"
            f"{' (no plateau found)' if result.selection.warning else ''}, model at {result.model_path}"
        )

    parser.set_defaults(handler=train_command)
