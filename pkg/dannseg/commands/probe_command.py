import csv
import json
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
from dannseg.inference import domain_probe, extract_embeddings
from dannseg.preprocessing import finalize_image, prepare_sample


def write_embeddings(path: str, sample_ids, domains, embeddings) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "domain"] + [f"v_{i}" for i in range(embeddings.shape[1])])
        for sample_id, domain, vector in zip(sample_ids, domains, embeddings):
            writer.writerow([sample_id, domain, *[repr(float(v)) for v in vector]])


def register_probe_command(subparsers, logger):
    parser = subparsers.add_parser("probe", help="export bottleneck embeddings and measure domain predictability")
    add_config_arguments(parser)
    parser.add_argument("--data", required=True, help="dataset directory")
    parser.add_argument("--checkpoint", required=True, help="model checkpoint")
    parser.add_argument("--domains", help="comma-separated domains to include (default: all)")

    @command_errors
    def probe_command(args):
        config = resolve_config(args, {"data_dir": args.data})
        check_not_input(args.out, args.data)
        prepare_output_dir(args.out, args.force)

        checkpoint = load_checkpoint(args.checkpoint)
        config = align_with_checkpoint(config, checkpoint, explicit_config=bool(args.config))
        config.write(args.out)

        dataset = read_dataset(args.data)
        wanted = set(args.domains.split(",")) if args.domains else None
        samples = [s for s in dataset if wanted is None or s.domain_id in wanted]
        domains = sorted({s.domain_id for s in samples})
        if len(domains) < 2:
            raise DannSegError(ErrorCode.INSUFFICIENT_SAMPLES, f"domain probe needs >= 2 domains, found {domains}")

        images = []
        for sample in samples:
            prepared = prepare_sample(sample, config.preprocess)
            images.append(finalize_image(prepared.image, config.preprocess))
        embeddings = extract_embeddings(checkpoint.segmenter, images)
        labels = [s.domain_id for s in samples]
        write_embeddings(os.path.join(args.out, "embeddings.csv"), [s.sample_id for s in samples], labels, embeddings)

        evaluation = config.evaluation
        result = domain_probe(
            embeddings, labels, config.seed,
            test_fraction=evaluation.probe_test_fraction,
            epochs=evaluation.probe_epochs,
            lr=evaluation.probe_lr,
            min_per_domain=evaluation.probe_min_per_domain,
        )
        with open(os.path.join(args.out, "probe.json"), "w") as f:
            json.dump({**result.to_dict(), "domains": domains, "checkpoint": args.checkpoint}, f, indent=2)
        logger.info(f"Probe accuracy {result.accuracy:.3f} with chance level {result.chance:.3f} over {domains}")

    parser.set_defaults(handler=probe_command)
