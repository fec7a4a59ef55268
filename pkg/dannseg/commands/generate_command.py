import json
from typing import List

from dannseg.commands.helpers import (
    add_config_arguments,
    command_errors,
    prepare_output_dir,
    remove_matching,
    resolve_config,
)
from dannseg.config import GenerationConfig
from dannseg.dataset import MANIFEST_NAME, DomainSpec, default_domain_specs, generate_dataset, native_size, write_dataset
from dannseg.error import DannSegError, ErrorCode


def load_domain_specs(generation: GenerationConfig, target_spacing_mm: float) -> List[DomainSpec]:
    """
    "default" gives the four built-in domains; otherwise a JSON file with a list of domain
    entries. Entries may omit n_samples and size, which then follow --per-domain and --size.
    """
    if generation.domains == "default":
        return default_domain_specs(generation.per_domain, generation.size, target_spacing_mm)
    try:
        with open(generation.domains) as f:
            entries = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"cannot read domain spec {generation.domains}: {e}")
    if not isinstance(entries, list) or not entries:
        raise DannSegError(ErrorCode.INVALID_CONFIG, f"domain spec {generation.domains} must be a non-empty list")
    specs = []
    for entry in entries:
        entry = dict(entry)
        entry.setdefault("n_samples", generation.per_domain)
        spacing = entry.get("style", {}).get("spacing_mm", target_spacing_mm)
        entry.setdefault("size", native_size(generation.size, spacing, target_spacing_mm))
        entry.setdefault("splits", {"train": 0.7, "val": 0.15, "test": 0.15})
        entry.setdefault("labelled_splits", ["train", "val", "test"])
        try:
            specs.append(DomainSpec.from_dict(entry))
        except (KeyError, TypeError) as e:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"invalid domain entry {entry!r}: {e}")
    return specs


def register_generate_command(subparsers, logger):
    parser = subparsers.add_parser("generate", help="write a synthetic multi-domain phantom dataset")
    add_config_arguments(parser)
    parser.add_argument("--domains", help='"default" or a JSON file describing the domains')
    parser.add_argument("--per-domain", type=int, help="samples per domain")
    parser.add_argument("--size", type=int, help="crop window the phantoms are sized for, in pixels")

    @command_errors
    def generate_command(args):
        config = resolve_config(args, {
            "generation.domains": args.domains,
            "generation.per_domain": args.per_domain,
            "generation.size": args.size,
        })
        prepare_output_dir(args.out, args.force)
        if args.force:
            remove_matching(args.out, "*.img", "*.msk", MANIFEST_NAME)
        config.write(args.out)

        specs = load_domain_specs(config.generation, config.preprocess.target_spacing_mm)
        dataset = generate_dataset(specs, config.seed)
        write_dataset(args.out, dataset, force=args.force)
        for domain_id, counts in dataset.summary().items():
            logger.info(f"domain={domain_id} {counts}")

    parser.set_defaults(handler=generate_command)
