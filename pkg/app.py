import sys

from dannseg.cli_factory import create_cli


def main(argv=None) -> int:
    parser = create_cli()
    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == '__main__':
    sys.exit(main())
