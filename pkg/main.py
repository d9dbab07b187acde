from typing import List, Optional, Tuple
import argparse

import config
from errors import BifieldError, ParseError
from experiment import parse_config, run_command
from io_utils import status


def split_overrides(extra: List[str]) -> List[str]:
    """Turn leftover '--block.key=value' arguments into override assignments"""
    overrides = []
    for arg in extra:
        if not arg.startswith('--') or '=' not in arg:
            raise ParseError(f"unrecognized argument '{arg}'")
        overrides.append(arg[2:])
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Contact branching random walk lab')
    parser.add_argument('verb', choices=config.VERBS, help='What to run')
    parser.add_argument('config', help='Path to the JSON experiment file')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='BLOCK.KEY=VALUE',
                        help='Override one configuration value (repeatable)')
    parser.add_argument('--quiet', action='store_true',
                        help='Hide progress bars')
    return parser


def parse_arguments(argv: Optional[List[str]] = None) -> Tuple[argparse.Namespace, List[str]]:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    return args, args.overrides + split_overrides(extra)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args, overrides = parse_arguments(argv)
        print(f"\n{status('start', f'Running {args.verb} with {args.config}')}")
        cfg = parse_config(args.config, overrides)
        print(f"{status('file', f'Writing to {cfg.output_dir / args.verb}')} (seed {cfg.seed})")

        code = run_command(args.verb, cfg, progress=not args.quiet)

        if code == 0:
            print(f"\n{status('ok', f'{args.verb} finished')}")
        else:
            print(f"\n{status('warning', f'{args.verb} finished with exit status {code}')}")
        return code

    except BifieldError as e:
        print(f"\n{status('error', f'{type(e).__name__}: {e}')}")
        return e.exit_code
    except Exception as e:
        print(f"\n❌ Error: {str(e)}")
        return 1


if __name__ == "__main__":
    exit(main())
