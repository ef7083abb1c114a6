"""Command line for weight export and fixture generation.

Source weights come from one of: --state-dict (a local torch checkpoint),
--pretrained (torchvision download, needs network), or --random-seed
(seeded synthetic trunk for offline verification). Exit codes: 0 success,
1 usage error, 2 data error.
"""

import argparse
import sys
from pathlib import Path

from .export import (
    VGG19_TORCHVISION,
    ExportError,
    export,
    load_state_dict,
    make_fixture,
    random_state_dict,
)
from .twf1 import FormatError


def _resolve_source(args):
    if args.state_dict:
        return load_state_dict(args.state_dict)
    if args.random_seed is not None:
        return random_state_dict(args.random_seed)
    from torchvision.models import VGG19_Weights, vgg19

    model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
    return model.state_dict()


def _add_source_flags(parser):
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--state-dict", type=Path, help="local torch checkpoint path")
    group.add_argument("--pretrained", action="store_true", help="download torchvision weights")
    group.add_argument("--random-seed", type=int, help="seeded synthetic trunk (testing)")


def build_parser():
    parser = argparse.ArgumentParser(prog="weight-export", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("export", help="write trunk weights + normalization as TWF1")
    _add_source_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(run=cmd_export)

    p = sub.add_parser("fixture", help="write a seeded input and torch tap activations")
    _add_source_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(run=cmd_fixture)
    return parser


def cmd_export(args):
    tensors = export(_resolve_source(args), args.out, VGG19_TORCHVISION)
    print(f"wrote {len(tensors)} tensors to {args.out}")
    return 0


def cmd_fixture(args):
    tensors = make_fixture(args.out, _resolve_source(args), VGG19_TORCHVISION, seed=args.seed)
    print(f"wrote input + {len(tensors) - 1} taps to {args.out}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.run(args)
    except (ExportError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
