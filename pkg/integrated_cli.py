"""
Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 invalid input, 4 numerical failure,
1 anything else.
"""

import argparse
import logging
import sys
import traceback
from typing import List, Optional

from splatrestore.errors import InputError, NumericalError, SplatRestoreError
from splatrestore.settings import (ENV_CONFIG, add_config_flags, apply_overrides, configure_logging,
                                   load_config, load_environment)

logger = logging.getLogger(__name__)

COMMANDS = {
    "synth": "generate synthetic scene bundles",
    "fit-check": "render a bundle's views and spot-check raster gradients",
    "compress": "compress a scene bundle to one rate level",
    "decompress": "decode a coded scene to PLY",
    "make-dataset": "render clean/degraded training pairs through the codec",
    "pretrain-base": "pretrain the base denoiser on clean renders",
    "train-restorer": "distill the one-step restorer",
    "restore": "restore images or a scene's compressed test views",
    "evaluate": "rate-distortion report on held-out views",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatrestore",
                                     description="Gaussian scene compression with one-step diffusion restoration")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, help=text, description=text) for name, text in COMMANDS.items()}

    parsers["fit-check"].add_argument("scene", help="scene bundle directory")
    parsers["fit-check"].add_argument("--primitives", type=int, default=4,
                                      help="primitives in the gradient spot check")

    parsers["compress"].add_argument("scene", help="scene bundle directory")
    parsers["compress"].add_argument("--level", type=int, default=None, help="alias of --codec-level")
    parsers["compress"].add_argument("-o", "--output", default=None, help="output .gsrc file")

    parsers["decompress"].add_argument("coded", help=".gsrc file")
    parsers["decompress"].add_argument("-o", "--output", default=None, help="output .ply file")

    parsers["make-dataset"].add_argument("scenes", help="directory of scene bundles")
    parsers["make-dataset"].add_argument("--levels", type=int, nargs="+", default=None,
                                         help="rate levels to render (default: all)")

    parsers["pretrain-base"].add_argument("dataset", help="dataset directory")
    parsers["pretrain-base"].add_argument("-o", "--output", default=None, help="output checkpoint")

    parsers["train-restorer"].add_argument("dataset", help="dataset directory")
    parsers["train-restorer"].add_argument("--base", required=True, help="base checkpoint")

    parsers["restore"].add_argument("inputs", nargs="+", help="a scene directory, or .png/.f32img files")
    parsers["restore"].add_argument("--restorer", default=None,
                                    help="restorer checkpoint (default: passthrough)")
    parsers["restore"].add_argument("--level", type=int, default=None, help="rate level for scene inputs")
    parsers["restore"].add_argument("--deterministic-eps", type=float, default=None, metavar="S",
                                    help="scale of the projection noise, 0 disables it")
    parsers["restore"].add_argument("--condition", type=int, default=None,
                                    help="class label for image inputs (default: unconditional)")

    parsers["evaluate"].add_argument("scenes", help="directory of scene bundles")
    parsers["evaluate"].add_argument("--restorer", default=None, help="restorer checkpoint")
    parsers["evaluate"].add_argument("--levels", type=int, nargs="+", default=None, help="levels to report")
    parsers["evaluate"].add_argument("--img2img-steps", type=int, default=0,
                                     help="also report the multi-step training-free baseline")

    for p in parsers.values():
        add_config_flags(p)
    return parser


def run(args: argparse.Namespace) -> int:
    """Execute a parsed command and return its exit code."""
    from integrated_pipeline import IntegratedPipeline

    env = load_environment()
    config = load_config(args.config or env.get(ENV_CONFIG))
    config = apply_overrides(config, args, env)
    configure_logging(config.run.log_level)
    pipeline = IntegratedPipeline(config)

    command = args.command
    if command == "synth":
        pipeline.synth()
    elif command == "fit-check":
        pipeline.fit_check(args.scene, primitives=args.primitives)
    elif command == "compress":
        pipeline.compress(args.scene, args.output, level=args.level)
    elif command == "decompress":
        pipeline.decompress(args.coded, args.output)
    elif command == "make-dataset":
        pipeline.make_dataset(args.scenes, levels=args.levels)
    elif command == "pretrain-base":
        pipeline.pretrain_base(args.dataset, args.output)
    elif command == "train-restorer":
        pipeline.train_restorer(args.dataset, args.base)
    elif command == "restore":
        pipeline.restore(args.inputs, args.restorer, level=args.level,
                         deterministic_eps=args.deterministic_eps, condition=args.condition)
    elif command == "evaluate":
        report = pipeline.evaluate(args.scenes, args.restorer, levels=args.levels,
                                   img2img_steps=args.img2img_steps)
        print(report.to_text())
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line; argparse exits with 2 on usage errors."""
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return InputError.exit_code
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return NumericalError.exit_code
    except SplatRestoreError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected failure: {e}")
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
