"""
Command-line entry point.

    rbsr [--config PATH] [--seed N] [--deterministic] [--threads N] [--desk-scale] [--verbose] COMMAND ...

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors. Global flags may also follow the
command. `.env` may provide RBSR_THREADS, RBSR_SEED and RBSR_LOG_LEVEL; explicit flags win.
"""

import argparse
import logging
import os
import sys
import typing

import dotenv
import pydantic

from . import config, corpus, degrade, imageio, kernel_estim, losses, metrics, models, pipeline, resample, trainer
from .run_config import RunConfig, load_config
from .selftest import run_selftest
from .utils import RbsrException, Runtime

logger = logging.getLogger("rbsr.cli")


class UsageException(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageException(f"{self.prog}: {message}\n{self.format_usage()}")


def _global_flags(parser: argparse.ArgumentParser):
    # SUPPRESS keeps a subcommand's parser from overwriting flags given before the command
    group = parser.add_argument_group("global options")
    group.add_argument("--config", default=argparse.SUPPRESS, help="run configuration file (INI)")
    group.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    group.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    group.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    group.add_argument("--desk-scale", action="store_true", default=argparse.SUPPRESS)
    group.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)


def _grid(text: str) -> typing.Tuple[int, int]:
    try:
        rows, cols = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}")
    return rows, cols


def _tiling(parser: argparse.ArgumentParser):
    parser.add_argument("--tile", type=int, default=0, help="tile size in LR pixels, 0 = whole image")
    parser.add_argument("--overlap", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="rbsr", description="Two-step real-world super-resolution toolkit")
    parser.add_argument("--version", action="version", version=config.VERSION)
    _global_flags(parser)
    commands = parser.add_subparsers(dest="command", parser_class=_ArgumentParser, metavar="COMMAND")
    commands.required = True

    def command(name: str, help: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help)
        _global_flags(sub)
        return sub

    sub = command("resize", "bicubic resampling by a rational factor")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--scale", required=True, help="N/D, e.g. 1/4")
    sub.add_argument("--a", "--kernel-a", dest="kernel_a", type=float, default=config.BICUBIC_A)
    sub.add_argument("--no-antialias", action="store_true")
    sub.add_argument("--boundary", choices=[b.value for b in resample.Boundary], default="reflect")

    sub = command("degrade", "blur, subsample and add noise")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--kernel", required=True, help="gaussian:SIGMA:SIZE, aniso:SX:SY:THETA:SIZE or a kernel file")
    sub.add_argument("--scale", type=int, default=config.SCALE)
    sub.add_argument("--noise", type=float, default=0.0)
    sub.add_argument("--phase", choices=[p.value for p in degrade.Phase], default="centered")
    sub.add_argument("--boundary", choices=[b.value for b in resample.Boundary], default="reflect")

    sub = command("estimate-kernel", "patchwise blur-kernel estimation from an HR/LR pair")
    sub.add_argument("--hr", required=True)
    sub.add_argument("--lr", required=True)
    sub.add_argument("--out", required=True, help="PGM rendering of the kernel grid")
    sub.add_argument("--dump", help="optional kernel grid text file")
    sub.add_argument("--ksize", type=int, default=config.KERNEL_SIZE)
    sub.add_argument("--lambda", dest="lam", type=float, default=config.KERNEL_LAMBDA)
    sub.add_argument("--grid", type=_grid, default=config.KERNEL_GRID, metavar="ROWSxCOLS")
    sub.add_argument("--patch", type=int, default=config.KERNEL_PATCH_HR)
    sub.add_argument("--scale", type=int, default=config.SCALE)

    for name, help in (
        ("train-sr", "train the SR generator on bicubic pairs"),
        ("train-e2e", "train the end-to-end baseline on the mixed manifest"),
        ("train-lookalike", "two-phase training of the bicubic look-alike generator"),
    ):
        sub = command(name, help)
        sub.add_argument("--manifest", help="defaults to the [paths] manifest of the config")
        sub.add_argument("--out", help="output directory, defaults to [paths] output_dir")
        if name == "train-lookalike":
            sub.add_argument("--sr-checkpoint", help="trained SR generator used as perceptual extractor")
            sub.add_argument("--no-copying", action="store_true", help="drop identity_bicubic entries")

    sub = command("infer", "two-step inference SR(G(x))")
    sub.add_argument("--lookalike")
    sub.add_argument("--sr")
    sub.add_argument("--in", dest="input", required=True)
    sub.add_argument("--out-sr", required=True)
    sub.add_argument("--out-transformed")
    _tiling(sub)

    sub = command("compare", "bicubic vs end-to-end baseline vs two-step")
    sub.add_argument("--lr", required=True)
    sub.add_argument("--hr")
    sub.add_argument("--lookalike")
    sub.add_argument("--sr")
    sub.add_argument("--baseline")
    sub.add_argument("--outdir", required=True)
    _tiling(sub)

    sub = command("evaluate", "PSNR/SSIM over a list of (output, reference) pairs")
    sub.add_argument("--pairs", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--peak", type=float, default=1.0)

    command("selftest", "run the embedded invariant suite")

    sub = command("make-corpus", "generate a synthetic training corpus and its manifests")
    sub.add_argument("--out", required=True)
    sub.add_argument("--count", type=int, default=20)
    sub.add_argument("--test-count", type=int, default=5)
    sub.add_argument("--size", type=int, default=192)
    sub.add_argument("--sigma", type=float, default=1.8)
    sub.add_argument("--noise", type=float, default=0.0)
    return parser


def _setting(args: argparse.Namespace, name: str, env: str, fallback, convert=int):
    if hasattr(args, name):
        return getattr(args, name)
    if os.getenv(env):
        try:
            return convert(os.environ[env])
        except ValueError as e:
            raise UsageException(f"invalid {env}={os.environ[env]!r}") from e
    return fallback


def _path(explicit: typing.Optional[str], run_config: RunConfig, name: str) -> str:
    return explicit if explicit else run_config.require_path(name)


def _load_model(model: models.ModelGraph, path: str) -> models.ModelGraph:
    return trainer.load_checkpoint_into(model, path)


def _bundle(args, run_config: RunConfig, seed: int) -> pipeline.PipelineBundle:
    lookalike = _load_model(
        models.build_lookalike_generator(run_config.generator, seed),
        _path(args.lookalike, run_config, "lookalike_checkpoint"),
    )
    sr = _load_model(models.build_sr_generator(run_config.sr, seed), _path(args.sr, run_config, "sr_checkpoint"))
    return pipeline.PipelineBundle(lookalike, sr, args.tile, args.overlap)


def run_command(args: argparse.Namespace, run_config: RunConfig, seed: int) -> int:
    command = args.command
    if command == "resize":
        spec = resample.ResampleSpec.from_scale(
            args.scale, kernel_a=args.kernel_a, antialias=not args.no_antialias, boundary=args.boundary
        )
        imageio.write_image(args.out, resample.resize(imageio.read_image(args.input), spec))
    elif command == "degrade":
        params = degrade.DegradationParams(
            kernel=degrade.parse_kernel(args.kernel), scale=args.scale, noise_sigma=args.noise, seed=seed,
            boundary=args.boundary, phase=args.phase,
        )
        imageio.write_image(args.out, degrade.degrade(imageio.read_image(args.input), params))
    elif command == "estimate-kernel":
        estimation = kernel_estim.EstimationConfig(
            kernel_size=args.ksize, lam=args.lam, grid=args.grid, patch_hr=args.patch, scale=args.scale
        )
        grid = kernel_estim.estimate_patchwise(imageio.read_image(args.hr), imageio.read_image(args.lr), estimation)
        imageio.write_image(args.out, kernel_estim.kernel_grid_render(grid))
        if args.dump:
            with open(args.dump, "w", encoding="utf-8") as file:
                file.write(kernel_estim.format_kernel_grid(grid))
    elif command in ("train-sr", "train-e2e"):
        is_sr = command == "train-sr"
        manifest = _path(args.manifest, run_config, "sr_manifest" if is_sr else "e2e_manifest")
        dataset = trainer.PairDataset.load(trainer.read_manifest(manifest))
        schedule = run_config.sr_train_schedule(seed)
        out_dir = args.out or run_config.paths.output_dir
        if is_sr:
            result = trainer.train_sr(models.build_sr_generator(run_config.sr, seed), dataset, schedule, out_dir)
        else:
            result = trainer.train_e2e_baseline(
                models.build_e2e_baseline(run_config.e2e, seed), dataset, schedule, out_dir
            )
        logger.info(f"Final checkpoint {result.checkpoint_path}, log {result.log_path}")
    elif command == "train-lookalike":
        manifest = _path(args.manifest, run_config, "lookalike_manifest")
        sr_model = _load_model(
            models.build_sr_generator(run_config.sr, seed), _path(args.sr_checkpoint, run_config, "sr_checkpoint")
        )
        extractor = losses.FeatureExtractor(sr_model, run_config.loss.tap_block)
        schedule = run_config.lookalike_schedule(seed)
        if args.no_copying:
            schedule = schedule.model_copy(update={"copying": False})
        discriminator_config = run_config.discriminator.model_copy(update={"input_size": schedule.crop})
        result = trainer.train_lookalike(
            models.build_lookalike_generator(run_config.generator, seed),
            models.build_discriminator(discriminator_config, seed + 1),
            extractor,
            trainer.PairDataset.load(trainer.read_manifest(manifest)),
            schedule,
            args.out or run_config.paths.output_dir,
        )
        logger.info(f"Final checkpoint {result.checkpoint_path}, log {result.log_path}")
    elif command == "infer":
        bundle = _bundle(args, run_config, seed)
        transformed, sr = pipeline.infer(bundle, imageio.read_image(args.input))
        imageio.write_image(args.out_sr, sr)
        if args.out_transformed:
            imageio.write_image(args.out_transformed, transformed)
    elif command == "compare":
        bundle = _bundle(args, run_config, seed)
        baseline = _load_model(
            models.build_e2e_baseline(run_config.e2e, seed), _path(args.baseline, run_config, "e2e_checkpoint")
        )
        hr = imageio.read_image(args.hr) if args.hr else None
        comparison = pipeline.compare_methods(imageio.read_image(args.lr), hr, bundle, baseline, args.outdir)
        print(comparison.to_csv(), end="")
    elif command == "evaluate":
        report = metrics.evaluate_pairs(metrics.read_pair_list(args.pairs), args.peak)
        report.write(args.out)
        print(report.to_csv(), end="")
    elif command == "selftest":
        return 0 if run_selftest() else 2
    elif command == "make-corpus":
        corpus.make_corpus(
            args.out,
            corpus.CorpusConfig(
                n_train=args.count, n_test=args.test_count, hr_size=args.size, sigma=args.sigma,
                noise_sigma=args.noise, seed=seed,
            ),
        )
    return 0


def dispatch(argv: typing.Sequence[str]) -> int:
    dotenv.load_dotenv()
    try:
        args = build_parser().parse_args(list(argv))
        verbose = getattr(args, "verbose", False)
        level = "DEBUG" if verbose else os.getenv("RBSR_LOG_LEVEL", "INFO").upper()
        logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    except UsageException as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)
    except ValueError as e:
        print(f"rbsr: {e}", file=sys.stderr)
        return 1

    try:
        run_config = load_config(getattr(args, "config", None), getattr(args, "desk_scale", False))
        seed = _setting(args, "seed", "RBSR_SEED", run_config.run.seed)
        threads = _setting(args, "threads", "RBSR_THREADS", run_config.run.threads)
        deterministic = getattr(args, "deterministic", False) or run_config.run.deterministic
        Runtime.configure(threads, deterministic)
        logger.info(
            f"{config.VERSION} {args.command}: config hash {run_config.text_hash}, seed {seed}, "
            f"threads {Runtime.workers()}, deterministic {deterministic}"
        )
        return run_command(args, run_config, seed)
    except UsageException as e:
        print(f"rbsr: {e}", file=sys.stderr)
        return 1
    except pydantic.ValidationError as e:
        print(f"rbsr: invalid arguments: {e}", file=sys.stderr)
        return 1
    except (RbsrException, OSError) as e:
        logger.error(str(e))
        print(f"rbsr: error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
