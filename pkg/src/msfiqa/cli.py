"""``msfiqa`` command line: synth, train, eval, predict.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Outputs are deterministic for fixed inputs and ``--seed``; timestamps only
appear in log lines on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .checkpoint import CheckpointError, load_model, read_checkpoint
from .config import OUTPUT_ROOT_ENV, RunConfig, RunConfigError, default_output_root
from .data import MANIFEST_FORMATS, ManifestError, load_manifest, read_image, split_manifest
from .inference import STRATEGIES, EnsembleSpec, TTAPlan, ensemble_predict, predict_image, write_predictions
from .metrics import evaluate
from .model import ConfigError
from .synth import SynthSpec, generate

logger = logging.getLogger("msfiqa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    return vals


def _setup_logging(verbose: bool):
    # replace only our own handler so embedding applications keep theirs
    for h in [h for h in logger.handlers if getattr(h, "_msfiqa_cli", False)]:
        logger.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler._msfiqa_cli = True
    logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


# -- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .plots import mos_histogram

    path = Path(args.spec)
    if not path.exists():
        raise UsageError(f"synth spec not found: {path}")
    try:
        spec = SynthSpec.from_yaml(path)
        if args.seed is not None:
            spec = SynthSpec(**{**spec.to_dict(), "seed": args.seed})
    except (TypeError, ValueError) as e:
        raise UsageError(f"{path}: {e}") from e
    out = Path(args.out) if args.out else default_output_root() / path.stem
    logger.info("synth spec | %s", spec.to_dict())
    result = generate(spec, out)
    mos_histogram(result.manifest.mos_values(), out / "mos_hist.png", mos_range=(0.0, 1.0))
    print(f"manifest: {result.manifest_path}")
    print(f"samples: {len(result.manifest)}")
    print(f"oracle_agreement: {result.oracle_agreement:.4f}")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if getattr(args, "epochs", None) is not None:
        cfg.train["total_epochs"] = args.epochs
    if getattr(args, "manifest", None) is not None:
        cfg.data.manifest = args.manifest
    # re-validate after overrides
    cfg.train_config()
    return cfg


def cmd_train(args) -> int:
    from .plots import training_curves
    from .training import fit

    cfg = _load_run_config(args)
    if cfg.data.manifest is None:
        raise UsageError("no training manifest: set data.manifest or pass --manifest")
    cfg.log()
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())

    manifest = load_manifest(cfg.data.manifest, cfg.data.format, cfg.data.image_root)
    if manifest.missing:
        raise ManifestError(f"{len(manifest.missing)} image(s) listed in the manifest are missing, "
                            f"e.g. {manifest.missing[0]}")
    holdout, split_seed = None, None
    if cfg.data.holdout_fraction > 0:
        split_seed = cfg.seed
        manifest, holdout = split_manifest(manifest, 1.0 - cfg.data.holdout_fraction, seed=split_seed)

    result = fit(manifest, cfg.model_config(), cfg.train_config(), cfg.augmentation_plan(), holdout=holdout,
                 out_dir=out, resume=args.resume, split_seed=split_seed, stop_after_epoch=args.stop_after_epoch,
                 workers=args.workers)
    if len(result.history):
        training_curves(result.history, out / "training_curves.png")
        last = result.history.records[-1]
        print(f"epochs: {last.epoch}")
        print(f"total: {last.total!r}")
        print(f"train_srcc: {last.train_srcc!r}")
        if last.holdout_srcc is not None:
            print(f"holdout_srcc: {last.holdout_srcc!r}")
    print(f"output_dir: {out}")
    return EXIT_OK


# -- eval / predict ----------------------------------------------------------

def _tta_from_args(args, model, meta: dict) -> TTAPlan:
    crop = args.crop or (model.config.input_height, model.config.input_width)
    resize = args.resize
    if resize is None:
        aug = meta.get("augmentation") or {}
        resize = tuple(aug["resize_to"]) if aug.get("resize_to") else crop
    seed = args.seed if args.seed is not None else 0
    try:
        return TTAPlan(args.tta, tuple(crop), args.n_crops, tuple(resize), seed)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_eval(args) -> int:
    from .plots import mos_histogram, scatter_mos

    _, _, meta = read_checkpoint(args.checkpoint)
    model = load_model(args.checkpoint)
    plan = _tta_from_args(args, model, meta)
    logger.info("tta plan | %s", plan.describe())
    manifest = load_manifest(args.manifest, args.format, args.image_root)
    report = evaluate(model, manifest, plan, workers=args.workers)
    report.settings["checkpoint"] = Path(args.checkpoint).name
    out = Path(args.out) if args.out else default_output_root() / "eval"
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.txt")
    report.write_scatter(out / "scatter.csv")
    if report.n:
        scatter_mos(report.targets(), report.predictions(), out / "scatter.png")
        mos_histogram(report.targets(), out / "mos_hist.png", mos_range=manifest.mos_range)
    sys.stdout.write((out / "report.txt").read_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    if bool(args.checkpoint) == bool(args.ensemble):
        raise UsageError("pass exactly one of --checkpoint or --ensemble")
    images = list(args.images)
    if args.image_list:
        images += [ln.strip() for ln in Path(args.image_list).read_text().splitlines() if ln.strip()]
    if not images:
        raise UsageError("no images given")
    if args.ensemble:
        try:
            spec = EnsembleSpec.from_yaml(args.ensemble)
        except (OSError, ValueError, KeyError, TypeError, yaml.YAMLError) as e:
            raise UsageError(f"{args.ensemble}: {e}") from e
        if args.seed is not None:
            spec.seed = args.seed
        for m in spec.members:
            logger.info("ensemble member %s | %s", m.checkpoint, spec.plan_for(m).describe())

        def score(img):
            return ensemble_predict(spec, img)
    else:
        _, _, meta = read_checkpoint(args.checkpoint)
        model = load_model(args.checkpoint)
        plan = _tta_from_args(args, model, meta)
        logger.info("tta plan | %s", plan.describe())

        def score(img):
            return predict_image(model, img, plan)

    rows = [(p, score(read_image(p))) for p in images]
    out = Path(args.out) if args.out else default_output_root() / "predictions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, rows)
    for p, s in rows:
        print(f"{p},{s!r}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msfiqa", description="No-reference image quality assessment toolkit.",
                epilog=f"Default output root: ${OUTPUT_ROOT_ENV} (fallback ./runs).")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic IQA dataset")
    s.add_argument("spec", help="synth spec YAML")
    s.add_argument("--out", help="output directory")
    s.add_argument("--seed", type=int, help="overrides the seed in the YAML file")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("config", help="run config YAML")
    t.add_argument("--manifest", help="overrides data.manifest")
    t.add_argument("--output-dir", help="overrides output_dir")
    t.add_argument("--seed", type=int, help="overrides seed")
    t.add_argument("--epochs", type=int, help="overrides train.total_epochs")
    t.add_argument("--resume", action="store_true", help="continue from output_dir/last.ckpt")
    t.add_argument("--stop-after-epoch", type=int, help="stop early (the run stays resumable)")
    t.add_argument("--workers", type=int, default=1, help="data-pipeline parallelism cap")
    t.set_defaults(func=cmd_train)

    def tta_flags(q):
        q.add_argument("--tta", choices=STRATEGIES, default="five_crop", help="crop strategy (default five_crop)")
        q.add_argument("--center", dest="tta", action="store_const", const="center",
                       help="shorthand for --tta center")
        q.add_argument("--crop", type=_pair, help="crop size N or HxW (default: model input)")
        q.add_argument("--resize", type=_pair, help="resize before cropping (default: training resize)")
        q.add_argument("--n-crops", type=int, default=20, help="crops for random_crops")
        q.add_argument("--seed", type=int, help="seed for random_crops")
        q.add_argument("--workers", type=int, default=1, help="image decoding threads")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labelled manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--format", choices=MANIFEST_FORMATS, default="generic_csv")
    e.add_argument("--image-root")
    e.add_argument("--out", help="output directory for report.txt, scatter.csv and figures")
    tta_flags(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score images with a checkpoint or an ensemble")
    r.add_argument("images", nargs="*")
    r.add_argument("--checkpoint")
    r.add_argument("--ensemble", help="ensemble YAML")
    r.add_argument("--image-list", help="text file with one image path per line")
    r.add_argument("--out", help="predictions CSV path")
    tta_flags(r)
    r.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, RunConfigError, ConfigError) as e:
        logger.error("%s", e)
        return EXIT_USAGE
    except (ManifestError, CheckpointError, OSError, RuntimeError, ValueError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
