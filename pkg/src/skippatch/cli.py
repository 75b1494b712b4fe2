"""Command-line entry point: ``skippatch <command> [flags]``.

Training commands take an optional JSON config whose keys are the
``TrainConfig`` fields plus ``out_dir`` and ``resume``. Values resolve as
built-in defaults < config file < command-line flags. Defaults: resolution 64,
variant skip, l1_weight 100, seed 42.

Exit codes: 0 when the requested artifacts were written, 1 when a check fails
(``analyze-rf --expect`` mismatch, ``grad-check`` failure) or training
diverges, 2 for usage errors, bad configs and unreadable inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .architectures import NOISE_CHANNELS, LayerGraph, build_discriminator, forward
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint
from .data import harden_mask, load_em, load_mask, read_manifest, save_em, save_mask, synth_corpus, write_dataset
from .evaluation import LABELS, emit_grid, emit_scatter, pca_scatter
from .netpbm import ImageFormatError, read_netpbm
from .receptive_field import GraphError, analyze
from .rng import SeededRng
from .training import VARIANTS, TrainConfig, TrainingError, compare_variants, from_checkpoint, train

_PATH_KEYS = ("out_dir", "resume")
_GENERATE_STREAM = 11


class UsageError(Exception):
    pass


# --- config resolution --------------------------------------------------------

def resolve_train_config(stage: str, config_path: str | None, overrides: dict) -> tuple[TrainConfig, dict]:
    """Merge defaults, the JSON config file and flag overrides; returns (config, paths)."""
    values: dict = {}
    if config_path is not None:
        try:
            values = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(values, dict):
            raise UsageError(f"config {config_path} must be a JSON object")
    if values.get("stage", stage) != stage:
        raise UsageError(f"config stage {values['stage']!r} does not match command stage {stage!r}")
    values = {**values, "stage": stage, **{k: v for k, v in overrides.items() if v is not None}}
    paths = {k: values.pop(k, None) for k in _PATH_KEYS}
    for k, v in paths.items():
        if v is not None and not isinstance(v, str):
            raise UsageError(f"config key {k!r} must be a string path")
    try:
        config = TrainConfig.from_dict(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if paths["out_dir"] is None:
        raise UsageError("an output directory is required (--out or config key 'out_dir')")
    return config, paths


# --- subcommands --------------------------------------------------------------

def cmd_synth_data(args) -> int:
    manifest = write_dataset(synth_corpus(args.n, args.resolution, args.seed), args.out)
    print(manifest)
    return 0


def _cmd_train(stage: str, args) -> int:
    overrides = {"out_dir": args.out, "resume": args.resume, "seed": args.seed, "epochs": args.epochs,
                 "variant": args.variant, "resolution": args.resolution, "manifest": args.manifest,
                 "l1_weight": args.l1_weight}
    config, paths = resolve_train_config(stage, args.config, overrides)
    if config.manifest is not None and not Path(config.manifest).is_file():
        raise UsageError(f"manifest not found: {config.manifest}")
    if paths["resume"] is not None and not Path(paths["resume"]).is_file():
        raise UsageError(f"checkpoint not found: {paths['resume']}")
    out = Path(paths["out_dir"])
    if args.compare:
        variants = _parse_variants(args.compare)
        if paths["resume"] is not None:
            raise UsageError("--compare cannot be combined with --resume")
        out.mkdir(parents=True, exist_ok=True)
        compare_variants(config, variants, out / "compare.csv", out_dir=out)
        print(out / "compare.csv")
        return 0
    result = train(config, out, resume=paths["resume"])
    print(f"{out / 'final.spgn'} step={result.state.step}")
    return 0


def _parse_variants(text: str) -> list[str]:
    variants = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad or len(set(variants)) != len(variants) or not variants:
        raise UsageError(f"--compare expects distinct variants from {VARIANTS}, got {text!r}")
    return variants


def cmd_train_mask(args) -> int:
    return _cmd_train("mask", args)


def cmd_train_em(args) -> int:
    return _cmd_train("em", args)


def _mask_files(mask_dir: Path) -> list[Path]:
    files = sorted(mask_dir.glob("mask_*.ppm"))
    if not files:
        raise UsageError(f"no mask_*.ppm files in {mask_dir}")
    return files


def cmd_generate(args) -> int:
    state = from_checkpoint(load_checkpoint(args.checkpoint))
    cfg = state.config
    stage = args.stage or cfg.stage
    if stage != cfg.stage:
        raise UsageError(f"checkpoint holds a {cfg.stage}-stage model, not {stage}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    if stage == "mask":
        root = SeededRng([args.seed, _GENERATE_STREAM])
        for i in range(args.n):
            z = root.spawn(i).normal((1, NOISE_CHANNELS, cfg.noise_side, cfg.noise_side))
            mask = harden_mask(forward(state.gen_graph, state.gen, Tensor(z)).data[0])
            save_mask(out / f"mask_{i:04d}.ppm", mask)
            samples.append(mask)
    else:
        if args.mask_dir is None:
            raise UsageError("--stage em requires --mask-dir")
        files = _mask_files(Path(args.mask_dir))
        if args.n > len(files):
            raise UsageError(f"--n {args.n} exceeds the {len(files)} masks in {args.mask_dir}")
        for i, path in enumerate(files[: args.n]):
            mask = load_mask(path, cfg.resolution)
            image = forward(state.gen_graph, state.gen, Tensor(mask[None])).data[0]
            save_em(out / f"em_{i:04d}.pgm", image)
            samples.append(image)
    emit_grid(samples, 4, out / ("grid.ppm" if stage == "mask" else "grid.pgm"))
    info = {"stage": stage, "variant": cfg.variant, "n": args.n, "seed": args.seed,
            "resolution": cfg.resolution, "checkpoint_step": state.step}
    (out / "generated.json").write_text(json.dumps(info, sort_keys=True, indent=2) + "\n")
    print(out)
    return 0


def cmd_analyze_rf(args) -> int:
    if args.graph is not None:
        try:
            text = Path(args.graph).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read graph {args.graph}: {exc.strerror}") from exc
        try:
            graph = LayerGraph.from_text(text, Path(args.graph).stem)
        except ValueError as exc:
            raise UsageError(f"{args.graph}: {exc}") from exc
    else:
        graph = build_discriminator(args.builtin, 3, args.resolution)
    try:
        report = analyze(graph)
    except GraphError as exc:
        raise UsageError(str(exc)) from exc
    if args.write_graph is not None:
        Path(args.write_graph).write_text(graph.to_text())
    print(report.table())
    if args.expect is not None:
        try:
            expected = sorted({int(v) for v in args.expect.split(",") if v.strip()})
        except ValueError as exc:
            raise UsageError(f"--expect takes comma-separated integers, got {args.expect!r}") from exc
        if expected != report.rf_set:
            print(f"rf set {report.rf_set} does not match expected {expected}", file=sys.stderr)
            return 1
    return 0


def _parse_generated(spec: str) -> tuple[str | None, Path]:
    label, sep, path = spec.partition("=")
    if sep and label in LABELS:
        return label, Path(path)
    return None, Path(spec)


def _generated_label(directory: Path) -> str:
    info_path = directory / "generated.json"
    if not info_path.is_file():
        raise UsageError(f"{directory} has no generated.json; pass the label as LABEL=DIR")
    variant = json.loads(info_path.read_text()).get("variant")
    label = f"generated-{variant}"
    if label not in LABELS:
        raise UsageError(f"{info_path}: unknown variant {variant!r}")
    return label


def cmd_eval_pca(args) -> int:
    pattern = "mask_*.ppm" if args.space == "mask" else "em_*.pgm"
    loader = load_mask if args.space == "mask" else load_em
    groups: dict[str, list[np.ndarray]] = {}
    resolution = None
    for spec in args.generated:
        label, directory = _parse_generated(spec)
        if not directory.is_dir():
            raise UsageError(f"generated directory not found: {directory}")
        label = label or _generated_label(directory)
        if label in groups:
            raise UsageError(f"label {label} given twice")
        files = sorted(directory.glob(pattern))
        if not files:
            raise UsageError(f"no {pattern} files in {directory}")
        side = read_netpbm(files[0]).shape[0]
        if resolution is not None and side != resolution:
            raise UsageError(f"{directory}: resolution {side} differs from {resolution}")
        resolution = side
        groups[label] = [loader(f, side) for f in files]
    if not Path(args.real).is_file():
        raise UsageError(f"manifest not found: {args.real}")
    pairs = read_manifest(args.real)
    column = 0 if args.space == "mask" else 1
    real = [loader(pair[column], resolution) for pair in pairs]
    points = pca_scatter({"real": real, **groups}, side=min(args.side, resolution))
    emit_scatter(points, args.out)
    for label in ["real", *groups]:
        xy = np.array([(p.x, p.y) for p in points if p.label == label])
        print(f"{label}\tn={len(xy)}\tcentroid=({xy[:, 0].mean():.4f}, {xy[:, 1].mean():.4f})")
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_all(args.seeds, report=print)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"grad-check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skippatch", description="Two-stage GAN pipeline with a skip-patch "
                                     "discriminator: synthetic data, training, generation, analysis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", help="write a synthetic mask/EM corpus with a manifest")
    p.add_argument("--n", type=int, default=8, help="number of pairs (default 8)")
    p.add_argument("--resolution", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--seed", type=int, default=42, help="corpus seed (default 42)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth_data)

    for name, func, what in (("train-mask", cmd_train_mask, "stage 1: noise to mask GAN"),
                             ("train-em", cmd_train_em, "stage 2: mask to EM conditional GAN")):
        p = sub.add_parser(name, help=f"train {what}")
        p.add_argument("--config", help="JSON config (TrainConfig keys plus out_dir, resume)")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--resume", help="checkpoint to continue from")
        p.add_argument("--seed", type=int, help="seed (default 42)")
        p.add_argument("--epochs", type=int, help="total training steps")
        p.add_argument("--variant", choices=VARIANTS, help="discriminator variant (default skip)")
        p.add_argument("--resolution", type=int, help="image side (default 64)")
        p.add_argument("--manifest", help="training manifest; synthetic data when absent")
        p.add_argument("--l1-weight", type=float, dest="l1_weight", help="L1 weight lambda (default 100)")
        p.add_argument("--compare", metavar="V1,V2", help="train these variants with the same seed into "
                       "OUT/<variant> and write OUT/compare.csv")
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="sample masks or translate masks to EM images")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.spgn)")
    p.add_argument("--n", type=int, default=8, help="number of outputs (default 8)")
    p.add_argument("--seed", type=int, default=42, help="noise seed (default 42)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stage", choices=("mask", "em"), help="must match the checkpoint (default: its stage)")
    p.add_argument("--mask-dir", dest="mask_dir", help="masks (mask_*.ppm) to translate for --stage em")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze-rf", help="per-path receptive fields of a layer graph")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph", help="layer graph in the text format")
    src.add_argument("--builtin", choices=VARIANTS, help="a built-in discriminator")
    p.add_argument("--resolution", type=int, default=512, help="resolution for --builtin (default 512)")
    p.add_argument("--expect", metavar="A,B,...", help="expected rf set; exit 1 on mismatch")
    p.add_argument("--write-graph", dest="write_graph", metavar="FILE",
                   help="also write the analysed graph in the text format")
    p.set_defaults(func=cmd_analyze_rf)

    p = sub.add_parser("eval-pca", help="2-component PCA scatter of real and generated images")
    p.add_argument("--real", required=True, help="manifest of real pairs")
    p.add_argument("--generated", required=True, nargs="+", metavar="[LABEL=]DIR",
                   help=f"generate output directories; LABEL is one of {', '.join(LABELS[1:])}, "
                   "otherwise read from DIR/generated.json")
    p.add_argument("--out", required=True, help="scatter CSV path")
    p.add_argument("--space", choices=("mask", "em"), default="em", help="image space (default em)")
    p.add_argument("--side", type=int, default=32, help="feature downsampling side (default 32)")
    p.set_defaults(func=cmd_eval_pca)

    p = sub.add_parser("grad-check", help="finite-difference check of every op and block")
    p.add_argument("--seeds", type=int, default=20, help="random seeds per case (default 20)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return args.func(args)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"skippatch {args.command}: error: {exc}", file=sys.stderr)
    except (CheckpointError, ImageFormatError, FileNotFoundError, ValueError) as exc:
        sub.print_usage(sys.stderr)
        print(f"skippatch {args.command}: error: {exc}", file=sys.stderr)
    except TrainingError as exc:
        print(f"skippatch {args.command}: training failed: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
