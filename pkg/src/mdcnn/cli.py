"""Command-line interface.

Every sub-command accepts ``--config FILE`` holding ``key = value`` lines
whose keys are the command's option names (dashes or underscores); flags
given on the command line take precedence.  Exit codes: 0 success, 2 usage
or input error, 3 pipeline state error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import codec, evaluation, imaging, networks, training

ENV_CHECKPOINT_DIR = "MDCNN_CHECKPOINT_DIR"
IMAGE_SUFFIXES = {".png", ".pgm", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm"}


class UsageError(Exception):
    exit_code = 2


class PipelineError(Exception):
    exit_code = 3


# ---------------------------------------------------------------------------
# helpers


def _read_config(path: str) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse ``argv`` with values from ``--config`` acting as defaults."""
    required = [a for a in sub._actions if a.required]
    for a in required:  # a required option may come from the config file
        a.required = False
    try:
        args = parser.parse_args(argv)
    finally:
        for a in required:
            a.required = True
    if not getattr(args, "config", None):
        return parser.parse_args(argv)
    values = _read_config(args.config)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys for '{args.command}': {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        action = actions[key]
        if action.type is not None:
            try:
                defaults[key] = action.type(raw)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
        elif action.nargs == 0:  # store_true
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = raw
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"config key {key}: {raw!r} not in {list(action.choices)}")
        if action.required:
            action.required = False
    sub.set_defaults(**defaults)
    # flags still win: re-parse with the config values as defaults
    return parser.parse_args(argv)


def _qf_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad QF list {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty QF list")
    return values


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"probability {v} outside [0, 1]")
    return v


def _corpus(path: str) -> dict[str, np.ndarray]:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"corpus directory not found: {path}")
    files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no images in corpus directory {path}")
    try:
        return {f.stem: imaging.load_image(f) for f in files}
    except (OSError, imaging.ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc


def _checkpoint_path(path: str | None) -> Path:
    env_dir = os.environ.get(ENV_CHECKPOINT_DIR)
    if path is None:
        if not env_dir:
            raise UsageError(f"--checkpoint not given and ${ENV_CHECKPOINT_DIR} is not set")
        path = str(Path(env_dir) / "model.pt")
    p = Path(path)
    if not p.is_file() and env_dir and (Path(env_dir) / path).is_file():
        p = Path(env_dir) / path
    if not p.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return p


def _load_bundle(path: str | None) -> tuple[networks.ModelBundle, Path]:
    p = _checkpoint_path(path)
    try:
        bundle = networks.load_checkpoint(p)
    except networks.CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    bundle.eval()
    return bundle, p


def _image(path: str) -> np.ndarray:
    try:
        img = imaging.load_image(path)
    except FileNotFoundError as exc:
        raise UsageError(f"image not found: {path}") from exc
    except (OSError, imaging.ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise UsageError(f"{path}: image size {img.shape[0]}x{img.shape[1]} must be even")
    return img


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args) -> int:
    corpus = _corpus(args.corpus)
    augment = tuple(a for a in args.augment.split(",") if a)
    try:
        ps = imaging.prepare_patches(
            list(corpus.values()), args.patch, args.total, augment, args.seed, names=list(corpus)
        )
    except (imaging.ImageFormatError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = imaging.save_patches(ps, args.out)
    print(f"wrote {len(ps)} patches; manifest {manifest}")
    return 0


def _training_config(args) -> training.TrainingConfig:
    try:
        return training.TrainingConfig(
            algorithm=args.algorithm,
            iterations=args.iters,
            epochs_p=args.epochs,
            epochs_q=args.epochs_q if args.epochs_q is not None else args.epochs,
            epochs_l=args.epochs_l if args.epochs_l is not None else args.epochs,
            pretrain_epochs=args.pretrain_epochs,
            batch=args.batch,
            lr0=args.lr,
            qf=args.qf,
            seed=args.seed,
            widths=args.widths,
            beta=args.beta,
            dtype=args.dtype,
            diagnostic_path=str(Path(args.out) / "diverged.pt"),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _training_config(args)
    patch_dir = Path(args.patches)
    if not (patch_dir / imaging.MANIFEST).is_file():
        raise UsageError(f"no patch manifest in {args.patches}")
    patches = imaging.load_patches(patch_dir)
    if len(patches) == 0:
        raise UsageError(f"{args.patches} holds no patches")
    bundle = None
    if args.init:
        bundle, _ = _load_bundle(args.init)
        if bundle.width != cfg.widths:
            raise UsageError(f"--init checkpoint has width {bundle.width}, not {cfg.widths}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = training.train_algorithm1 if cfg.algorithm == 1 else training.train_algorithm2
    try:
        bundle = train(patches, cfg, bundle=bundle)
    except training.TrainingDiverged as exc:
        raise PipelineError(f"training diverged: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    digest = networks.save_checkpoint(bundle, out / "model.pt")
    bundle.train_log.write_jsonl(out / "trainlog.jsonl")
    (out / "config.json").write_text(json.dumps(training.config_dict(cfg), indent=2, sort_keys=True) + "\n")
    print(f"checkpoint {out / 'model.pt'} sha256 {digest}")
    return 0


def cmd_encode(args) -> int:
    bundle, ckpt = _load_bundle(args.checkpoint)
    img = _image(args.image)
    a, b = evaluation.describe(bundle, img, args.descriptions)
    cfg = codec.CodecConfig(args.qf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    streams = {}
    for tag, desc in (("a", a), ("b", b)):
        bs = codec.encode(desc, cfg)
        (out / f"{tag}.jpg").write_bytes(bs.data)
        streams[tag] = {"file": f"{tag}.jpg", "bytes": bs.byte_count}
    meta = {
        "checkpoint_sha256": networks.file_digest(ckpt),
        "height": img.shape[0],
        "width": img.shape[1],
        "qf": args.qf,
        "descriptions": args.descriptions,
        "streams": streams,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'a.jpg'}, {out / 'b.jpg'}, {out / 'meta.json'}")
    return 0


def _read_stream(path: Path | None, expected: tuple[int, int] | None):
    if path is None or not path.is_file():
        return None
    try:
        img = codec.decode(path.read_bytes())
    except codec.CodecError as exc:
        # a corrupt stream counts as a failed channel
        print(f"warning: {path}: {exc}", file=sys.stderr)
        return None
    if expected is not None and img.shape != expected:
        raise PipelineError(f"{path}: size {img.shape} does not match metadata {expected}")
    return img


def cmd_decode(args) -> int:
    bundle, ckpt = _load_bundle(args.checkpoint)
    path_a = Path(args.a) if args.a else None
    path_b = Path(args.b) if args.b else None
    expected = None
    if args.meta:
        meta_path = Path(args.meta)
        if not meta_path.is_file():
            raise UsageError(f"metadata not found: {args.meta}")
        meta = json.loads(meta_path.read_text())
        if meta.get("checkpoint_sha256") != networks.file_digest(ckpt):
            raise PipelineError("descriptions were encoded with a different checkpoint")
        expected = (meta["height"] // 2, meta["width"] // 2)
        path_a = path_a or meta_path.parent / meta["streams"]["a"]["file"]
        path_b = path_b or meta_path.parent / meta["streams"]["b"]["file"]
    dec_a = _read_stream(path_a, expected)
    dec_b = _read_stream(path_b, expected)
    need = {"sideA": [dec_a], "sideB": [dec_b], "central": [dec_a, dec_b]}[args.mode]
    if any(d is None for d in need):
        raise PipelineError(f"missing description for {args.mode} reconstruction")
    if dec_a is not None and dec_b is not None and dec_a.shape != dec_b.shape:
        raise PipelineError("descriptions differ in size")
    recon = evaluation.reconstruct_from_decoded(bundle, dec_a, dec_b, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    imaging.save_image(recon, out)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    bundle, _ = _load_bundle(args.checkpoint)
    corpus = _corpus(args.corpus)
    try:
        if args.method == "ours-base":
            qf = args.qf or list(evaluation.BASE_QF)
            points = evaluation.evaluate_ours_base(bundle, corpus, qf, jobs=args.jobs)
        else:
            qf = args.qf or list(evaluation.OURS_QF)
            points = evaluation.evaluate_model(bundle, corpus, qf, jobs=args.jobs)
    except (ValueError, imaging.ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.export_rd(points, out)
    for p in evaluation.summarize(points):
        print(f"{p.method} qf={p.qf}: {evaluation.format_report(p)}")
    return 0


def cmd_simulate(args) -> int:
    bundle, _ = _load_bundle(args.checkpoint)
    img = _image(args.image)
    scenario = evaluation.ChannelScenario(args.ploss_a, args.ploss_b, args.trials, args.seed)
    report = evaluation.simulate_channels(
        bundle, img, args.qf, scenario, method="exact" if args.exact else "monte_carlo",
        descriptions=args.descriptions,
    )
    text = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
    return 0


def cmd_plot(args) -> int:
    if not Path(args.csv).is_file():
        raise UsageError(f"CSV not found: {args.csv}")
    points = evaluation.read_rd(args.csv)
    if not points:
        raise UsageError(f"{args.csv} holds no rows")
    for p in evaluation.plot_rd(points, args.out, args.format):
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="mdcnn", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    def add(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value file; command-line flags win")
        p.set_defaults(func=func)
        cmds[name] = p
        return p

    p = add("prepare-data", cmd_prepare_data, "cut augmented training patches from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=160)
    p.add_argument("--total", type=int, default=3200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", default="crop,flip,rotate")

    p = add("train", cmd_train, "train a model bundle for one quality factor")
    p.add_argument("--patches", required=True, help="directory written by prepare-data")
    p.add_argument("--out", default=os.environ.get(ENV_CHECKPOINT_DIR, "checkpoints"))
    p.add_argument("--algorithm", type=int, choices=(1, 2), default=1)
    p.add_argument("--qf", type=int, required=True)
    p.add_argument("--iters", type=int, default=None, help="R (algorithm 1) or T (algorithm 2)")
    p.add_argument("--epochs", type=int, default=2, help="p; also q and l unless given")
    p.add_argument("--epochs-q", type=int, default=None)
    p.add_argument("--epochs-l", type=int, default=None)
    p.add_argument("--pretrain-epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--widths", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--init", default=None, help="checkpoint to start from")

    p = add("encode", cmd_encode, "produce two JPEG descriptions of an image")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--qf", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--descriptions", choices=("mdgn", "polyphase"), default="mdgn")

    p = add("decode", cmd_decode, "reconstruct an image from received descriptions")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mode", choices=("sideA", "sideB", "central"), required=True)
    p.add_argument("--meta", default=None, help="meta.json written by encode")
    p.add_argument("--a", default=None, help="description A stream")
    p.add_argument("--b", default=None, help="description B stream")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "rate-distortion table over a corpus")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--qf", type=_qf_list, default=None,
                   help="comma-separated list; defaults to 2,6,10,20,40 (ours) or 2,3,4,10,50 (ours-base)")
    p.add_argument("--method", choices=("ours", "ours-base"), default="ours")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = add("simulate", cmd_simulate, "expected quality over two lossy channels")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--qf", type=int, required=True)
    p.add_argument("--ploss-a", type=_probability, default=0.0)
    p.add_argument("--ploss-b", type=_probability, default=0.0)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact", action="store_true", help="enumerate the four outcomes instead of sampling")
    p.add_argument("--descriptions", choices=("mdgn", "polyphase"), default="mdgn")
    p.add_argument("--out", default=None)

    p = add("plot", cmd_plot, "RD plots from an evaluation CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "svg", "pdf"), default="png")

    return parser, cmds


def main(argv=None) -> int:
    parser, cmds = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command = next((a for a in argv if a in cmds), None)
        if command is None:
            parser.parse_args(argv)  # prints usage and exits
        args = _apply_config(parser, cmds[command], argv)
        torch.use_deterministic_algorithms(True)
        return args.func(args)
    except (UsageError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else 2


if __name__ == "__main__":
    sys.exit(main())
