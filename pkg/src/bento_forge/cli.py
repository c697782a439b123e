"""``bento-forge`` command line.

Exit codes: 0 success, 1 usage error, 2 validation or data error,
3 check failure (gradient check or similar).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .dataset import AnnotationError, generate_dataset, load_annotation, load_dataset, save_png, write_annotation
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
THREADS_ENV = "BENTO_FORGE_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _types(text: str) -> list[int]:
    try:
        types = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated presentation types, got {text!r}") from None
    if not types or any(t not in (1, 2, 3) for t in types):
        raise argparse.ArgumentTypeError(f"presentation types must be among 1, 2, 3; got {text!r}")
    return types


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bento-forge", description="Synthetic bento data, layout composition and text-to-image training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic annotated dataset")
    g.add_argument("--type", dest="types", type=_types, default=[1, 2, 3], help="presentation types, e.g. 3 or 1,2,3")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train the layout or text-to-image pipeline")
    t.add_argument("--pipeline", choices=["layout", "t2i"], required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="resume despite a config hash mismatch")

    gen = sub.add_parser("generate", help="frozen-weight generation from a checkpoint")
    gen.add_argument("--pipeline", choices=["layout", "t2i"])
    gen.add_argument("--checkpoint", type=Path, required=True)
    gen.add_argument("--config", type=Path, help="build models from this config instead of the embedded one")
    gen.add_argument("--input", required=True, help="layout: annotation file or dataset dir; t2i: caption or .txt file")
    gen.add_argument("--samples", type=int, default=1)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--pipeline", choices=["layout", "t2i"])
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("gradcheck", help="run the registered finite-difference checks")
    c.add_argument("--module", default="all")
    c.add_argument("--seed", type=int, default=0)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    args.out.mkdir(parents=True, exist_ok=True)
    for scene in generate_dataset(args.count, args.types, args.seed):
        write_annotation(scene, args.out)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def _scenes(path: Path):
    if path.is_dir():
        scenes = load_dataset(path)
    elif path.is_file():
        scenes = [load_annotation(path)]
    else:
        raise AnnotationError(f"{path}: no such file or directory")
    if not scenes:
        raise AnnotationError(f"{path}: dataset is empty")
    return scenes


def cmd_train(args) -> int:
    from .runs import train

    cfg = load_config(args.config, args.overrides)
    scenes = _scenes(args.data)
    res = train(args.pipeline, cfg, scenes, args.out, resume=args.resume, force=args.force)
    print(f"trained {args.pipeline} to step {res.step}; checkpoint {res.checkpoint}")
    return EXIT_OK


def _check_pipeline(requested: str | None, actual: str) -> None:
    if requested is not None and requested != actual:
        raise CheckpointError(f"--pipeline {requested} given but the checkpoint holds a {actual} model")


def cmd_generate(args) -> int:
    from .runs import file_sha256, generate_from_captions, generate_layouts, load_bundle

    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    before = file_sha256(args.checkpoint)
    cfg = load_config(args.config) if args.config else None
    bundle, ckpt = load_bundle(args.checkpoint, cfg)
    _check_pipeline(args.pipeline, ckpt.pipeline)
    models = bundle.models
    args.out.mkdir(parents=True, exist_ok=True)
    written = 0
    if ckpt.pipeline == "layout":
        models.freeze()
        checksum = models.checksum()
        record = {}
        for scene in _scenes(Path(args.input)):
            results = generate_layouts(models, scene, args.samples, args.seed)
            record[scene.scene_id] = []
            for k, (boxes, image) in enumerate(results):
                save_png(args.out / f"{scene.scene_id}_sample{k:02d}.png", image)
                record[scene.scene_id].append([list(b.as_tuple()) for b in boxes])
                written += 1
        (args.out / "layouts.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        if models.checksum() != checksum:  # pragma: no cover - guarded by read-only arrays
            raise RuntimeError("frozen model parameters changed during generation")
    else:
        models.set_frozen(True)
        src = Path(args.input)
        captions = [ln.strip() for ln in src.read_text(encoding="utf-8").splitlines() if ln.strip()] if src.is_file() else [args.input]
        for i, per_sample in enumerate(generate_from_captions(models, captions, args.samples, args.seed)):
            for k, stages in enumerate(per_sample):
                for m, img in enumerate(stages):
                    save_png(args.out / f"caption{i:02d}_sample{k:02d}_stage{m}.png", img)
                written += 1
    if file_sha256(args.checkpoint) != before:  # pragma: no cover - the file is only read
        raise RuntimeError("checkpoint file changed during generation")
    print(f"wrote {written} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .runs import evaluate_layout, evaluate_t2i, format_report, load_bundle

    bundle, ckpt = load_bundle(args.checkpoint)
    _check_pipeline(args.pipeline, ckpt.pipeline)
    scenes = _scenes(args.data)
    if ckpt.pipeline == "layout":
        report = evaluate_layout(bundle.models, scenes, args.seed)
    else:
        report = evaluate_t2i(bundle.models, scenes, args.seed)
    sys.stdout.write(format_report(report))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import registered_modules, run_registered

    modules = registered_modules()
    if args.module != "all" and args.module not in modules:
        raise UsageError(f"unknown module {args.module!r}; choose from all, {', '.join(modules)}")
    reports = run_registered(args.module, args.seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<40} max_rel_error={r.max_rel_error:.3e} tol={r.tolerance:.0e} points={r.points_checked}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with threadpool_limits(limits=_threads()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bento-forge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, AnnotationError, ShapeError, ValueError, OSError) as exc:
        print(f"bento-forge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
