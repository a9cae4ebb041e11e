"""Command-line entry point.

Subcommands: train, eval-digital, eval-photos, sweep, report. Global flags
--config/--seed/--out apply everywhere; --set key=value overrides any config
key, and the dedicated flags override their own keys.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .core import (CorpusError, ImageIOError, load_patch_checkpoint,
                   load_scene_set, new_patch, save_patch_checkpoint)
from .detector import load_toy_detector
from .evaluation import SweepEntry, SweepSpec, digital_eval, photo_eval, sweep
from .reporting import emit_report, plot_history
from .trainer import config_hash, train

logger = logging.getLogger("stealthpatch")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key-tree config file")
    p.add_argument("--seed", type=int, help="overrides train.seed / eval.seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _tree(args) -> dict:
    tree = cfgmod.load_config(args.config)
    return cfgmod.apply_overrides(tree, args.overrides or [])


def _detector(tree: dict):
    name = tree.get("detector.name", "toy")
    if name != "toy":
        raise cfgmod.ConfigError(
            f"unknown detector backend {name!r}; this build bundles 'toy' only "
            f"(real backends plug in through the adapter API)")
    return load_toy_detector(tree.get("detector.fixture"))


def cmd_train(args) -> int:
    tree = _tree(args)
    out = Path(args.out)
    detector = _detector(tree)
    cfg = cfgmod.build_train_config(tree, seed=args.seed,
                                    checkpoint_dir=str(out / "checkpoints"))
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if cfg.checkpoint_every == 0:
        cfg.checkpoint_every = max(cfg.epochs // 4, 1)
    h, w = cfgmod.patch_size(tree)
    init = cfgmod.parse_init_spec(args.init or tree.get("patch.init", "random:0"))
    patch = new_patch(h, w, init)
    corpus = load_scene_set(args.corpus, split_tag="train")
    logger.info("training %dx%d patch on %d scenes (config %s)",
                h, w, len(corpus), config_hash(cfg))
    final, history = train(patch, corpus, detector, cfg)
    save_patch_checkpoint(final, out / "patch", meta={
        "seed": cfg.seed, "epoch": len(history.records),
        "objective": history.records[-1].total, "config_hash": config_hash(cfg)})
    history.write_csv(out / "history.csv")
    plot_history(history, out / "convergence.png")
    print(f"trained patch -> {out / 'patch.png'} "
          f"(final total loss {history.records[-1].total:.4f})")
    return 0


def cmd_eval_digital(args) -> int:
    tree = _tree(args)
    detector = _detector(tree)
    cfg = cfgmod.build_eval_config(tree, seed=args.seed)
    if args.repetitions is not None:
        cfg.repetitions = args.repetitions
    patch, _meta = load_patch_checkpoint(args.patch)
    corpus = load_scene_set(args.corpus, split_tag="test")
    report = digital_eval(patch, corpus, detector, cfg)
    emit_report(report, args.out)
    print(f"digital R_s over {report.n_all} persons x {len(report.rs_values)} reps: "
          f"mean {report.rs_mean:.2f}% (min {report.rs_min:.2f}%, "
          f"max {report.rs_max:.2f}%) -> {args.out}")
    return 0


def cmd_eval_photos(args) -> int:
    tree = _tree(args)
    detector = _detector(tree)
    cfg = cfgmod.build_eval_config(tree, seed=args.seed)
    report = photo_eval(args.root, detector, cfg)
    emit_report(report, args.out)
    from .evaluation import attack_success_rate
    print(f"photo R_s over {report.total.n_all} persons: "
          f"{attack_success_rate(report.total):.2f}% -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    tree = _tree(args)
    detector = _detector(tree)
    entries = []
    for entry in json.loads(Path(args.spec).read_text(encoding="utf-8")):
        entries.append(SweepEntry(name=entry["name"],
                                  init=cfgmod.parse_init_spec(entry["init"]),
                                  color_tag=entry.get("color_tag", ""),
                                  shape_tag=entry.get("shape_tag", "")))
    h, w = cfgmod.patch_size(tree)
    spec = SweepSpec(entries=entries, patch_height=h, patch_width=w)
    train_cfg = cfgmod.build_train_config(tree, seed=args.seed)
    eval_cfg = cfgmod.build_eval_config(tree, seed=args.seed)
    train_set = load_scene_set(args.train_corpus, split_tag="train")
    test_set = load_scene_set(args.test_corpus, split_tag="test")
    report = sweep(spec, train_set, test_set, detector, train_cfg, eval_cfg)
    emit_report(report, args.out)
    best = report.rows[0]
    print(f"sweep of {len(report.rows)} entries -> {args.out} "
          f"(best: {best.name}, mean R_s {best.rs_mean:.2f}%)")
    return 0


def cmd_report(args) -> int:
    src = Path(args.source)
    out = Path(args.out)
    if src.suffix == ".json":
        payload = json.loads(src.read_text(encoding="utf-8"))
        emit_report(payload, out)
    elif src.suffix == ".csv":
        with src.open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows and "total" in rows[0]:
            plot_history(rows, out / "convergence.png")
        else:
            raise SystemExit(f"{src}: not a history.csv")
    else:
        raise SystemExit(f"cannot re-render {src}: expected .json or .csv")
    print(f"re-rendered {src} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stealthpatch",
        description="Adversarial patch synthesis and evaluation against "
                    "grid-based person detectors")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a patch on an annotated corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="corpus root (images/ + annotations/)")
    p.add_argument("--init", help="random:<seed> | color:r,g,b | image:<path>")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-digital", help="10-repetition digital protocol")
    _add_common(p)
    p.add_argument("--corpus", required=True, help="annotated test corpus root")
    p.add_argument("--patch", required=True, help="patch checkpoint (.png)")
    p.add_argument("--repetitions", type=int)
    p.set_defaults(func=cmd_eval_digital)

    p = sub.add_parser("eval-photos", help="score photo/frame batches by condition")
    _add_common(p)
    p.add_argument("--root", required=True,
                   help="photo root: <scene>/<distance>/<angle>/*.jpg|png")
    p.set_defaults(func=cmd_eval_photos)

    p = sub.add_parser("sweep", help="train+evaluate one patch per init descriptor")
    _add_common(p)
    p.add_argument("--spec", required=True, help="JSON list of sweep entries")
    p.add_argument("--train-corpus", required=True)
    p.add_argument("--test-corpus", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render report.json / history.csv")
    _add_common(p)
    p.add_argument("--source", required=True, help="report.json or history.csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, CorpusError, ImageIOError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
