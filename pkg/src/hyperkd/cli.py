"""Command-line entry point: ``hyperkd <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import banddef, plotting
from .datastore import StoreError, TileStore, generate_store, normalize, read_store, write_store
from .downstream import (HeadConfig, attach_head, eval_classification, eval_regression,
                         train_head, write_classification_csv, write_regression_csv)
from .numerics import NonFiniteError
from .objective import max_of_channel_means, write_channel_csv, write_metrics_csv
from .saliency import METHODS, MODES, build_mask, score_patches, write_pgm, write_scores_csv
from .trainer import PRESETS, Pretrainer, load_config, run_pretraining, target_table

log = logging.getLogger("hyperkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    p.add_argument("--threads", type=int, default=1, help="worker threads for patch scoring")
    p.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hyperkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic tile store")
    _common(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--train", type=int, default=16)
    p.add_argument("--eval", type=int, default=4)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--planted", type=int, default=4)
    p.add_argument("--amplitude", type=float, default=0.1)
    p.add_argument("--classes", type=int, default=4)

    p = sub.add_parser("align-bands", help="aggregate source bands onto a target band set")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--store", type=Path, help="tile store to align")
    src.add_argument("--source", type=Path, help="source band table (CSV)")
    p.add_argument("--target", default="hls", help="hls, span, auto or a band table path")
    p.add_argument("--overlap", choices=("contained", "intersecting"), default="contained")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("score-patches", help="patch significance scores and mask of one tile")
    _common(p)
    p.add_argument("--store", required=True, type=Path)
    p.add_argument("--tile", default=None, help="tile id (default: first tile)")
    p.add_argument("--method", choices=METHODS[:3], default="gabor")
    p.add_argument("--patch", type=int, default=None, help="patch side (default: store meta)")
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--mode", choices=MODES, default="salient_masked")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("pretrain", help="distillation pretraining of the student")
    _common(p)
    p.add_argument("--store", required=True, type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval-recon", help="reconstruction PSNR/SSIM of a checkpoint")
    _common(p)
    p.add_argument("--store", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--mode", choices=MODES, default="random")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("downstream", help="train and evaluate a head on the frozen encoder")
    _common(p)
    p.add_argument("--store", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--task", choices=("classification", "regression"), default="classification")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out", type=Path)
    return parser


# -- commands ----------------------------------------------------------------

def _out_dir(args) -> Path | None:
    if args.dry_run or args.out is None:
        return None
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_gen_data(args) -> int:
    seed = 0 if args.seed is None else args.seed
    store = generate_store(None, seed, args.train, args.eval, args.bands, args.size,
                           args.patch, args.planted, args.amplitude, args.classes)
    if not args.dry_run:
        write_store(store, args.out)
    print(f"gen-data: {len(store.tiles)} tiles, {args.bands} bands, "
          f"{args.size}x{args.size} -> {'(dry run)' if args.dry_run else args.out}")
    return EXIT_OK


def cmd_align_bands(args) -> int:
    store = read_store(args.store) if args.store else None
    source = store.band_table if store else banddef.load_band_table(args.source)
    target = target_table(args.target, source, args.overlap)
    amap = banddef.build_alignment(source, target, args.overlap)
    lines = ["target_band,source_bands"]
    for band, subset in zip(target, amap.subsets):
        lines.append(f"{band.band_id},{' '.join(str(i) for i in subset)}")
    print("\n".join(lines))
    out = _out_dir(args)
    if out is not None:
        (out / "alignment.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        banddef.save_band_table(target, out / "target_bands.csv")
        if store is not None:
            tiles = [banddef.align_cube(t, amap) for t in store.tiles]
            aligned = TileStore(tiles, target, None, store.labels, store.targets,
                                dict(store.meta, aligned_from=str(args.store)))
            write_store(aligned, out / "store")
    return EXIT_OK


def _tile(store: TileStore, tile_id):
    if tile_id is None:
        return store.tiles[0]
    for t in store.tiles:
        if t.tile_id == tile_id:
            return t
    raise StoreError(f"no tile {tile_id!r} in store")


def cmd_score_patches(args) -> int:
    store = read_store(args.store)
    tile = _tile(store, args.tile)
    p = args.patch or int(store.meta.get("patch_size", 8))
    if store.stats is not None:
        tile = normalize(tile, store.stats)
    scores = score_patches(tile, args.method, p, threads=args.threads)
    mask = build_mask(scores, args.ratio, args.mode, seed=args.seed or 0)
    print(f"score-patches: tile {tile.tile_id}, {len(scores)} patches, "
          f"{mask.num_masked} masked ({args.mode})")
    out = _out_dir(args)
    if out is not None:
        write_scores_csv(out / "scores.csv", scores, mask)
        write_pgm(out / "scores.pgm", scores, scale=p)
        plotting.score_heatmap(scores, out / "scores.png", mask)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.insert(0, f"seed={args.seed}")
    config = load_config(args.config, args.preset, overrides)
    store = read_store(args.store)
    if args.dry_run:
        Pretrainer(config, store, args.threads)     # validates dims, alignment, teacher
        print(config.to_text(), end="")
        return EXIT_OK
    trainer, runlog = run_pretraining(config, store, args.out, args.threads, args.resume,
                                      args.steps)
    last = runlog.steps[-1] if runlog.steps else None
    if last:
        print(f"pretrain: {trainer.step} steps, l_total {last['l_total']:.4f}, "
              f"l_kd {last['l_kd']:.4f}, {runlog.wall_clock:.1f}s")
    if args.out is not None and runlog.steps:
        plotting.loss_curves(runlog, Path(args.out) / "loss.png")
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    store = read_store(args.store)
    trainer = Pretrainer.resume(args.checkpoint, store, args.threads)
    split = trainer.eval if args.split == "eval" and trainer.eval is not None else trainer.train
    if args.dry_run:
        print(f"eval-recon: {len(split.ids)} tiles ok")
        return EXIT_OK
    ev = trainer.evaluate(split, args.mode)
    psnr_means = ev["channel_psnr"].mean(axis=0)
    ssim_means = ev["channel_ssim"].mean(axis=0)
    print(f"eval-recon: psnr {ev['psnr'].mean():.3f} dB, ssim {ev['ssim'].mean():.4f}, "
          f"per-channel psnr max {max_of_channel_means(ev['channel_psnr']):.3f} dB")
    out = _out_dir(args)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", ev["ids"], ev["psnr"], ev["ssim"])
        write_channel_csv(out / "channels.csv", psnr_means, ssim_means)
        plotting.channel_psnr(psnr_means, out / "channel_psnr.png")
    return EXIT_OK


def cmd_downstream(args) -> int:
    store = read_store(args.store)
    train, test = store.split("train"), store.split("eval") or store.split("train")
    table = store.labels if args.task == "classification" else store.targets
    missing = [t.tile_id for t in train + test if t.tile_id not in table]
    if missing:
        raise StoreError(f"tile {missing[0]} has no {args.task} ground truth")
    head = HeadConfig(args.task, int(store.meta.get("n_classes", 4)))
    model = attach_head(args.checkpoint, head, stats=store.stats, seed=args.seed or 0)
    if args.dry_run:
        model.features(train[:1])
        print(f"downstream: encoder and {len(train)}+{len(test)} tiles ok")
        return EXIT_OK
    y_train = np.stack([table[t.tile_id] for t in train])
    y_test = np.stack([table[t.tile_id] for t in test])
    losses = train_head(model, train, y_train, args.steps, args.lr, args.batch, args.seed or 0)
    out = _out_dir(args)
    if args.task == "classification":
        res = eval_classification(model, test, y_test)
        print(f"downstream: top1 {res.top1:.4f}, mIoU {res.miou:.4f}, "
              f"final loss {losses[-1]:.4f}")
        if out is not None:
            write_classification_csv(out / "results.csv", res)
            plotting.class_bars(res, out / "classes.png")
    else:
        value = eval_regression(model, test, y_test)
        print(f"downstream: mae {value:.4f}, final loss {losses[-1]:.4f}")
        if out is not None:
            write_regression_csv(out / "results.csv", value)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "align-bands": cmd_align_bands,
            "score-patches": cmd_score_patches, "pretrain": cmd_pretrain,
            "eval-recon": cmd_eval_recon, "downstream": cmd_downstream}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:        # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        print(f"hyperkd {args.command}: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except banddef.EmptySubset as exc:
        print(f"hyperkd {args.command}: band alignment: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StoreError, FileNotFoundError, ValueError) as exc:
        print(f"hyperkd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, RuntimeError, AssertionError) as exc:
        print(f"hyperkd {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(f"hyperkd {args.command}: internal error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
