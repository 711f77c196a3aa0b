"""``hit`` command line: train, eval, explain, faithfulness, sanity, layers.

Exit status: 0 on success, 1 on a usage error, 2 on a runtime error (one
line on stderr). Every file is written atomically.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config, parse_config, with_overrides
from .data import load_image_dir, read_image
from .faithfulness import (
    ABLATION_MODES,
    CORRUPTIONS,
    MODES,
    cascading_randomization,
    evaluate_curves,
    layer_ablation,
)
from .formats import (
    atomic_write,
    load_checkpoint,
    save_checkpoint,
    write_map_csv,
    write_pgm,
    write_table,
)
from .model import HiT
from .pipeline import METHODS, check_compatible, layer_profiles, load_split, method_maps, train_run
from .train import evaluate_top1

log = logging.getLogger("hit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _common(p: argparse.ArgumentParser, checkpoint: bool = True, data: bool = True) -> None:
    p.add_argument("--config", help="run config file ([model], [train], [data], [eval])")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="model checkpoint")
    if data:
        p.add_argument("--data", help="image directory <class>/<file> (overrides the config's eval data)")
        p.add_argument("--n-images", type=int, help="use the first N evaluation images")
    p.add_argument("--seed", type=int, help="seed for any randomness in the command")
    p.add_argument("--plot", action="store_true", help="also write PNG figures")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hit", description="Hindered Transformer: training and saliency evaluation.")
    parser.add_argument("--version", action="version", version=f"hit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model from a config")
    _common(p, checkpoint=False, data=False)
    p.add_argument("--out", required=True, help="output directory (model.ckpt, train_log.csv)")
    p.add_argument("--epochs", type=int, help="override [train] epochs")

    p = sub.add_parser("eval", help="top-1 accuracy on the evaluation data")
    _common(p)
    p.add_argument("--out", help="directory for eval.csv")

    p = sub.add_parser("explain", help="saliency map of one image")
    _common(p, data=False)
    p.add_argument("--image", required=True, help="PPM or PNG image")
    p.add_argument("--class", dest="class_index", type=int, help="class to explain (default: predicted)")
    p.add_argument("--method", choices=METHODS, default="ledger")
    p.add_argument("--upscale", action="store_true", help="write the PGM at input resolution")
    p.add_argument("--out", required=True, help="output directory (saliency.pgm, saliency.csv)")

    p = sub.add_parser("faithfulness", help="insertion/deletion curves")
    _common(p)
    p.add_argument("--method", required=True, choices=METHODS + ("all",))
    p.add_argument("--mode", required=True, choices=MODES + ("both",))
    p.add_argument("--corruption", choices=CORRUPTIONS, help="default: [eval] corruption")
    p.add_argument("--out", required=True, help="output directory for curve CSVs")

    p = sub.add_parser("sanity", help="cascading parameter randomization")
    _common(p)
    p.add_argument("--method", choices=METHODS, default="ledger")
    p.add_argument("--out", required=True, help="output directory (sanity.csv)")

    p = sub.add_parser("layers", help="per-layer contributions and layer ablations")
    _common(p)
    p.add_argument("--mode", choices=ABLATION_MODES + ("all",), default="all")
    p.add_argument("--out", required=True, help="output directory (layers.csv, ablation_*.csv)")
    return parser


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _run_config(args) -> tuple[RunConfig, set]:
    explicit: set = set()
    cfg = parse_config(args.config, explicit) if args.config else RunConfig()
    return cfg, explicit


def _load_model(args, cfg: RunConfig, explicit: set) -> tuple[HiT, RunConfig]:
    bundle = load_checkpoint(args.checkpoint)
    for section, key in sorted(explicit):
        if section == "model" and getattr(cfg.model, key) != getattr(bundle.cfg, key):
            raise ValueError(
                f"checkpoint has {key}={getattr(bundle.cfg, key)!r} but the config sets {getattr(cfg.model, key)!r}"
            )
    return bundle.model(), replace(cfg, model=bundle.cfg)


def _eval_data(args, cfg: RunConfig):
    if getattr(args, "data", None):
        data = load_image_dir(args.data)
        check_compatible(data, cfg.model)
    else:
        data = load_split(cfg, "eval")
    n = getattr(args, "n_images", None) or (cfg.eval.n_images if args.command != "eval" else None)
    if n is not None:
        if n < 1:
            raise UsageError("--n-images must be positive")
        data = data.subset(np.arange(min(n, len(data))))
    return data


def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, _ = _run_config(args)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        cfg = with_overrides(cfg, train=overrides)
    out = _out_dir(args.out)
    with atomic_write(out / "config.txt") as fh:
        fh.write(dump_config(cfg))

    def on_epoch(result):
        # checkpoint after every epoch so a divergence leaves the last good one
        save_checkpoint(out / "model.ckpt", result.model, cfg.train.seed, result.epochs_done)
        write_table(out / "train_log.csv", ["epoch", "train_loss", "eval_acc"],
                    [(h.epoch, h.train_loss, h.eval_acc) for h in result.history])

    result = train_run(cfg, on_epoch=on_epoch)
    if args.plot:
        from .plotting import plot_training

        plot_training(result.history, out / "train_log.png")
    final = result.history[-1] if result.history else None
    print(f"epochs={result.epochs_done}")
    if final is not None:
        print(f"train_loss={final.train_loss!r}")
        print(f"eval_acc={final.eval_acc!r}")
    print(f"checkpoint={out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg, explicit = _run_config(args)
    model, cfg = _load_model(args, cfg, explicit)
    data = _eval_data(args, cfg)
    acc = evaluate_top1(model, data)
    print(f"top1={acc!r}")
    print(f"n={len(data)}")
    if args.out:
        write_table(_out_dir(args.out) / "eval.csv", ["metric", "value"], [("top1", acc), ("n", len(data))])
    return 0


def cmd_explain(args) -> int:
    cfg, explicit = _run_config(args)
    model, cfg = _load_model(args, cfg, explicit)
    image = read_image(args.image)
    if image.shape[0] != cfg.model.image_size or image.shape[1] != cfg.model.image_size:
        raise ValueError(f"{args.image}: image is {image.shape[1]}x{image.shape[0]}, "
                         f"model expects {cfg.model.image_size}x{cfg.model.image_size}")
    logits = model.predict_logits(image[None])[0]
    c = int(logits.argmax()) if args.class_index is None else args.class_index
    if not 0 <= c < cfg.model.num_classes:
        raise UsageError(f"--class {c} outside [0, {cfg.model.num_classes})")
    seed = _seed(args, 0)
    grid = method_maps(model, image[None], args.method, np.array([c]), seed=seed,
                       gradcam_layer=cfg.eval.gradcam_layer)[0]
    out = _out_dir(args.out)
    meta = {"method": args.method, "class": c, "logit": repr(float(logits[c])), "image": args.image}
    write_map_csv(out / "saliency.csv", grid, meta)
    write_pgm(out / "saliency.pgm", grid, cfg.model.patch_size if args.upscale else 1)
    if args.plot:
        from .plotting import plot_saliency

        plot_saliency(grid, out / "saliency.png", image)
    print(f"class={c}")
    print(f"logit={float(logits[c])!r}")
    print(f"map_sum={float(grid.sum())!r}")
    return 0


def cmd_faithfulness(args) -> int:
    cfg, explicit = _run_config(args)
    model, cfg = _load_model(args, cfg, explicit)
    data = _eval_data(args, cfg)
    corruption = args.corruption or cfg.eval.corruption
    methods = METHODS if args.method == "all" else (args.method,)
    modes = MODES if args.mode == "both" else (args.mode,)
    seed = _seed(args, 0)
    out = _out_dir(args.out)
    classes = model.predict_logits(data.images).argmax(-1)
    records = {}
    for method in methods:
        maps = method_maps(model, data.images, method, classes, seed=seed, gradcam_layer=cfg.eval.gradcam_layer)
        for mode in modes:
            rec = evaluate_curves(model, data.images, maps, mode, corruption, method,
                                  sigma=cfg.eval.blur_sigma, kernel=cfg.eval.blur_kernel)
            records.setdefault(mode, []).append(rec)
            stem = f"curve_{method}_{mode}_{corruption}"
            meta = {"mode": mode, "corruption": corruption, "method": method, "n_images": len(data),
                    "auc": repr(rec.auc), "nauc": repr(rec.nauc.value), "nauc_degenerate": rec.nauc.degenerate}
            write_table(out / f"{stem}.csv", ["fraction", "mean_prob"], zip(rec.fractions, rec.mean_prob), meta)
            write_table(out / f"{stem}_per_image.csv", ["image", "auc"], enumerate(rec.per_image_auc()), meta)
            print(f"{method} {mode} {corruption} auc={rec.auc:.6f} nauc={rec.nauc.value:.6f}")
    if args.plot:
        from .plotting import plot_curves

        for mode, recs in records.items():
            plot_curves(recs, out / f"curves_{mode}_{corruption}.png", title=f"{mode}, {corruption} corruption")
    return 0


def cmd_sanity(args) -> int:
    cfg, explicit = _run_config(args)
    model, cfg = _load_model(args, cfg, explicit)
    data = _eval_data(args, cfg)
    seed = _seed(args, cfg.eval.sanity_seed)

    def saliency(m, images, classes):
        return method_maps(m, images, args.method, classes, seed=seed, gradcam_layer=cfg.eval.gradcam_layer)

    report = cascading_randomization(model, data.images, saliency, seed=seed)
    out = _out_dir(args.out)
    write_table(out / "sanity.csv", ["stage", "spearman_abs", "pearson_abs"], report.rows(),
                {"method": args.method, "seed": seed, "n_images": len(data)})
    if args.plot:
        from .plotting import plot_sanity

        plot_sanity(report, out / "sanity.png")
    for stage, sp, pe in report.rows():
        print(f"{stage} spearman_abs={sp:.6f} pearson_abs={pe:.6f}")
    return 0


def cmd_layers(args) -> int:
    cfg, explicit = _run_config(args)
    model, cfg = _load_model(args, cfg, explicit)
    data = _eval_data(args, cfg)
    out = _out_dir(args.out)
    signed = layer_profiles(model, data.images)
    rows = [(l, float(signed[:, l].mean()), float(np.abs(signed[:, l]).mean())) for l in range(cfg.model.depth)]
    write_table(out / "layers.csv", ["layer", "signed", "absolute"], rows, {"n_images": len(data)})
    for l, s, a in rows:
        print(f"layer {l} signed={s:.6f} absolute={a:.6f}")
    modes = ABLATION_MODES if args.mode == "all" else (args.mode,)
    for mode in modes:
        res = layer_ablation(model, data, mode)
        write_table(out / f"ablation_{mode}.csv", ["setting", "accuracy"], res, {"mode": mode, "n_images": len(data)})
        print(mode + " " + " ".join(f"{name}={acc:.4f}" for name, acc in res))
        if args.plot:
            from .plotting import plot_ablation

            plot_ablation(res, out / f"ablation_{mode}.png", title=mode)
    if args.plot:
        from .plotting import plot_layer_profile

        plot_layer_profile([r[1] for r in rows], [r[2] for r in rows], out / "layers.png")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "faithfulness": cmd_faithfulness,
    "sanity": cmd_sanity,
    "layers": cmd_layers,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"hit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("hit: interrupted", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        if args.verbose:
            log.exception("failed")
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.filename}: {exc.strerror}"
        print(f"hit {args.command}: error: {msg}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
