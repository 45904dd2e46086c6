"""Command-line entry point: gen, rasterize, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 invalid arguments or missing inputs, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .annotations import Split, parse_dataset
from .checkpoint import read_checkpoint, save_checkpoint
from .checks import model_gradcheck, threshold_for
from .density import GaussianSpec, rasterize, write_dmap, write_pgm
from .errors import CGDRCNError, UsageError
from .evaluation import emit_report, evaluate
from .loss import LossConfig
from .model import ModelConfig
from .synthcrowd import generate_corpus
from .training import TrainConfig, ablation_suite, ablation_table, image_loader, load_corpus, train

log = logging.getLogger("cgdrcn")

THREADS_ENV = "CGDRCN_THREADS"


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.required:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _existing_file(flag, value):
    if not Path(value).is_file():
        raise UsageError(f"{flag}: file not found: {value}")


def _existing_dir(flag, value):
    if not Path(value).is_dir():
        raise UsageError(f"{flag}: directory not found: {value}")


def build_parser() -> argparse.ArgumentParser:
    fmt = _Formatter
    p = _Parser(prog="cgdrcn", description="Confidence-guided residual crowd counting", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"BLAS threads (env {THREADS_ENV}); 1 guarantees bit-reproducibility")

    g = sub.add_parser("gen", help="generate a synthetic corpus", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    for cat in ("low", "medium", "high", "distractors", "weather"):
        g.add_argument(f"--{cat}", type=int, default=0, help=f"number of {cat} images")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=256, help="square image side (multiple of 32)")
    g.add_argument("--test-fraction", type=float, default=0.25, help="per-category share of test images")
    common(g)

    r = sub.add_parser("rasterize", help="write the density map of one image", formatter_class=fmt)
    r.add_argument("--dataset", required=True)
    r.add_argument("--image", required=True, help="record id")
    r.add_argument("--sigma", type=float, default=4.0)
    r.add_argument("--out", required=True, help="DMAP output file")
    r.add_argument("--pgm", default=None, help="optional 8-bit preview image path")
    common(r)

    def training_flags(sp, steps_default):
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--images", required=True, help="directory of <id>.ppm images")
        sp.add_argument("--preset", choices=("tiny", "full"), default="tiny")
        sp.add_argument("--steps", type=int, default=steps_default)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--lr", type=float, default=1e-5)
        sp.add_argument("--batch-size", type=int, default=4)
        sp.add_argument("--crop-size", type=int, default=224)
        sp.add_argument("--crops-per-image", type=int, default=4)
        sp.add_argument("--checkpoint-every", type=int, default=100)
        sp.add_argument("--sigma", type=float, default=4.0)
        sp.add_argument("--bits", type=int, choices=(32, 64), default=32)
        common(sp)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    training_flags(t, 100)
    t.add_argument("--lambda-c", type=float, default=1.0)
    t.add_argument("--out", required=True, help="checkpoint path (best validation weights)")
    t.add_argument("--log", default=None, help="metrics log path (default: <out>.metrics.jsonl)")
    t.add_argument("--no-residual", action="store_true", help="base network only")
    t.add_argument("--no-uceb", action="store_true", help="residuals without confidence gating")
    t.add_argument("--squared-norm", action="store_true", help="squared norm in the regression loss")
    t.add_argument("--literal-upsample", action="store_true", help="do not divide up-sampled maps by 4")

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--format", choices=("text", "csv", "json", "json-like"), default="text")
    e.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    e.add_argument("--out", default=None, help="write the report here instead of stdout")
    common(e)

    a = sub.add_parser("ablate", help="train and compare the four ablation configurations", formatter_class=fmt)
    training_flags(a, 500)
    a.add_argument("--out", default=None, help="write the comparison table here as well")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full objective", formatter_class=fmt)
    c.add_argument("--preset", choices=("tiny", "full"), default="tiny")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--bits", type=int, choices=(32, 64), default=64)
    c.add_argument("--probes", type=int, default=256)
    c.add_argument("--size", type=int, default=32, help="square input side (multiple of 32)")
    c.add_argument("--lambda-c", type=float, default=1.0)
    c.add_argument("--threshold", type=float, default=None, help="max relative error (default by --bits)")
    common(c)

    # argparse skips help expansion for options without help text
    for sp in [p, *sub.choices.values()]:
        for action in sp._actions:
            if not action.option_strings or action.help == argparse.SUPPRESS:
                continue
            if action.required:
                action.help = f"{action.help} (required)" if action.help else "(required)"
            elif action.help is None:
                action.help = "(default: %(default)s)"
    return p


def _loss_and_model(args, lambda_c, no_residual=False, no_uceb=False, squared=False, literal=False):
    model = ModelConfig.preset(
        args.preset, enable_residual=not no_residual, enable_uceb=not (no_residual or no_uceb),
        preserve_integral_upsample=not literal, precision=args.bits,
    )
    return LossConfig(lambda_c=lambda_c, squared_norm=squared), model


def _train_config(args, loss, model) -> TrainConfig:
    return TrainConfig(
        crop_size=args.crop_size, crops_per_image=args.crops_per_image, lr=args.lr, steps=args.steps,
        batch_size=args.batch_size, seed=args.seed, loss=loss, model=model,
        checkpoint_every=args.checkpoint_every, sigma=args.sigma,
    )


def _validate(args):
    cmd = args.command
    if getattr(args, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    if cmd == "gen":
        for cat in ("low", "medium", "high", "distractors", "weather"):
            if getattr(args, cat) < 0:
                raise UsageError(f"--{cat} must be >= 0")
        if args.size <= 0 or args.size % 32:
            raise UsageError("--size must be a positive multiple of 32")
        if not 0 <= args.test_fraction < 1:
            raise UsageError("--test-fraction must be in [0, 1)")
    elif cmd == "rasterize":
        _existing_file("--dataset", args.dataset)
        if args.sigma <= 0:
            raise UsageError("--sigma must be positive")
    elif cmd in ("train", "ablate"):
        _existing_file("--dataset", args.dataset)
        _existing_dir("--images", args.images)
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        if args.crop_size <= 0 or args.crop_size % 32:
            raise UsageError("--crop-size must be a positive multiple of 32")
        if args.lr <= 0:
            raise UsageError("--lr must be positive")
        if cmd == "train":
            if args.lambda_c < 0:
                raise UsageError("--lambda-c must be >= 0")
            if args.no_residual and args.lambda_c > 0:
                raise UsageError("--no-residual has no confidence maps; it requires --lambda-c 0")
            if args.no_uceb and args.lambda_c > 0:
                raise UsageError("--no-uceb has no confidence maps; it requires --lambda-c 0")
    elif cmd == "eval":
        _existing_file("--ckpt", args.ckpt)
        _existing_file("--dataset", args.dataset)
        _existing_dir("--images", args.images)
    elif cmd == "gradcheck":
        if args.size <= 0 or args.size % 32:
            raise UsageError("--size must be a positive multiple of 32")
        if args.probes < 1:
            raise UsageError("--probes must be >= 1")


def _cmd_gen(args, out):
    counts = {"Low": args.low, "Medium": args.medium, "High": args.high,
              "Distractors": args.distractors, "Weather": args.weather}
    recs = generate_corpus(counts, args.out, seed=args.seed, size=(args.size, args.size),
                           test_fraction=args.test_fraction)
    out.write(f"wrote {len(recs)} images to {args.out}\n")


def _cmd_rasterize(args, out):
    recs = {r.id: r for r in parse_dataset(args.dataset)}
    if args.image not in recs:
        raise UsageError(f"--image: no record with id {args.image!r} in {args.dataset}")
    rec = recs[args.image]
    dmap = rasterize(rec.points(), (rec.width, rec.height), GaussianSpec(args.sigma))
    write_dmap(dmap, args.out)
    if args.pgm:
        write_pgm(dmap, args.pgm)
    out.write(f"{rec.id}: {rec.count} heads, density sum {dmap.count():.6f} -> {args.out}\n")


def _cmd_train(args, out):
    loss, model = _loss_and_model(args, args.lambda_c, args.no_residual, args.no_uceb,
                                  args.squared_norm, args.literal_upsample)
    cfg = _train_config(args, loss, model)
    records = parse_dataset(args.dataset)
    corpus = load_corpus([r for r in records if r.split is not Split.TEST], args.images)
    result = train(corpus, cfg)
    save_checkpoint(result.best_state, args.out, cfg.steps, cfg.digest())
    save_checkpoint(result.state, f"{args.out}.last", cfg.steps, cfg.digest())
    log_path = args.log or f"{args.out}.metrics.jsonl"
    result.write_log(log_path)
    final = result.log_rows[-1] if result.log_rows else None
    msg = f"trained {cfg.steps} steps -> {args.out} (log {log_path})"
    if final:
        msg += f"; last L_f {final['l_f']:.4f}, best val MAE {result.best_val_mae}"
    out.write(msg + "\n")


def _cmd_eval(args, out):
    state, _ = read_checkpoint(args.ckpt)
    records = parse_dataset(args.dataset)
    if args.split != "all":
        records = [r for r in records if r.split.value == args.split]
    report = evaluate(state, records, image_loader(args.images))
    text = emit_report(report, args.format, label=Path(args.ckpt).name)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    out.write(text)
    return 0 if report.complete else 2


def _cmd_ablate(args, out):
    loss, model = _loss_and_model(args, 1.0)
    cfg = _train_config(args, loss, model)
    records = parse_dataset(args.dataset)
    corpus = load_corpus(records, args.images)
    rows = ablation_suite(corpus, cfg)
    table = ablation_table(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    out.write(table)


def _cmd_gradcheck(args, out):
    report = model_gradcheck(args.preset, seed=args.seed, bits=args.bits, probe_count=args.probes,
                             lambda_c=args.lambda_c, size=args.size)
    threshold = args.threshold if args.threshold is not None else threshold_for(args.bits)
    for name, err in sorted(report.per_param.items()):
        out.write(f"{name:32s} {err:.3e}\n")
    worst = report.worst()
    ok = report.max_rel_err < threshold
    out.write(f"probes {len(report.probes)}  max rel err {report.max_rel_err:.3e}  "
              f"threshold {threshold:.0e}  worst {worst.name}{list(worst.index)}  "
              f"{'PASS' if ok else 'FAIL'}\n")
    return 0 if ok else 2


COMMANDS = {
    "gen": _cmd_gen, "rasterize": _cmd_rasterize, "train": _cmd_train,
    "eval": _cmd_eval, "ablate": _cmd_ablate, "gradcheck": _cmd_gradcheck,
}


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
    except UsageError as exc:
        stderr.write(f"cgdrcn: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            rc = COMMANDS[args.command](args, stdout)
        return rc or 0
    except UsageError as exc:
        stderr.write(f"cgdrcn: error: {exc}\n")
        return 1
    except (CGDRCNError, OSError, ValueError) as exc:
        stderr.write(f"cgdrcn: {type(exc).__name__}: {exc}\n")
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
