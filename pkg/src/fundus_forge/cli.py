"""``fundus-forge`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .architectures import ARCHITECTURES, build
from .checkpoint import CheckpointError, load_checkpoint, transfer
from .config import PROFILES, ConfigError, RunConfig
from .data import DataError, load_dataset, nested_splits, read_pnm, save_dataset, synth_dataset, write_pnm
from .evaluation import evaluate
from .gradcheck import gradient_suite
from .graph import init_he_uniform
from .pipeline import TrainConfig, finetune_seg, predict, pretrain_mr, split_pretrain_pool
from .plotting import curves_figure

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "FUNDUS_FORGE_SEED"


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _master_seed(flag: Optional[int], cfg: Optional[RunConfig] = None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return cfg["train.seed"] if cfg is not None else 0


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.profile) if args.config else RunConfig(profile=args.profile)
    cfg.set("train.seed", _master_seed(args.seed, cfg))
    if getattr(args, "arch", None):
        cfg.set("model.arch", args.arch)
    return cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _check_numeric(result) -> None:
    if result.stop_reason.startswith("non-finite"):
        raise NumericError(result.stop_reason)


def _report(model, samples, out: Path, name: str, images: int) -> float:
    scores = predict(model, samples)
    report = evaluate(scores, samples, name, images)
    report.write_csv(out / "report.csv")
    curves_figure(report, out / "curves.svg")
    return report.auc_pr


def cmd_synth(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    seed = _master_seed(args.seed)
    samples = synth_dataset(seed, args.count, (args.size, args.size), args.pathology)
    try:
        save_dataset(args.out, samples)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {args.out}: {exc.strerror}") from None
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved")
    tc = TrainConfig.from_run(cfg, "mr")
    pool = load_dataset(args.data)
    train, val = split_pretrain_pool(pool, cfg["data.pretrain_val"], tc.seed)
    model = tc.new_model()
    init_he_uniform(model, tc.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = pretrain_mr(model, train, val, tc, resume=resume, out_dir=out)
    _check_numeric(result)
    print(f"pretraining stopped ({result.stop_reason}) after {result.images_presented} images; "
          f"best validation loss {result.best.meta['best_val_loss']}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved")
    tc = TrainConfig.from_run(cfg, "seg")
    pool = load_dataset(args.data)
    split_seed = args.split_seed if args.split_seed is not None else cfg["data.split_seed"]
    train, val = nested_splits(pool, [args.train_size], split_seed)[args.train_size]
    (out / "split.txt").write_text(
        "".join(f"train {s.identifier}\n" for s in train) + "".join(f"val {s.identifier}\n" for s in val),
        encoding="utf-8")
    init = "scratch" if args.init == "scratch" else load_checkpoint(args.init)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = finetune_seg(init, train, val, tc, resume=resume, out_dir=out)
    _check_numeric(result)
    model = tc.new_model()
    transfer(result.best, model)
    auc_pr = _report(model, val, out, f"{tc.arch}-{'FS' if args.init == 'scratch' else 'MP'}", result.images_presented)
    print(f"fine-tuning stopped ({result.stop_reason}) after {result.images_presented} images; "
          f"validation AUC-PR {auc_pr:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args.out)
    samples = load_dataset(args.data)
    missing = [s.identifier for s in samples if not s.labelled]
    if missing:
        raise DataError(f"evaluation data lacks vessel masks for {', '.join(missing[:5])}")
    if args.scores:
        scores = np.stack([read_pnm(Path(args.scores) / f"{s.identifier}_pred.pgm") for s in samples])
        name, images = f"scores:{args.scores}", 0
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt or --scores")
        ckpt = load_checkpoint(args.ckpt)
        model = build(ckpt.arch, **{k: int(v) for k, v in ckpt.hyper().items()})
        transfer(ckpt, model)
        scores = predict(model, samples)
        name, images = ckpt.arch, int(ckpt.meta.get("images_presented", 0))
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite predictions")
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    for s, sc in zip(samples, scores):
        write_pnm(masks / f"{s.identifier}_pred.pgm", sc[0])
    report = evaluate(scores, samples, name, images)
    report.write_csv(out / "report.csv")
    curves_figure(report, out / "curves.svg")
    print(f"pooled AUC-PR {report.auc_pr:.4f}, AUC-ROC {report.auc_roc:.4f} over {len(samples)} images")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .sweep import run_sweep

    cfg = _config(args)
    out = _out_dir(args.out)
    cfg.write(out / "config.resolved")
    rows = run_sweep(cfg, out, master_seed=cfg["train.seed"], threads=args.threads)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} runs, {len(failed)} failed; results in {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradient_suite(_master_seed(args.seed))
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  {'max rel. error':>14}  {'tolerance':>9}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.error:>14.3e}  {r.tolerance:>9.0e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fundus-forge", description="Multimodal pretraining and vessel segmentation experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, arch=False):
        sp.add_argument("--config", help="flat 'section.key = value' file")
        sp.add_argument("--profile", choices=sorted(PROFILES), default="paper")
        sp.add_argument("--seed", type=int, help=f"master seed (overrides ${SEED_ENV})")
        sp.add_argument("--out", required=True)
        if arch:
            sp.add_argument("--arch", choices=ARCHITECTURES)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--pathology", type=float, help="fixed pathology level in [0, 1]; default alternates")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="multimodal reconstruction pretraining")
    common(s, arch=True)
    s.add_argument("--data", required=True)
    s.add_argument("--resume", help="last.ckpt of an interrupted run")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="vessel segmentation fine-tuning")
    common(s, arch=True)
    s.add_argument("--init", required=True, help="checkpoint path or 'scratch'")
    s.add_argument("--data", required=True)
    s.add_argument("--train-size", type=int, required=True)
    s.add_argument("--split-seed", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="PR/ROC evaluation of a checkpoint or of saved score maps")
    s.add_argument("--ckpt")
    s.add_argument("--scores", help="directory of <id>_pred.pgm score maps instead of a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="pretrained versus scratch sweep")
    common(s)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and loss")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
