"""Pretrained-versus-scratch comparison over architectures, sizes and seeds."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, transfer
from .config import RunConfig
from .data import SamplePair, nested_splits, synth_dataset
from .evaluation import evaluate
from .graph import init_he_uniform
from .pipeline import TrainConfig, finetune_seg, predict, pretrain_mr, split_pretrain_pool
from .plotting import sweep_scatter

logger = logging.getLogger(__name__)

SWEEP_FIELDS = ("arch", "init", "train_size", "seed", "images_presented", "auc_pr", "auc_roc", "status")
MODES = ("MP", "FS")

# dataset seeds are offsets of the master seed so the two pools never coincide
PRETRAIN_POOL_OFFSET = 1
SEG_POOL_OFFSET = 2


@dataclass(frozen=True)
class Cell:
    arch: str
    init: str
    train_size: int
    seed: int

    @property
    def key(self):
        return (self.arch, MODES.index(self.init) if self.init in MODES else 99, self.train_size, self.seed)


def synthetic_pools(cfg: RunConfig, master_seed: int):
    size = (cfg["train.image_size"],) * 2
    pretrain = synth_dataset(master_seed + PRETRAIN_POOL_OFFSET, cfg["data.pretrain_count"], size, prefix="p")
    seg = synth_dataset(master_seed + SEG_POOL_OFFSET, cfg["data.seg_count"], size, prefix="g")
    return pretrain, seg


def pretrain_arch(arch: str, pool: Sequence[SamplePair], cfg: RunConfig, out_dir=None) -> Checkpoint:
    tc = TrainConfig.from_run(cfg, "mr", arch)
    train, val = split_pretrain_pool(pool, cfg["data.pretrain_val"], tc.seed)
    model = tc.new_model()
    init_he_uniform(model, tc.seed)
    return pretrain_mr(model, train, val, tc, out_dir=out_dir).best


def run_cell(cell: Cell, cfg: RunConfig, pool: Sequence[SamplePair], pretrained: Optional[Checkpoint]) -> dict:
    start = time.perf_counter()
    row = {"arch": cell.arch, "init": cell.init, "train_size": cell.train_size, "seed": cell.seed,
           "images_presented": 0, "auc_pr": float("nan"), "auc_roc": float("nan"), "status": "ok"}
    try:
        train, val = nested_splits(pool, [cell.train_size], cell.seed)[cell.train_size]
        tc = TrainConfig.from_run(cfg, "seg", cell.arch)
        tc.seed = cell.seed
        if cell.init == "MP":
            if pretrained is None:
                raise ValueError(f"no pretrained checkpoint for {cell.arch}")
            init = pretrained
        else:
            init = "scratch"
        result = finetune_seg(init, train, val, tc)
        model = tc.new_model()
        transfer(result.best, model)
        report = evaluate(predict(model, val, tc.batch_size), val, cell.arch, result.images_presented)
        row.update(images_presented=result.images_presented, auc_pr=report.auc_pr, auc_roc=report.auc_roc)
        if result.stop_reason not in ("patience", "max_epochs"):
            row["status"] = "failed: " + result.stop_reason
    except Exception as exc:  # recorded, the sweep goes on
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        logger.exception("%s %s size %d seed %d failed", cell.arch, cell.init, cell.train_size, cell.seed)
    logger.info("%s %s size %d seed %d: AUC-PR %.4f after %d images (%s, %.0f s)", cell.arch, cell.init,
                cell.train_size, cell.seed, row["auc_pr"], row["images_presented"], row["status"],
                time.perf_counter() - start)
    return row


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_sweep_csv(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["train_size"], r["seed"], r["images_presented"] = int(r["train_size"]), int(r["seed"]), int(r["images_presented"])
        r["auc_pr"], r["auc_roc"] = float(r["auc_pr"]), float(r["auc_roc"])
    return rows


def run_sweep(cfg: RunConfig, out_dir, master_seed: int = 0, threads: int = 1,
              pretrained: Optional[Dict[str, Checkpoint]] = None, pools=None) -> List[dict]:
    """Fine-tune every (arch, init, size, seed) cell; write ``sweep.csv`` and ``sweep.svg``.

    One pretraining per architecture is shared by all MP cells. Rows come
    back sorted by cell key regardless of completion order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    archs, modes = cfg.list("sweep.archs"), cfg.list("sweep.modes")
    sizes, seeds = cfg.list("sweep.sizes", int), cfg.list("sweep.seeds", int)
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValueError(f"unknown init modes {bad}; use MP and/or FS")
    pretrain_pool, seg_pool = pools or synthetic_pools(cfg, master_seed)
    pretrained = dict(pretrained or {})
    if "MP" in modes:
        for arch in archs:
            if arch not in pretrained:
                ckpt_path = out / f"pretrain_{arch}.ckpt"
                if ckpt_path.exists():
                    pretrained[arch] = load_checkpoint(ckpt_path)
                else:
                    logger.info("pretraining %s", arch)
                    pretrained[arch] = pretrain_arch(arch, pretrain_pool, cfg, out / f"pretrain_{arch}")
                    save_checkpoint(pretrained[arch], ckpt_path)
    cells = sorted((Cell(a, m, s, sd) for a in archs for m in modes for s in sizes for sd in seeds),
                   key=lambda c: c.key)
    args = [(c, cfg, seg_pool, pretrained.get(c.arch) if c.init == "MP" else None) for c in cells]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, *zip(*args)))
    else:
        rows = [run_cell(*a) for a in args]
    write_sweep_csv(rows, out / "sweep.csv")
    sweep_scatter(rows, out / "sweep.svg")
    return rows
