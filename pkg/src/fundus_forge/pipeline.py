"""Reconstruction pretraining, segmentation fine-tuning and their shared loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .architectures import build
from .augment import AugmentParams, augment
from .checkpoint import Checkpoint, CheckpointError, adam_from_checkpoint, from_model, save_checkpoint, transfer
from .config import RunConfig
from .data import DataError, SamplePair
from .graph import ModelGraph, init_he_uniform
from .losses import SSIMParams, bce_loss, loss_domain, ssim_loss
from .optim import STOP, AdamState, StopMonitor, adam_step
from .tensor import Tensor, no_grad

PHASES = {"mr": 1, "seg": 2}
HISTORY_FIELDS = ("epoch", "images_presented", "train_loss", "val_loss", "alpha", "decision")


@dataclass
class TrainConfig:
    arch: str = "unet"
    hyper: Dict[str, int] = field(default_factory=dict)
    batch_size: int = 4
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_patience: int = 25
    lr_factor: float = 10.0
    pretrain_stop_epochs: int = 100
    finetune_stop_images: int = 3900
    augment: bool = True
    augment_params: AugmentParams = field(default_factory=AugmentParams)
    ssim: SSIMParams = field(default_factory=SSIMParams)
    erosion_radius: int = 5
    seed: int = 0
    max_epochs: int = 0  # 0 means no cap besides early stopping

    @classmethod
    def from_run(cls, cfg: RunConfig, phase: str, arch: Optional[str] = None) -> "TrainConfig":
        arch = arch or cfg["model.arch"]
        return cls(
            arch=arch,
            hyper=cfg.model_hyper(arch),
            batch_size=cfg["train.batch_size"],
            alpha=cfg["adam.alpha"],
            beta1=cfg["adam.beta1"],
            beta2=cfg["adam.beta2"],
            eps=cfg["adam.eps"],
            lr_patience=cfg["schedule.lr_patience"],
            lr_factor=cfg["schedule.lr_factor"],
            pretrain_stop_epochs=cfg["schedule.pretrain_stop_epochs"],
            finetune_stop_images=cfg["schedule.finetune_stop_images"],
            augment=cfg["train.augment_pretrain" if phase == "mr" else "train.augment_finetune"],
            augment_params=AugmentParams(
                rotation=cfg["augment.rotation"],
                scale=(cfg["augment.scale_min"], cfg["augment.scale_max"]),
                translation=cfg["augment.translation"],
                hflip=cfg["augment.hflip"],
                vflip=cfg["augment.vflip"],
                flip_prob=cfg["augment.flip_prob"],
                brightness=cfg["augment.brightness"],
                contrast=cfg["augment.contrast"],
                hue=cfg["augment.hue"],
            ),
            ssim=SSIMParams(cfg["ssim.sigma"], cfg["ssim.radius"], cfg["ssim.dynamic_range"],
                            cfg["ssim.k1"], cfg["ssim.k2"]),
            erosion_radius=cfg["ssim.erosion_radius"],
            seed=cfg["train.seed"],
            max_epochs=cfg["train.max_epochs"],
        )

    def new_model(self) -> ModelGraph:
        return build(self.arch, **self.hyper)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: List[dict]
    images_presented: int
    stop_reason: str


def stack_images(samples: Sequence[SamplePair]) -> np.ndarray:
    return np.stack([s.retinography for s in samples]).astype(np.float32)


def predict(model: ModelGraph, samples: Sequence[SamplePair], batch_size: int = 4) -> np.ndarray:
    """Eval-mode forward pass over ``samples``; returns (N, 1, H, W) scores."""
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            out.append(model(stack_images(samples[i : i + batch_size]), train=False).data)
    return np.concatenate(out) if out else np.zeros((0, 1, 0, 0), np.float32)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


class _Phase:
    """Per-phase pieces: targets, per-batch loss and the stopping unit."""

    name = ""
    stop_unit = "epochs"

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def check(self, samples: Sequence[SamplePair]) -> None:
        pass

    def loss(self, pred: Tensor, batch: Sequence[SamplePair]) -> Tensor:
        raise NotImplementedError


class _Reconstruction(_Phase):
    name = "mr"

    def _domain(self, s: SamplePair) -> np.ndarray:
        return loss_domain(s.roi_retinography, s.roi_angiography, self.cfg.erosion_radius)

    def check(self, samples):
        for s in samples:
            if not self._domain(s).any():
                raise DataError(f"{s.identifier}: empty loss domain (ROI intersection vanishes after erosion)")

    def loss(self, pred, batch):
        target = Tensor(np.stack([s.angiography for s in batch]), dtype=pred.dtype)
        omega = np.stack([self._domain(s) for s in batch])
        return ssim_loss(pred, target, omega, self.cfg.ssim)


class _Segmentation(_Phase):
    name = "seg"
    stop_unit = "images"

    def check(self, samples):
        missing = [s.identifier for s in samples if not s.labelled]
        if missing:
            raise DataError(f"fine-tuning needs vessel masks; missing for {', '.join(missing[:5])}")

    def loss(self, pred, batch):
        return bce_loss(pred, np.stack([s.vessel_mask for s in batch]).astype(pred.dtype))


def _snapshot(model: ModelGraph):
    params = {k: t.data.copy() for k, t in model.params.items()}
    bn = {k: (s.running_mean.copy(), s.running_var.copy(), s.tracked) for k, s in model.bn_states.items()}
    return params, bn


def _restore_best(ckpt: Checkpoint):
    params = ckpt.group("best")
    tracked = set(filter(None, ckpt.meta.get("best_bn_tracked", "").split(",")))
    means, variances = ckpt.group("best_bn_mean"), ckpt.group("best_bn_var")
    bn = {k: (means[k], variances[k], k in tracked) for k in means}
    return params, bn


def _train(model: ModelGraph, train: Sequence[SamplePair], val: Sequence[SamplePair], cfg: TrainConfig,
           phase: _Phase, resume: Optional[Checkpoint], out_dir, on_epoch: Optional[Callable]) -> TrainResult:
    if not train or not val:
        raise DataError(f"need non-empty training and validation sets, got {len(train)} and {len(val)}")
    phase.check(train)
    phase.check(val)
    stop_patience = cfg.pretrain_stop_epochs if phase.stop_unit == "epochs" else cfg.finetune_stop_images
    monitor = StopMonitor(stop_patience, phase.stop_unit, cfg.lr_patience, cfg.lr_factor)
    adam = AdamState(cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps)
    epoch, images, best_images = 0, 0, 0
    best_params, best_bn = _snapshot(model)
    history: List[dict] = []
    if resume is not None:
        meta = resume.meta
        if meta.get("phase") != phase.name:
            raise CheckpointError(f"cannot resume phase {phase.name!r} from a {meta.get('phase')!r} checkpoint")
        transfer(resume, model)
        adam = adam_from_checkpoint(resume)
        epoch, images = int(meta["epochs"]), int(meta["images_presented"])
        best_images = int(meta["best_images"])
        monitor.best = float(meta["best_val_loss"])
        monitor.since_best = int(meta["monitor.since_best"])
        monitor.epochs_since_lr = int(meta["monitor.epochs_since_lr"])
        best_params, best_bn = _restore_best(resume)
    params = model.params
    stop_reason = "max_epochs"
    while not cfg.max_epochs or epoch < cfg.max_epochs:
        rng = np.random.default_rng([cfg.seed, PHASES[phase.name], epoch])
        order = rng.permutation(len(train))
        train_loss, epoch_images = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, cfg.augment_params, rng) for s in batch]
            pred = model(stack_images(batch), train=True)
            loss = phase.loss(pred, batch)
            model.zero_grads()
            loss.backward()
            adam_step(params, adam)
            train_loss += float(loss.item())
            epoch_images += len(batch)
        images += epoch_images
        epoch += 1
        val_loss = _validate(model, val, phase, cfg.batch_size)
        improved = val_loss < monitor.best
        decision = monitor.on_validation(val_loss, epochs=1, images=epoch_images)
        if improved:
            best_params, best_bn = _snapshot(model)
            best_images = images
        history.append({"epoch": epoch, "images_presented": images, "train_loss": train_loss / len(train),
                        "val_loss": val_loss, "alpha": adam.alpha, "decision": decision})
        if on_epoch is not None:
            on_epoch(history[-1])
        if decision == STOP:
            stop_reason = monitor.diagnostic or "patience"
            break
        monitor.apply(decision, adam)
    meta = {
        "phase": phase.name,
        "seed": cfg.seed,
        "epochs": epoch,
        "images_presented": images,
        "best_images": best_images,
        "best_val_loss": monitor.best,
    }
    best = from_model(model, dict(meta), params=best_params, bn=best_bn)
    extra = {f"best:{k}": v for k, v in best_params.items()}
    extra.update({f"best_bn_mean:{k}": v[0] for k, v in best_bn.items()})
    extra.update({f"best_bn_var:{k}": v[1] for k, v in best_bn.items()})
    last_meta = dict(meta, **{
        "monitor.since_best": monitor.since_best,
        "monitor.epochs_since_lr": monitor.epochs_since_lr,
        "best_bn_tracked": ",".join(k for k, v in best_bn.items() if v[2]),
        "stop_reason": stop_reason,
    })
    last = from_model(model, last_meta, adam=adam, extra=extra)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, out / "best.ckpt")
        save_checkpoint(last, out / "last.ckpt")
        write_history(out / "history.csv", history)
    return TrainResult(best, last, history, images, stop_reason)


def _validate(model: ModelGraph, val: Sequence[SamplePair], phase: _Phase, batch_size: int) -> float:
    """Mean per-sample validation loss, reduced in a fixed order."""
    total = 0.0
    with no_grad():
        for i in range(0, len(val), batch_size):
            batch = list(val[i : i + batch_size])
            total += float(phase.loss(model(stack_images(batch), train=False), batch).item())
    return total / len(val)


def pretrain_mr(model: ModelGraph, train: Sequence[SamplePair], val: Sequence[SamplePair], cfg: TrainConfig,
                resume: Optional[Checkpoint] = None, out_dir=None, on_epoch=None) -> TrainResult:
    """Train ``model`` to map retinographies to angiographies under the masked SSIM loss."""
    return _train(model, train, val, cfg, _Reconstruction(cfg), resume, out_dir, on_epoch)


def finetune_seg(init: Union[Checkpoint, str], train: Sequence[SamplePair], val: Sequence[SamplePair],
                 cfg: TrainConfig, resume: Optional[Checkpoint] = None, out_dir=None, on_epoch=None,
                 model: Optional[ModelGraph] = None) -> TrainResult:
    """Vessel segmentation from a pretrained checkpoint or ``"scratch"``.

    Both paths share everything except the initial weights. The optimizer
    always starts fresh.
    """
    model = model or cfg.new_model()
    if isinstance(init, Checkpoint):
        transfer(init, model)
    elif init == "scratch":
        init_he_uniform(model, cfg.seed)
    else:
        raise ValueError(f"init must be a checkpoint or 'scratch', got {init!r}")
    return _train(model, train, val, cfg, _Segmentation(cfg), resume, out_dir, on_epoch)


def split_pretrain_pool(pool: Sequence[SamplePair], n_val: int, seed: int):
    order = np.random.default_rng([seed, 0]).permutation(len(pool))
    return [pool[i] for i in order[n_val:]], [pool[i] for i in order[:n_val]]
