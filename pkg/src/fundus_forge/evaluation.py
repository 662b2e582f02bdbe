"""Precision-recall and ROC analysis restricted to the region of interest."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import SamplePair

REPORT_FIELDS = ("scope", "identifier", "model", "images_presented", "auc_pr", "auc_roc", "pixels", "positives")


@dataclass
class Curves:
    """Operating points at every distinct score, highest threshold first.

    ``tp``/``fp`` are the confusion counts when predicting positive at
    ``score >= thresholds[i]``.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    positives: int
    negatives: int
    recall: np.ndarray = field(init=False)
    precision: np.ndarray = field(init=False)
    fpr: Optional[np.ndarray] = field(init=False)
    tpr: np.ndarray = field(init=False)

    def __post_init__(self):
        tp, fp = self.tp.astype(np.float64), self.fp.astype(np.float64)
        # anchored: recall 0 at the precision of the strictest threshold
        self.recall = np.concatenate([[0.0], tp / self.positives])
        prec = tp / (tp + fp)
        self.precision = np.concatenate([[prec[0]], prec])
        self.tpr = np.concatenate([[0.0], tp / self.positives])
        self.fpr = np.concatenate([[0.0], fp / self.negatives]) if self.negatives else None

    @property
    def auc_pr(self) -> float:
        return auc(self.recall, self.precision)

    @property
    def auc_roc(self) -> float:
        return auc(self.fpr, self.tpr) if self.fpr is not None else math.nan

    @property
    def pixels(self) -> int:
        return self.positives + self.negatives


def auc(x: Sequence[float], y: Sequence[float]) -> float:
    """Trapezoidal area under a curve whose x values are non-decreasing."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"auc: x and y must be equal-length 1-D sequences, got {x.shape} and {y.shape}")
    if np.any(np.diff(x) < 0):
        raise ValueError("auc: x values are not sorted")
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))


def _flatten(scores, labels, roi):
    s, l = np.asarray(scores), np.asarray(labels)
    r = np.ones(s.shape, bool) if roi is None else np.asarray(roi).astype(bool)
    if s.shape != l.shape or s.shape != r.shape:
        raise ValueError(f"scores {s.shape}, labels {l.shape} and roi {r.shape} must have equal shapes")
    if not np.all((l == 0) | (l == 1)):
        raise ValueError("labels must be binary")
    return s[r].astype(np.float64), l[r].astype(bool)


def pr_roc_curves(scores, labels, roi=None) -> Curves:
    s, y = _flatten(scores, labels, roi)
    positives = int(y.sum())
    if positives == 0:
        raise ValueError("no positive labels inside the ROI: precision-recall is undefined")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # the last index of each run of equal scores closes one operating point
    last = np.flatnonzero(np.diff(s) != 0)
    last = np.append(last, s.size - 1)
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return Curves(s[last], tp, fp, positives, int(s.size - positives))


@dataclass
class EvalReport:
    model: str
    images_presented: int
    pooled: Curves
    per_image: Dict[str, Optional[Curves]]

    @property
    def auc_pr(self) -> float:
        return self.pooled.auc_pr

    @property
    def auc_roc(self) -> float:
        return self.pooled.auc_roc

    def rows(self) -> List[dict]:
        def row(scope, ident, c: Optional[Curves]):
            return {
                "scope": scope, "identifier": ident, "model": self.model, "images_presented": self.images_presented,
                "auc_pr": "" if c is None else repr(c.auc_pr), "auc_roc": "" if c is None else repr(c.auc_roc),
                "pixels": "" if c is None else c.pixels, "positives": 0 if c is None else c.positives,
            }
        return [row("pooled", "all", self.pooled)] + [row("image", k, c) for k, c in self.per_image.items()]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())


def evaluate(scores: np.ndarray, samples: Sequence[SamplePair], model: str = "", images_presented: int = 0) -> EvalReport:
    """Pooled and per-image curves of ``scores`` (N, 1, H, W) against the samples' vessel masks."""
    if len(scores) != len(samples):
        raise ValueError(f"{len(scores)} score maps for {len(samples)} samples")
    unlabelled = [s.identifier for s in samples if not s.labelled]
    if unlabelled:
        raise ValueError(f"evaluation needs vessel masks; missing for {', '.join(unlabelled[:5])}")
    for sc, s in zip(scores, samples):
        if sc.shape != s.vessel_mask.shape:
            raise ValueError(f"{s.identifier}: score map {sc.shape} does not match mask {s.vessel_mask.shape}")
    per_image = {}
    for sc, s in zip(scores, samples):
        try:
            per_image[s.identifier] = pr_roc_curves(sc, s.vessel_mask, s.roi_retinography)
        except ValueError:
            per_image[s.identifier] = None
    pooled = pr_roc_curves(
        np.concatenate([sc[s.roi_retinography] for sc, s in zip(scores, samples)]),
        np.concatenate([s.vessel_mask[s.roi_retinography] for s in samples]),
    )
    return EvalReport(model, images_presented, pooled, per_image)
