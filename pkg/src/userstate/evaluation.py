"""Per-class F1, row-normalized confusion matrices and k-fold cross-validation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .core_data import CLASS_NAMES, NUM_CLASSES, PairedSet, make_folds

log = logging.getLogger(__name__)

HEADS = ("audio", "face", "fusion")
HEAD_TITLES = {"audio": "Audio only", "face": "Face only", "fusion": "Combined"}


def _pair(predictions, truths):
    p = np.asarray(predictions, dtype=np.int64).reshape(-1)
    t = np.asarray(truths, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} truths")
    if len(p) == 0:
        raise ValueError("need at least one prediction")
    return p, t


def confusion_counts(predictions, truths, num_classes: int = NUM_CLASSES) -> np.ndarray:
    p, t = _pair(predictions, truths)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return counts


def f1_per_class(predictions, truths, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """F1 = 2TP / (2TP + FP + FN) per class; 0 where the denominator is 0."""
    cm = confusion_counts(predictions, truths, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)


def macro_f1(predictions, truths) -> float:
    return float(f1_per_class(predictions, truths).mean())


@dataclass
class ConfusionMatrix:
    matrix: np.ndarray            # row-normalized where support > 0, raw counts otherwise
    counts: np.ndarray
    zero_support: np.ndarray      # boolean per row


def confusion_matrix(predictions, truths, normalize: str = "rows", num_classes: int = NUM_CLASSES) -> ConfusionMatrix:
    if normalize not in ("rows", "none"):
        raise ValueError("normalize must be 'rows' or 'none'")
    counts = confusion_counts(predictions, truths, num_classes)
    return normalize_counts(counts) if normalize == "rows" else ConfusionMatrix(
        counts.astype(np.float64), counts, counts.sum(axis=1) == 0)


def normalize_counts(counts: np.ndarray) -> ConfusionMatrix:
    support = counts.sum(axis=1)
    zero = support == 0
    matrix = counts.astype(np.float64)
    matrix[~zero] /= support[~zero, None]
    return ConfusionMatrix(matrix, counts, zero)


@torch.no_grad()
def predict_heads(bundle, data: PairedSet, batch_size: int = 500) -> dict:
    """Class predictions of the audio, face and fusion heads on paired data (eval mode)."""
    was_training = bundle.training
    bundle.eval()
    out = {h: [] for h in HEADS}
    dtype = torch.get_default_dtype()
    for s in range(0, len(data), batch_size):
        xa = torch.as_tensor(data.audio[s:s + batch_size], dtype=dtype)
        xf = torch.as_tensor(data.face[s:s + batch_size], dtype=dtype)
        fa = bundle.audio.features(xa)
        ff = bundle.face.features(xf)
        out["audio"].append(bundle.audio.fc(fa).argmax(-1).numpy())
        out["face"].append(bundle.face.fc(ff).argmax(-1).numpy())
        fused = bundle.fusion.logits(bundle.fusion_input(fa, ff))
        out["fusion"].append(fused.argmax(-1).numpy())
    bundle.train(was_training)
    return {h: np.concatenate(v) if v else np.zeros(0, dtype=np.int64) for h, v in out.items()}


@dataclass
class HeadSummary:
    f1_mean: np.ndarray
    f1_std: np.ndarray
    confusion: ConfusionMatrix
    per_fold_f1: np.ndarray        # (folds, classes)
    per_fold_counts: np.ndarray    # (folds, classes, classes)

    @property
    def macro_f1(self) -> float:
        return float(self.f1_mean.mean())


@dataclass
class EvalReport:
    heads: dict
    folds: int
    single_fold: bool = False
    failed_fold: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"folds": self.folds, "single_fold": self.single_fold, "failed_fold": self.failed_fold,
             "classes": list(CLASS_NAMES), "meta": self.meta, "heads": {}}
        for h, s in self.heads.items():
            d["heads"][h] = {
                "f1_mean": s.f1_mean.tolist(), "f1_std": s.f1_std.tolist(), "macro_f1": s.macro_f1,
                "confusion": s.confusion.matrix.tolist(),
                "confusion_zero_support": s.confusion.zero_support.tolist(),
                "per_fold_f1": s.per_fold_f1.tolist(), "per_fold_counts": s.per_fold_counts.tolist(),
            }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        heads = {}
        for h, s in d["heads"].items():
            counts = np.asarray(s["per_fold_counts"], dtype=np.int64)
            heads[h] = HeadSummary(np.asarray(s["f1_mean"]), np.asarray(s["f1_std"]),
                                   normalize_counts(counts.sum(axis=0)),
                                   np.asarray(s["per_fold_f1"]), counts)
        return cls(heads, d["folds"], d.get("single_fold", False), d.get("failed_fold"), d.get("meta", {}))


def summarize(per_fold: dict) -> dict:
    """Aggregate {head: [(f1 vector, counts), ...]} into HeadSummaries (sample std)."""
    heads = {}
    for h, folds in per_fold.items():
        f1s = np.stack([f for f, _ in folds])
        counts = np.stack([c for _, c in folds])
        std = f1s.std(axis=0, ddof=1) if len(f1s) > 1 else np.zeros(f1s.shape[1])
        heads[h] = HeadSummary(f1s.mean(axis=0), std, normalize_counts(counts.sum(axis=0)), f1s, counts)
    return heads


def evaluate_bundle(bundle, data: PairedSet) -> dict:
    preds = predict_heads(bundle, data)
    return {h: (f1_per_class(p, data.y), confusion_counts(p, data.y)) for h, p in preds.items()}


class FoldFailure(RuntimeError):
    def __init__(self, fold, partial: EvalReport, cause: str = ""):
        super().__init__(f"fold {fold} failed to train" + (f": {cause}" if cause else ""))
        self.fold = fold
        self.partial = partial


def cross_validate(labeled: PairedSet, trainer: Callable, folds: int = 5, seed: int = 0,
                   stratify: bool = False) -> EvalReport:
    """Train one bundle per fold and report per-class F1 mean and std across folds.

    ``trainer(train_set, val_set, fold)`` returns a trained bundle (already
    restored to its best-validation checkpoint). Predictions for the audio
    and face columns come from their own heads, the combined column from the
    fusion head.
    """
    if folds == 1:
        bundle = trainer(labeled, labeled, 0)
        per_fold = {h: [v] for h, v in evaluate_bundle(bundle, labeled).items()}
        return EvalReport(summarize(per_fold), 1, single_fold=True)
    splits = make_folds(len(labeled), folds, seed, stratify=stratify, labels=labeled.y)
    per_fold = {h: [] for h in HEADS}
    for f, (train_idx, val_idx) in enumerate(splits):
        try:
            bundle = trainer(labeled.take(train_idx), labeled.take(val_idx), f)
        except Exception as exc:
            partial = EvalReport(summarize(per_fold) if per_fold["fusion"] else {}, f, failed_fold=f)
            raise FoldFailure(f, partial, f"{type(exc).__name__}: {exc}") from exc
        for h, v in evaluate_bundle(bundle, labeled.take(val_idx)).items():
            per_fold[h].append(v)
        log.info("fold %d: fusion macro-F1 %.3f", f, per_fold["fusion"][-1][0].mean())
    return EvalReport(summarize(per_fold), folds)


def render_f1_table(report: EvalReport) -> str:
    """Text table: one row per class, one column per head, 'mean ± std' in percent."""
    heads = [h for h in HEADS if h in report.heads]
    header = ["Class"] + [HEAD_TITLES[h] for h in heads]
    rows = []
    for c, name in enumerate(CLASS_NAMES):
        cells = [name.capitalize()]
        for h in heads:
            s = report.heads[h]
            cells.append(f"{100 * s.f1_mean[c]:.1f} ± {100 * s.f1_std[c]:.2f}")
        rows.append(cells)
    rows.append(["Macro"] + [f"{100 * report.heads[h].macro_f1:.1f}" for h in heads])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(cell.ljust(w) for cell, w in zip(r, widths))
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    if report.single_fold:
        lines.append("(single fold: std reported as 0)")
    return "\n".join(lines)


def render_confusion(report: EvalReport, head: str = "fusion") -> str:
    cm = report.heads[head].confusion
    names = [n[:5] for n in CLASS_NAMES]
    lines = [f"{HEAD_TITLES[head]} (rows: true, cols: predicted; row-normalized)",
             "       " + " ".join(f"{n:>6}" for n in names)]
    for i, n in enumerate(names):
        cells = " ".join(f"{v:6.2f}" for v in cm.matrix[i])
        flag = "  (no support)" if cm.zero_support[i] else ""
        lines.append(f"{n:>6} {cells}{flag}")
    return "\n".join(lines)
