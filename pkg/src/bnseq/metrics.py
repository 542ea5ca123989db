"""Phase-recognition and anticipation metrics.

Phase metrics take per-frame predictions and labels either as lists of
per-video arrays or as concatenated arrays plus per-video lengths.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np


def _split_videos(preds, labels, lengths=None):
    if lengths is None:
        pv = [np.asarray(p) for p in preds]
        lv = [np.asarray(x) for x in labels]
    else:
        bounds = np.cumsum(lengths)[:-1]
        pv = np.split(np.asarray(preds), bounds)
        lv = np.split(np.asarray(labels), bounds)
    if len(pv) != len(lv) or any(p.shape != l.shape for p, l in zip(pv, lv)):
        raise ValueError("predictions and labels disagree in video structure")
    kept = [(p, l) for p, l in zip(pv, lv) if l.size]
    if len(kept) < len(pv):
        warnings.warn(f"{len(pv) - len(kept)} empty video(s) excluded from metrics", stacklevel=3)
    return kept


def video_accuracy(preds, labels, lengths=None, per_video: bool = False):
    """Frame accuracy per video, then the unweighted mean over videos."""
    scores = [float((p == l).mean()) for p, l in _split_videos(preds, labels, lengths)]
    mean = float(np.mean(scores)) if scores else float("nan")
    return (mean, scores) if per_video else mean


def balanced_accuracy(preds, labels, lengths=None, per_video: bool = False):
    """Per video: mean recall over the classes present in that video; then mean over videos."""
    scores = []
    for p, l in _split_videos(preds, labels, lengths):
        recalls = [float((p[l == k] == k).mean()) for k in np.unique(l)]
        scores.append(float(np.mean(recalls)))
    mean = float(np.mean(scores)) if scores else float("nan")
    return (mean, scores) if per_video else mean


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts over all frames."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    return np.bincount(labels * n_classes + preds, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes)


def _flat(x) -> np.ndarray:
    if isinstance(x, (list, tuple)):
        return np.concatenate([np.ravel(v) for v in x]) if x else np.zeros(0, dtype=np.int64)
    return np.ravel(x)


def per_class_f1(preds, labels, n_classes: int) -> np.ndarray:
    cm = confusion_matrix(_flat(preds), _flat(labels), n_classes)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    # undefined precision (never predicted) counts as zero, which makes F1 zero too
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)


def macro_f1(preds, labels, n_classes: int) -> float:
    """Unweighted mean over classes of F1 from one global confusion matrix."""
    return float(per_class_f1(preds, labels, n_classes).mean())


def is_inside_horizon(y, horizon: float) -> np.ndarray:
    """Frames whose target lies inside the horizon; y == 0 (present) counts as inside."""
    return np.asarray(y) < horizon


def anticipation_mae(preds, targets, horizon: float) -> dict:
    """inMAE, outMAE and wMAE per instrument over frames concatenated across videos.

    ``preds`` and ``targets`` are (N, n_instruments) arrays or lists of
    per-video (T, n_instruments) arrays.  If a partition is empty for an
    instrument, its wMAE falls back to the other partition's MAE and the
    instrument is listed under ``"degenerate"``.
    """
    if isinstance(preds, (list, tuple)):
        preds = np.concatenate(preds, axis=0)
        targets = np.concatenate(targets, axis=0)
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.ndim == 1:
        preds, targets = preds[:, None], targets[:, None]
    inside = is_inside_horizon(targets, horizon)
    err = np.abs(preds - targets)
    in_mae, out_mae, w_mae, degenerate = [], [], [], []
    for i in range(preds.shape[1]):
        ins, outs = err[inside[:, i], i], err[~inside[:, i], i]
        a = float(ins.mean()) if ins.size else float("nan")
        b = float(outs.mean()) if outs.size else float("nan")
        if ins.size and outs.size:
            w = (a + b) / 2
        else:
            w = a if ins.size else b
            degenerate.append(i)
        in_mae.append(a)
        out_mae.append(b)
        w_mae.append(w)
    return {
        "inMAE": in_mae, "outMAE": out_mae, "wMAE": w_mae,
        "mean_inMAE": float(np.nanmean(in_mae)) if not np.all(np.isnan(in_mae)) else float("nan"),
        "mean_outMAE": float(np.nanmean(out_mae)) if not np.all(np.isnan(out_mae)) else float("nan"),
        "mean_wMAE": float(np.mean(w_mae)),
        "degenerate": degenerate,
    }


@dataclass
class MetricReport:
    accuracy: float | None = None
    accuracy_per_video: list = field(default_factory=list)
    balanced_accuracy: float | None = None
    balanced_accuracy_per_video: list = field(default_factory=list)
    f1_per_phase: list = field(default_factory=list)
    macro_f1: float | None = None
    inMAE: list = field(default_factory=list)
    outMAE: list = field(default_factory=list)
    wMAE: list = field(default_factory=list)
    mean_inMAE: float | None = None
    mean_outMAE: float | None = None
    mean_wMAE: float | None = None
    degenerate_instruments: list = field(default_factory=list)
    seed: int | None = None
    config_hash: str | None = None

    @classmethod
    def for_phase(cls, preds, labels, n_classes: int, **meta) -> "MetricReport":
        acc, acc_v = video_accuracy(preds, labels, per_video=True)
        bal, bal_v = balanced_accuracy(preds, labels, per_video=True)
        f1 = per_class_f1(preds, labels, n_classes)
        return cls(accuracy=acc, accuracy_per_video=acc_v, balanced_accuracy=bal,
                   balanced_accuracy_per_video=bal_v, f1_per_phase=f1.tolist(),
                   macro_f1=float(f1.mean()), **meta)

    @classmethod
    def for_anticipation(cls, preds, targets, horizon: float, **meta) -> "MetricReport":
        m = anticipation_mae(preds, targets, horizon)
        return cls(inMAE=m["inMAE"], outMAE=m["outMAE"], wMAE=m["wMAE"], mean_inMAE=m["mean_inMAE"],
                   mean_outMAE=m["mean_outMAE"], mean_wMAE=m["mean_wMAE"],
                   degenerate_instruments=m["degenerate"], **meta)

    def scalars(self) -> dict:
        """The headline scalar metrics that are defined for this report."""
        names = ("accuracy", "balanced_accuracy", "macro_f1", "mean_inMAE", "mean_outMAE", "mean_wMAE")
        return {k: getattr(self, k) for k in names if getattr(self, k) is not None}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def to_csv_row(self) -> str:
        row = {"seed": self.seed, "config_hash": self.config_hash, **self.scalars()}
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()
