"""Object-level and pixel-level segmentation metrics: Aggregated Jaccard
Index and binary-foreground Dice, plus dataset-level evaluation.

AJI matching rule (pinned for determinism): ground-truth instances are
visited in increasing id order; each picks the prediction maximizing the
Jaccard index, ties broken by the lowest prediction id, zero-Jaccard best
means no match; a prediction may be picked by several ground truths, and
being picked only exempts it from the unused-area penalty. All comparisons
use exact integer cross-multiplication, so results never depend on float
rounding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetIndex, read_image, read_label_map, validate_label_map


def _check_same_shape(gt: np.ndarray, pred: np.ndarray) -> None:
    validate_label_map(gt)
    validate_label_map(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"label map shapes differ: {gt.shape} vs {pred.shape}")


def _compact(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel positive ids to 1..K preserving numeric order (0 stays 0)."""
    ids = np.unique(labels)
    ids = ids[ids > 0]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int64)
    lut[ids] = np.arange(1, len(ids) + 1)
    return lut[labels], len(ids)


def aji(gt: np.ndarray, pred: np.ndarray) -> float:
    """Aggregated Jaccard Index in [0, 1].

    Conventions: both maps empty -> 1.0; exactly one empty -> 0.0.
    """
    _check_same_shape(gt, pred)
    g, n_gt = _compact(gt)
    p, n_pred = _compact(pred)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    if n_gt == 0 or n_pred == 0:
        return 0.0

    gt_areas = np.bincount(g.ravel(), minlength=n_gt + 1)[1:]
    pred_areas = np.bincount(p.ravel(), minlength=n_pred + 1)[1:]
    both = (g > 0) & (p > 0)
    inter = np.zeros((n_gt, n_pred), dtype=np.int64)
    if both.any():
        pair = (g[both] - 1) * n_pred + (p[both] - 1)
        inter = np.bincount(pair, minlength=n_gt * n_pred).reshape(n_gt, n_pred)

    numerator = 0
    denominator = 0
    used = np.zeros(n_pred, dtype=bool)
    for gi in range(n_gt):
        row = inter[gi]
        best = -1
        for pj in np.flatnonzero(row):
            if best < 0:
                best = pj
                continue
            # J(gi,pj) > J(gi,best) iff inter_j * union_best > inter_best * union_j
            union_j = gt_areas[gi] + pred_areas[pj] - row[pj]
            union_b = gt_areas[gi] + pred_areas[best] - row[best]
            if int(row[pj]) * int(union_b) > int(row[best]) * int(union_j):
                best = pj
        if best < 0:
            denominator += int(gt_areas[gi])
        else:
            numerator += int(row[best])
            denominator += int(gt_areas[gi] + pred_areas[best] - row[best])
            used[best] = True
    denominator += int(pred_areas[~used].sum())
    return numerator / denominator


def dice(gt: np.ndarray, pred: np.ndarray) -> float:
    """Binary-foreground Dice 2|G∩S| / (|G| + |S|); both empty -> 1.0."""
    _check_same_shape(gt, pred)
    g = gt > 0
    s = pred > 0
    total = int(g.sum()) + int(s.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((g & s).sum()) / total


@dataclass
class ImageEval:
    image_id: str
    aji: float
    dice: float


@dataclass
class EvalReport:
    rows: list[ImageEval] = field(default_factory=list)

    @property
    def mean_aji(self) -> float:
        return float(np.mean([r.aji for r in self.rows]))

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.rows]))

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["image_id", "aji", "dice"])
            for r in self.rows:
                writer.writerow([r.image_id, f"{r.aji:.6f}", f"{r.dice:.6f}"])
            writer.writerow(["mean", f"{self.mean_aji:.6f}", f"{self.mean_dice:.6f}"])


def evaluate_dataset(
    model,
    dataset: DatasetIndex,
    post_cfg=None,
    split: str = "test",
    predict_fn=None,
    out_csv: str | Path | None = None,
) -> EvalReport:
    """Predict, postprocess, and score every labeled image of a split.

    ``predict_fn`` (image -> instance label map) overrides the model
    pipeline; useful for baselines and pipeline-identity checks.
    """
    entries = [e for e in dataset.split_entries(split) if e.label_path is not None]
    if not entries:
        raise ValueError(f"split {split!r} has no labeled images")
    if predict_fn is None:
        from .postprocess import PostprocessConfig
        from .segmenter import predict_instances

        cfg = post_cfg or PostprocessConfig()

        def predict_fn(image):
            return predict_instances(model, image, cfg)

    report = EvalReport()
    for entry in entries:
        image = read_image(entry.image_path)
        gt = read_label_map(entry.label_path)
        pred = predict_fn(image)
        report.rows.append(ImageEval(entry.stem, aji(gt, pred), dice(gt, pred)))
    if out_csv is not None:
        report.to_csv(out_csv)
    return report
