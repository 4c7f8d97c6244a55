"""
Segmentation metrics: confusion accumulation and mean Intersection-over-Union,
computed at each image's native resolution.
"""

import json
import sys
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional

import numpy as np
import torch

from errors import ValidationError
from pipeline_io import DEFAULT_IGNORE_INDEX, SegSample

REPORT_SCHEMA_VERSION = 1


def _say(message: str) -> None:
    print(f"[EVALUATION] {message}", file=sys.stderr, flush=True)


class ConfusionMatrix:
    """counts[g][p]: pixels of ground-truth class g predicted as p; ignored pixels never counted"""

    def __init__(self, num_classes: int, ignore_index: int = DEFAULT_IGNORE_INDEX):
        if num_classes < 1:
            raise ValidationError(f"num_classes must be positive, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValidationError(f"cannot merge {other.num_classes}-class counts into {self.num_classes}-class")
        self.counts += other.counts
        return self


def _as_numpy(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask).astype(np.int64)


def accumulate(cm: ConfusionMatrix, pred, label) -> ConfusionMatrix:
    pred, label = _as_numpy(pred), _as_numpy(label)
    if pred.shape != label.shape:
        raise ValidationError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    keep = label != cm.ignore_index
    g, p = label[keep], pred[keep]
    k = cm.num_classes
    if g.size and (g.min() < 0 or g.max() >= k):
        raise ValidationError(f"label values outside [0, {k}) and ignore {cm.ignore_index}")
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValidationError(f"predicted values outside [0, {k})")
    cm.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return cm


class IoUResult(NamedTuple):
    miou: float
    per_class: np.ndarray  # NaN where the class has an empty union


def miou(cm: ConfusionMatrix) -> IoUResult:
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        raise ValidationError("mIoU is undefined: every class has an empty union")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[present] = tp[present] / union[present]
    return IoUResult(float(per_class[present].mean()), per_class)


def _image_confusion(model, sample: SegSample) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.num_classes, model.ignore_index)
    prediction = model.predict(sample.image)
    return accumulate(cm, prediction, sample.label)


def _confusions(model, dataset: Iterable[SegSample], workers: int) -> Iterator[ConfusionMatrix]:
    """Per-image matrices in dataset order; at most 2 * workers samples are in flight"""
    if workers <= 1:
        for sample in dataset:
            yield _image_confusion(model, sample)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for sample in dataset:
            pending.append(pool.submit(_image_confusion, model, sample))
            while len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def evaluate_model(
    model,
    dataset: Iterable[SegSample],
    num_classes: Optional[int] = None,
    seed: Optional[int] = None,
    config: Optional[Dict] = None,
    workers: int = 1,
) -> Dict:
    """
    Stream the dataset through model.predict and report mIoU, per-class IoU and
    pixel counts. Labels are never resized. Per-image matrices may be computed
    on several threads; they are merged by summation.
    """
    if num_classes is not None and num_classes != model.num_classes:
        raise ValidationError(
            f"model predicts {model.num_classes} classes but the dataset declares {num_classes}; refusing to score"
        )
    total = ConfusionMatrix(model.num_classes, model.ignore_index)
    images = 0
    for cm in _confusions(model, dataset, workers):
        total.merge(cm)
        images += 1
    if images == 0:
        raise ValidationError("cannot evaluate on an empty dataset")

    result = miou(total)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "encoder_id": model.backend.id,
        "num_classes": model.num_classes,
        "images": images,
        "miou": result.miou,
        "per_class_iou": [None if np.isnan(v) else float(v) for v in result.per_class],
        "pixel_counts": {
            "counted": total.total,
            "per_class_ground_truth": total.counts.sum(axis=1).tolist(),
            "per_class_predicted": total.counts.sum(axis=0).tolist(),
        },
        "provenance": dict(getattr(model, "provenance", {})),
        "seed": seed,
        "config": config or {},
    }
    _say(f"mIoU {100 * result.miou:.2f} over {images} images")
    return report


def aggregate_reports(reports: List[Dict]) -> Dict:
    """Mean and standard deviation (ddof 1 when there are several runs) of mIoU and per-class IoU"""
    if not reports:
        raise ValidationError("nothing to aggregate")
    classes = {r["num_classes"] for r in reports}
    if len(classes) != 1:
        raise ValidationError(f"reports disagree on the class count: {sorted(classes)}")
    ddof = 1 if len(reports) > 1 else 0
    values = np.array([r["miou"] for r in reports], dtype=np.float64)
    per_class = np.array(
        [[np.nan if v is None else v for v in r["per_class_iou"]] for r in reports], dtype=np.float64
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        class_mean = np.nanmean(per_class, axis=0) if per_class.size else per_class
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "runs": len(reports),
        "seeds": [r.get("seed") for r in reports],
        "miou_mean": float(values.mean()),
        "miou_std": float(values.std(ddof=ddof)),
        "per_class_iou_mean": [None if np.isnan(v) else float(v) for v in class_mean],
    }


def save_report(report: Dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return path
