"""Detection evaluation: open-vocabulary mAP and class-agnostic binary
precision/recall.

Matching is greedy in confidence order (ties: scene id, then prediction
index), one-to-one against the unmatched ground-truth box of highest IoU
at or above the threshold. AP uses all-points interpolation (the area
under the precision envelope); classes without ground truth are excluded
from the mAP mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3D, Detection, iou3d
from .scene_io import SceneFormatError


@dataclass(frozen=True)
class GroundTruthSet:
    """Ground-truth boxes with class ids for one scene."""

    boxes: tuple[tuple[Box3D, int], ...]

    def __post_init__(self):
        for box, class_id in self.boxes:
            if np.any(box.size <= 0):
                raise ValueError("ground-truth boxes must have positive sizes")
            if class_id < 0:
                raise ValueError("class ids must be non-negative")

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class EvalReport:
    classes: tuple[str, ...]
    iou_thresholds: tuple[float, ...]
    num_gt: dict[str, int]
    per_class_ap: dict[str, dict[float, float]]
    map_per_iou: dict[float, float]
    precision_recall: dict[float, tuple[float, float]] | None = None

    def to_json_dict(self) -> dict:
        doc = {
            "classes": list(self.classes),
            "iou_thresholds": list(self.iou_thresholds),
            "num_gt": dict(self.num_gt),
            "per_class_ap": {
                cls: {f"{iou:g}": ap for iou, ap in by_iou.items()}
                for cls, by_iou in self.per_class_ap.items()
            },
            "map": {f"{iou:g}": v for iou, v in self.map_per_iou.items()},
        }
        if self.precision_recall is not None:
            doc["precision_recall"] = {
                f"{iou:g}": {"precision": p, "recall": r}
                for iou, (p, r) in self.precision_recall.items()
            }
        return doc

    def to_table(self) -> str:
        headers = ["class", "n_gt"] + [f"AP@{iou:g}" for iou in self.iou_thresholds]
        rows = []
        for cls in self.classes:
            if self.num_gt.get(cls, 0) == 0:
                continue
            rows.append([cls, str(self.num_gt[cls])]
                        + [f"{self.per_class_ap[cls][iou]:.4f}"
                           for iou in self.iou_thresholds])
        rows.append(["mAP", ""]
                    + [f"{self.map_per_iou[iou]:.4f}"
                       for iou in self.iou_thresholds])
        widths = [max(len(r[i]) for r in rows + [headers])
                  for i in range(len(headers))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for row in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        return "\n".join(lines)


def _check_scene_ids(preds: Mapping, gts: Mapping) -> None:
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise ValueError(
            "scene id mismatch: "
            f"missing predictions for {missing}, unmatched predictions for {extra}")


def _sorted_predictions(preds: Mapping[str, Sequence[Detection]]):
    entries = []
    for scene_id in preds:
        for index, det in enumerate(preds[scene_id]):
            entries.append((det.score, scene_id, index, det))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    return entries


def _match_greedy(entries, gt_boxes: Mapping[str, list[Box3D]],
                  iou_threshold: float) -> list[bool]:
    """True/false positive flags in ranked order, one-to-one matching."""
    matched: dict[str, list[bool]] = {
        sid: [False] * len(boxes) for sid, boxes in gt_boxes.items()
    }
    flags = []
    for _, scene_id, _, det in entries:
        candidates = gt_boxes.get(scene_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(candidates):
            if matched[scene_id][j]:
                continue
            iou = iou3d(det.box, gt_box)
            if iou >= iou_threshold and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[scene_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _average_precision(flags: Sequence[bool], num_gt: int) -> float:
    if num_gt == 0:
        raise ValueError("average precision needs ground truth")
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def evaluate_map(preds: Mapping[str, Sequence[Detection]],
                 gts: Mapping[str, GroundTruthSet],
                 classes: Sequence[str],
                 iou_thresholds: Sequence[float] = (0.25, 0.5)) -> EvalReport:
    """Per-class AP and mAP at each IoU threshold.

    Predictions whose label is not in ``classes`` cannot match anything
    and are ignored; ground-truth class ids outside the list raise.
    """
    _check_scene_ids(preds, gts)
    classes = tuple(str(c) for c in classes)
    thresholds = tuple(float(t) for t in iou_thresholds)
    class_index = {c: i for i, c in enumerate(classes)}

    gt_by_class: dict[int, dict[str, list[Box3D]]] = {
        i: {} for i in range(len(classes))}
    num_gt = {c: 0 for c in classes}
    for scene_id, gt_set in gts.items():
        for box, class_id in gt_set.boxes:
            if class_id >= len(classes):
                raise ValueError(
                    f"unknown class id {class_id} in scene {scene_id!r}")
            gt_by_class[class_id].setdefault(scene_id, []).append(box)
            num_gt[classes[class_id]] += 1

    preds_by_class: dict[int, dict[str, list[Detection]]] = {
        i: {sid: [] for sid in preds} for i in range(len(classes))}
    for scene_id, dets in preds.items():
        for det in dets:
            idx = class_index.get(det.label)
            if idx is not None:
                preds_by_class[idx][scene_id].append(det)

    per_class_ap: dict[str, dict[float, float]] = {c: {} for c in classes}
    map_per_iou: dict[float, float] = {}
    for threshold in thresholds:
        aps = []
        for i, cls in enumerate(classes):
            if num_gt[cls] == 0:
                per_class_ap[cls][threshold] = 0.0
                continue
            entries = _sorted_predictions(preds_by_class[i])
            flags = _match_greedy(entries, gt_by_class[i], threshold)
            ap = _average_precision(flags, num_gt[cls])
            per_class_ap[cls][threshold] = ap
            aps.append(ap)
        map_per_iou[threshold] = float(np.mean(aps)) if aps else 0.0
    return EvalReport(classes=classes, iou_thresholds=thresholds,
                      num_gt=num_gt, per_class_ap=per_class_ap,
                      map_per_iou=map_per_iou)


def evaluate_pr_binary(preds: Mapping[str, Sequence[Detection]],
                       gts: Mapping[str, GroundTruthSet],
                       iou_threshold: float,
                       conf_threshold: float) -> tuple[float, float]:
    """Class-agnostic binary precision/recall.

    Predictions below the confidence threshold are dropped; the rest match
    greedily against ground truth of any class. With zero kept predictions
    the precision is 0 by definition.
    """
    if not (0.0 <= conf_threshold <= 1.0):
        raise ValueError("conf_threshold must lie in [0, 1]")
    _check_scene_ids(preds, gts)
    kept = {
        sid: [d for d in dets if d.score >= conf_threshold]
        for sid, dets in preds.items()
    }
    gt_boxes = {sid: [box for box, _ in gt.boxes] for sid, gt in gts.items()}
    total_gt = sum(len(v) for v in gt_boxes.values())
    entries = _sorted_predictions(kept)
    flags = _match_greedy(entries, gt_boxes, iou_threshold)
    tp = sum(flags)
    n_kept = len(flags)
    precision = tp / n_kept if n_kept else 0.0
    recall = tp / total_gt if total_gt else 0.0
    return float(precision), float(recall)


# ---------------------------------------------------------------------------
# Ground-truth file IO
# ---------------------------------------------------------------------------

def read_ground_truth(path) -> tuple[list[str], dict[str, GroundTruthSet]]:
    """Read the GT file: {"classes": [...], "scenes": {id: [box records]}}.

    Box records mirror the detections schema with a class_id field.
    """
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(path, "ground_truth", "file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SceneFormatError(path, "ground_truth", f"invalid JSON: {e}") from e
    if not isinstance(doc, dict) or "classes" not in doc or "scenes" not in doc:
        raise SceneFormatError(path, "ground_truth",
                               "needs classes and scenes fields")
    classes = [str(c) for c in doc["classes"]]
    gts: dict[str, GroundTruthSet] = {}
    for scene_id, records in doc["scenes"].items():
        boxes = []
        for i, rec in enumerate(records):
            where = f"scenes[{scene_id!r}][{i}]"
            if not all(k in rec for k in ("center", "size", "class_id")):
                raise SceneFormatError(path, where,
                                       "needs center, size, class_id")
            class_id = int(rec["class_id"])
            if class_id >= len(classes):
                raise SceneFormatError(path, where,
                                       f"class id {class_id} out of range")
            boxes.append((Box3D(center=np.array(rec["center"], dtype=np.float64),
                                size=np.array(rec["size"], dtype=np.float64)),
                          class_id))
        gts[str(scene_id)] = GroundTruthSet(boxes=tuple(boxes))
    return classes, gts


def write_ground_truth(classes: Sequence[str],
                       gts: Mapping[str, GroundTruthSet], path) -> None:
    doc = {
        "classes": list(classes),
        "scenes": {
            sid: [
                {"center": [float(v) for v in box.center],
                 "size": [float(v) for v in box.size],
                 "class_id": class_id}
                for box, class_id in gt.boxes
            ]
            for sid, gt in gts.items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")
