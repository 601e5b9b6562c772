"""Score detections against ground truth: open-vocabulary mAP and the
class-agnostic binary precision/recall protocol.

The micro-case below is small enough to follow by hand: two ground-truth
boxes and three ranked predictions that land as TP, FP, TP. All-points
interpolation gives AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
"""

from masklift.evaluation import (GroundTruthSet, evaluate_map,
                                 evaluate_pr_binary)
from masklift.geometry import Box3D, Detection


def box(x):
    return Box3D(center=(x, 0.0, 0.0), size=(1.0, 1.0, 1.0))


gts = {"demo-scene": GroundTruthSet(boxes=((box(0.0), 0), (box(10.0), 0)))}
preds = {"demo-scene": [
    Detection(box=box(0.0), label="chair", score=0.9),   # TP
    Detection(box=box(5.0), label="chair", score=0.8),   # FP (hits nothing)
    Detection(box=box(10.0), label="chair", score=0.7),  # TP
]}

report = evaluate_map(preds, gts, classes=["chair"],
                      iou_thresholds=[0.25, 0.5])
print(report.to_table())
print(f"\nhand-derived AP for the TP/FP/TP ranking: 5/6 = {5 / 6:.6f}")

print("\nbinary protocol (class-agnostic, confidence-thresholded):")
for conf in (0.0, 0.75, 0.95):
    precision, recall = evaluate_pr_binary(preds, gts, iou_threshold=0.25,
                                           conf_threshold=conf)
    kept = sum(1 for d in preds["demo-scene"] if d.score >= conf)
    print(f"  conf >= {conf:.2f}: {kept} predictions kept -> "
          f"precision {precision:.3f}, recall {recall:.3f}")
