"""Command-line interface wiring scenes, detection, labeling, evaluation,
and pseudo-label export into reproducible runs.

Exit codes: 0 success, 2 input error, 3 configuration error, 4 provider
error. Result data goes to stdout and the --out files; diagnostics go to
stderr. Every run with an --out target also writes <out>.meta.json with
the full configuration, seed, input digests, and component versions, so a
run can be reproduced bit-exactly.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate_map, evaluate_pr_binary, read_ground_truth
from .geometry import Detection, box_from_points
from .mask_graph import MergeConfig, run_detection
from .ov_labeler import LabelConfig, label_detections
from .providers import ProviderError, open_provider
from .scene_io import (Scene, SceneFormatError, load_scene, read_boxes,
                       read_detections, read_vocabulary_file, subset_frames,
                       write_boxes, write_detections, write_pseudo_labels)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_PROVIDER = 4

DEFAULT_MAX_FRAMES = 45


class ConfigError(ValueError):
    """Semantically invalid configuration (exit code 3)."""


@dataclass
class RunConfig:
    """Every knob of a run; echoed verbatim into the run metadata."""

    tau_rate: float = 0.9
    merge_schedule: tuple[int, ...] = (1, 2, 3)
    tau_contain: float = 0.8
    contain_radius: float = 0.04
    min_points: int = 50
    min_mask_pixels: int = 100
    min_visible_points: int = 25
    tau_occ: float = 0.10
    k_views: int = 5
    scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    temperature: float = 0.01
    nms_iou: float = 0.5
    point_cap: int = 100_000
    seed: int = 0
    max_frames: int = DEFAULT_MAX_FRAMES
    jobs: int = 1
    provider: str = "fake"
    vocab: str | None = None

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        cfg = cls()
        for name in vars(cfg):
            flag = getattr(args, name, None)
            if flag is not None:
                setattr(cfg, name, flag)
        if cfg.max_frames < 1:
            raise ConfigError("--max-frames must be >= 1")
        if cfg.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if cfg.point_cap < 1:
            raise ConfigError("--point-cap must be >= 1")
        return cfg

    def merge_config(self) -> MergeConfig:
        try:
            return MergeConfig(
                tau_rate=self.tau_rate,
                observer_schedule=tuple(self.merge_schedule),
                tau_contain=self.tau_contain,
                contain_radius=self.contain_radius,
                min_points=self.min_points,
                min_mask_pixels=self.min_mask_pixels,
                min_visible_points=self.min_visible_points,
                tau_occ=self.tau_occ,
                workers=self.jobs,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def label_config(self) -> LabelConfig:
        try:
            return LabelConfig(
                k_views=self.k_views,
                scales=tuple(self.scales),
                temperature=self.temperature,
                tau_occ=self.tau_occ,
                nms_iou=self.nms_iou,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def metadata(self) -> dict:
        doc = {}
        for name, value in vars(self).items():
            doc[name] = list(value) if isinstance(value, tuple) else value
        return doc


def _err(message: str) -> None:
    print(f"masklift: {message}", file=sys.stderr)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _scene_digests(manifest_path: Path) -> dict[str, str]:
    """Digest of the manifest and every file it references."""
    digests = {manifest_path.name: _sha256(manifest_path)}
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    base = manifest_path.parent

    def add(rel: str | None):
        if not isinstance(rel, str):
            return
        p = Path(rel)
        p = p if p.is_absolute() else base / p
        if p.is_file():
            digests[rel] = _sha256(p)

    for frame in doc.get("frames", []):
        if isinstance(frame, dict):
            add(frame.get("depth"))
    add(doc.get("point_cloud"))
    add(doc.get("masks"))
    vocab = doc.get("vocabulary")
    if isinstance(vocab, dict):
        add(vocab.get("embeddings"))
    return digests


def _write_metadata(out_path: Path, command: str, config: RunConfig,
                    inputs: dict[str, str]) -> None:
    doc = {
        "command": command,
        "config": config.metadata(),
        "inputs": inputs,
        "versions": {"masklift": __version__, "numpy": np.__version__},
    }
    meta_path = out_path.with_name(out_path.name + ".meta.json")
    meta_path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                         encoding="utf-8")


def _sample_frames(scene: Scene, max_frames: int) -> Scene:
    """Uniform-stride subsample when the scene has more frames than the
    configured count."""
    n = len(scene.frames)
    if n <= max_frames:
        return scene
    ids = [scene.frames[(i * n) // max_frames].id for i in range(max_frames)]
    return subset_frames(scene, ids)


def _load_scene_for_run(args, cfg: RunConfig) -> Scene:
    scene = load_scene(args.scene, point_cap=cfg.point_cap, seed=cfg.seed)
    return _sample_frames(scene, cfg.max_frames)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _detect_to_file(scene: Scene, cfg: RunConfig, out: Path) -> int:
    instances = run_detection(scene, cfg.merge_config())
    boxes, counts = [], []
    for node in instances:
        box = box_from_points(node.points)
        if box.is_degenerate:
            _err(f"dropping degenerate box for instance {node.node_id}")
            continue
        boxes.append(box)
        counts.append(node.num_points())
    write_boxes(boxes, out, num_points=counts)
    return len(boxes)


def cmd_detect(args) -> int:
    cfg = RunConfig.from_args(args)
    scene = _load_scene_for_run(args, cfg)
    out = Path(args.out)
    count = _detect_to_file(scene, cfg, out)
    _write_metadata(out, "detect", cfg, _scene_digests(Path(args.scene)))
    _emit({"command": "detect", "scene": scene.scene_id, "boxes": count,
           "out": str(out)})
    return EXIT_OK


def _resolve_vocabulary(scene: Scene, cfg: RunConfig):
    if cfg.vocab:
        return read_vocabulary_file(cfg.vocab)
    if scene.vocabulary is not None:
        return scene.vocabulary
    raise ConfigError("no vocabulary: pass --vocab or add one to the manifest")


def _label_to_file(scene: Scene, boxes, cfg: RunConfig, out: Path) -> int:
    vocab = _resolve_vocabulary(scene, cfg)
    provider = open_provider(cfg.provider, dim=vocab.dim)
    try:
        if provider.dim != vocab.dim:
            raise ConfigError(
                f"provider dim {provider.dim} != vocabulary dim {vocab.dim}")
        missing = {"refine_mask", "embed_crop"} - set(provider.capabilities)
        if missing:
            raise ProviderError(
                f"provider lacks capabilities: {sorted(missing)}")
        detections = label_detections(boxes, scene, provider, vocab,
                                      cfg.label_config())
    finally:
        provider.close()
    write_detections(detections, out)
    return len(detections)


def cmd_label(args) -> int:
    cfg = RunConfig.from_args(args)
    scene = _load_scene_for_run(args, cfg)
    boxes = read_boxes(args.boxes)
    out = Path(args.out)
    count = _label_to_file(scene, boxes, cfg, out)
    inputs = _scene_digests(Path(args.scene))
    inputs[str(args.boxes)] = _sha256(Path(args.boxes))
    _write_metadata(out, "label", cfg, inputs)
    _emit({"command": "label", "scene": scene.scene_id, "detections": count,
           "out": str(out)})
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = RunConfig.from_args(args)
    scene = _load_scene_for_run(args, cfg)
    out = Path(args.out)
    boxes_out = Path(args.boxes_out) if args.boxes_out else (
        out.with_name(out.stem + ".boxes.json"))
    n_boxes = _detect_to_file(scene, cfg, boxes_out)
    boxes = read_boxes(boxes_out)
    n_dets = _label_to_file(scene, boxes, cfg, out)
    _write_metadata(out, "pipeline", cfg, _scene_digests(Path(args.scene)))
    _emit({"command": "pipeline", "scene": scene.scene_id, "boxes": n_boxes,
           "detections": n_dets, "boxes_out": str(boxes_out),
           "out": str(out)})
    return EXIT_OK


def _read_predictions(path: Path) -> dict[str, list[Detection]]:
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        files = [f for f in files if not f.name.endswith(".meta.json")]
        if not files:
            raise SceneFormatError(path, "predictions",
                                   "no prediction files found")
        return {f.stem: read_detections(f) for f in files}
    return {path.stem: read_detections(path)}


def cmd_eval(args) -> int:
    classes, gts = read_ground_truth(args.gt)
    preds = _read_predictions(Path(args.preds))
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise SceneFormatError(
            args.preds, "scenes",
            f"scene id mismatch: missing {missing}, unexpected {extra}")
    thresholds = args.iou
    if args.protocol == "map":
        report = evaluate_map(preds, gts, classes, thresholds)
        doc = report.to_json_dict()
        print(report.to_table())
    else:
        if args.conf is None:
            raise ConfigError("--conf is required for the binary protocol")
        doc = {"protocol": "binary", "conf_threshold": args.conf,
               "results": {}}
        lines = ["iou    precision  recall", "-----  ---------  ------"]
        for threshold in thresholds:
            precision, recall = evaluate_pr_binary(preds, gts, threshold,
                                                   args.conf)
            doc["results"][f"{threshold:g}"] = {
                "precision": precision, "recall": recall}
            lines.append(f"{threshold:<5g}  {precision:<9.4f}  {recall:.4f}")
        print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n",
                       encoding="utf-8")
    return EXIT_OK


def _discover_manifests(root: Path) -> list[Path]:
    if root.is_file():
        return [root]
    manifests = sorted(root.glob("*/manifest.json"))
    if (root / "manifest.json").is_file():
        manifests.insert(0, root / "manifest.json")
    manifests += [p for p in sorted(root.glob("*.json"))
                  if p.name != "manifest.json"]
    return manifests


def cmd_export_pseudo(args) -> int:
    cfg = RunConfig.from_args(args)
    root = Path(args.scenes)
    if not root.exists():
        raise SceneFormatError(root, "scenes", "path not found")
    manifests = _discover_manifests(root)
    if not manifests:
        raise SceneFormatError(root, "scenes", "no scene manifests found")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    inputs: dict[str, str] = {}
    for manifest in manifests:
        scene = load_scene(manifest, point_cap=cfg.point_cap, seed=cfg.seed)
        scene = _sample_frames(scene, cfg.max_frames)
        instances = run_detection(scene, cfg.merge_config())
        boxes = []
        for node in instances:
            box = box_from_points(node.points)
            if box.is_degenerate:
                _err(f"{scene.scene_id}: dropping degenerate box "
                     f"{node.node_id}")
                continue
            boxes.append(box)
        target = write_pseudo_labels(boxes, scene.scene_id, out_dir)
        written.append({"scene": scene.scene_id, "boxes": len(boxes),
                        "file": str(target)})
        for key, value in _scene_digests(manifest).items():
            inputs[f"{scene.scene_id}/{key}"] = value
    _write_metadata(out_dir / "run.json", "export-pseudo", cfg, inputs)
    _emit({"command": "export-pseudo", "scenes": written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}") from e


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad int list {text!r}") from e


def _add_detect_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--tau-rate", dest="tau_rate", type=float)
    sub.add_argument("--merge-schedule", dest="merge_schedule", type=_int_list)
    sub.add_argument("--tau-contain", dest="tau_contain", type=float)
    sub.add_argument("--contain-radius", dest="contain_radius", type=float)
    sub.add_argument("--min-points", dest="min_points", type=int)
    sub.add_argument("--min-mask-pixels", dest="min_mask_pixels", type=int)
    sub.add_argument("--min-visible-points", dest="min_visible_points",
                     type=int)
    sub.add_argument("--tau-occ", dest="tau_occ", type=float)
    sub.add_argument("--point-cap", dest="point_cap", type=int)
    sub.add_argument("--seed", dest="seed", type=int)
    sub.add_argument("--max-frames", dest="max_frames", type=int)
    sub.add_argument("--jobs", dest="jobs", type=int)


def _add_label_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--k-views", dest="k_views", type=int)
    sub.add_argument("--scales", dest="scales", type=_float_list)
    sub.add_argument("--temperature", dest="temperature", type=float)
    sub.add_argument("--nms-iou", dest="nms_iou", type=float)
    sub.add_argument("--provider", dest="provider", type=str)
    sub.add_argument("--vocab", dest="vocab", type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masklift",
        description="Training-free multi-view 3D object detection")
    parser.add_argument("--version", action="version",
                        version=f"masklift {__version__}")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    detect = subs.add_parser("detect",
                             help="class-agnostic 3D boxes from a scene")
    detect.add_argument("--scene", required=True)
    detect.add_argument("--out", required=True)
    _add_detect_flags(detect)
    detect.set_defaults(func=cmd_detect)

    label = subs.add_parser("label",
                            help="open-vocabulary labels for existing boxes")
    label.add_argument("--scene", required=True)
    label.add_argument("--boxes", required=True)
    label.add_argument("--out", required=True)
    _add_detect_flags(label)
    _add_label_flags(label)
    label.set_defaults(func=cmd_label)

    pipeline = subs.add_parser("pipeline", help="detect then label")
    pipeline.add_argument("--scene", required=True)
    pipeline.add_argument("--out", required=True)
    pipeline.add_argument("--boxes-out", dest="boxes_out")
    _add_detect_flags(pipeline)
    _add_label_flags(pipeline)
    pipeline.set_defaults(func=cmd_pipeline)

    evaluate = subs.add_parser("eval", help="evaluate predictions")
    evaluate.add_argument("--preds", required=True,
                          help="prediction file or directory of <scene>.json")
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--protocol", choices=("map", "binary"),
                          default="map")
    evaluate.add_argument("--iou", type=_float_list, default=(0.25, 0.5))
    evaluate.add_argument("--conf", type=float,
                          help="confidence threshold (binary protocol)")
    evaluate.add_argument("--out")
    evaluate.set_defaults(func=cmd_eval)

    export = subs.add_parser("export-pseudo",
                             help="pseudo-label boxes for a scene directory")
    export.add_argument("--scenes", required=True)
    export.add_argument("--out", required=True)
    _add_detect_flags(export)
    export.set_defaults(func=cmd_export_pseudo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SceneFormatError as e:
        _err(str(e))
        return EXIT_INPUT
    except FileNotFoundError as e:
        _err(str(e))
        return EXIT_INPUT
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    except ProviderError as e:
        _err(str(e))
        return EXIT_PROVIDER
    except ValueError as e:
        _err(str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
