"""Batch precompute: segment a directory of frames into the engine's
masks-file format and embed a class-name list into an EMB1 file."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .backend import FakeBackend
from .rle import record

EMBEDDING_MAGIC = b"EMB1"


def write_embeddings(path, vectors) -> None:
    arr = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64),
                               dtype="<f4")
    with open(str(path), "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def discover_frames(frames_dir) -> list[tuple[int, Path]]:
    """Image files named <frame_id>.<ext>; ids must be integers."""
    root = Path(frames_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    out = []
    for path in sorted(root.iterdir()):
        if path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        try:
            frame_id = int(path.stem)
        except ValueError as e:
            raise ValueError(
                f"{path.name}: frame files must be named <frame_id>.<ext>"
            ) from e
        out.append((frame_id, path))
    if not out:
        raise FileNotFoundError(f"{root}: no frame images found")
    return out


def precompute(frames_dir, out_masks, vocab_path, out_embeddings,
               backend: FakeBackend,
               prompt_template: str = "a photo of {}") -> dict:
    frames = discover_frames(frames_dir)
    records = []
    for frame_id, path in frames:
        with Image.open(path) as im:
            image = np.asarray(im.convert("RGB"))
        for mask_id, bitmap in enumerate(backend.segment_frame(image)):
            records.append(record(bitmap, frame_id, mask_id))
    Path(out_masks).write_text(
        json.dumps(records, sort_keys=True, indent=1) + "\n",
        encoding="utf-8")

    classes = [line.strip() for line in
               Path(vocab_path).read_text(encoding="utf-8").splitlines()
               if line.strip()]
    if not classes:
        raise ValueError(f"{vocab_path}: no class names")
    prompts = [prompt_template.format(c) for c in classes]
    write_embeddings(out_embeddings, backend.embed_text(prompts))
    return {"frames": len(frames), "masks": len(records),
            "classes": len(classes)}
