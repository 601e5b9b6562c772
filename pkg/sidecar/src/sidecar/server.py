"""Newline-delimited JSON request loop.

Protocol version 1. One request per line, exactly one response per
request, in request order:

    {"id": n, "op": "...", "params": {...}}
    {"id": n, "ok": true, "result": {...}}
    {"id": n, "ok": false, "error": {"code": "...", "message": "..."}}

Malformed JSON yields an error response with id null and the loop keeps
running. Requests are handled serially; clients must not assume
pipelining. Binary image payloads travel base64-encoded in "image_b64";
file-based payloads travel as an "image" path.
"""

from __future__ import annotations

import base64
import io
import json
import socket

import numpy as np
from PIL import Image

from .backend import BackendError, FakeBackend
from .rle import encode as rle_encode

PROTOCOL_VERSION = 1


def _load_image(params: dict) -> np.ndarray:
    if "image_b64" in params:
        try:
            raw = base64.b64decode(params["image_b64"], validate=True)
            with Image.open(io.BytesIO(raw)) as im:
                return np.asarray(im.convert("RGB"))
        except Exception as e:
            raise BackendError("IMG", f"cannot decode inline image: {e}") from e
    if "image" in params:
        try:
            with Image.open(str(params["image"])) as im:
                return np.asarray(im.convert("RGB"))
        except Exception as e:
            raise BackendError("IMG", f"cannot decode image "
                                      f"{params['image']!r}: {e}") from e
    raise BackendError("PARAM", "request carries neither image nor image_b64")


def _mask_result(bitmap: np.ndarray) -> dict:
    height, width = bitmap.shape
    return {"size": [int(height), int(width)], "counts": rle_encode(bitmap)}


def _frame_size(params: dict, image: np.ndarray | None) -> tuple[int, int]:
    if "width" in params and "height" in params:
        return int(params["width"]), int(params["height"])
    if image is not None:
        return image.shape[1], image.shape[0]
    raise BackendError("PARAM", "missing width/height")


class RequestHandler:
    """Dispatches protocol requests to a backend."""

    def __init__(self, backend: FakeBackend):
        self.backend = backend

    def handle_line(self, line: str) -> str:
        try:
            request = json.loads(line)
        except json.JSONDecodeError as e:
            return json.dumps({"id": None, "ok": False,
                               "error": {"code": "BADJSON",
                                         "message": str(e)}})
        request_id = request.get("id") if isinstance(request, dict) else None
        if not isinstance(request, dict) or "op" not in request:
            return json.dumps({"id": request_id, "ok": False,
                               "error": {"code": "BADREQ",
                                         "message": "need id and op"}})
        try:
            result = self._dispatch(request["op"], request.get("params") or {})
            return json.dumps({"id": request_id, "ok": True, "result": result})
        except BackendError as e:
            return json.dumps({"id": request_id, "ok": False,
                               "error": {"code": e.code, "message": str(e)}})
        except Exception as e:  # never kill the loop on a bad request
            return json.dumps({"id": request_id, "ok": False,
                               "error": {"code": "INTERNAL",
                                         "message": f"{type(e).__name__}: {e}"}})

    def _dispatch(self, op: str, params: dict):
        if op == "hello":
            return {"protocol_version": PROTOCOL_VERSION,
                    "dim": self.backend.dim,
                    "capabilities": list(self.backend.capabilities),
                    "deterministic": self.backend.deterministic}
        if op == "segment_frame":
            image = _load_image(params)
            masks = self.backend.segment_frame(image)
            frame_id = int(params.get("frame_id", 0))
            return {"masks": [
                {"frame_id": frame_id, "mask_id": i, **_mask_result(m)}
                for i, m in enumerate(masks)]}
        if op == "refine_mask":
            image = None
            if "image" in params or "image_b64" in params:
                image = _load_image(params)
            width, height = _frame_size(params, image)
            bbox = params.get("bbox")
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise BackendError("PARAM", "bbox must be [x0, y0, x1, y1]")
            mask = self.backend.refine_mask(width, height, bbox, image=image)
            return {"mask": _mask_result(mask)}
        if op == "embed_crop":
            bbox = params.get("bbox")
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise BackendError("PARAM", "bbox must be [x0, y0, x1, y1]")
            vec = self.backend.embed_crop(
                int(params.get("frame_id", 0)), bbox,
                int(params.get("scale_index", 0)))
            return {"embedding": vec}
        if op == "embed_text":
            prompts = params.get("prompts")
            if not isinstance(prompts, list) or not prompts:
                raise BackendError("PARAM", "prompts must be a non-empty list")
            return {"embeddings": self.backend.embed_text(prompts)}
        raise BackendError("OP", f"unknown op {op!r}")


def serve_stdio(handler: RequestHandler, stdin, stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        stdout.write(handler.handle_line(line) + "\n")
        stdout.flush()


def serve_tcp(handler: RequestHandler, host: str, port: int,
              announce=None, max_connections: int | None = None) -> None:
    """Serve connections one at a time (serial handling per connection)."""
    with socket.create_server((host, port)) as server:
        bound = server.getsockname()
        if announce is not None:
            announce(bound[0], bound[1])
        served = 0
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            served += 1
            with conn:
                reader = conn.makefile("r", encoding="utf-8")
                writer = conn.makefile("w", encoding="utf-8")
                serve_stdio(handler, reader, writer)
