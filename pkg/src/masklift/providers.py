"""Embedding providers: the engine-side view of segmentation/embedding
services.

A provider exposes three operations used by the labeling stage:
refine_mask (box prompt -> instance mask), embed_crop (image crop ->
unit-norm vector), and embed_text (prompts -> unit-norm vectors). The fake
provider is model-free and fully deterministic; the wire provider speaks
newline-delimited JSON to an external process over stdio or TCP.

Wire protocol (version 1): each request is one JSON line
``{"id": n, "op": ..., "params": {...}}`` answered by exactly one line
``{"id": n, "ok": true, "result": {...}}`` or
``{"id": n, "ok": false, "error": {"code": ..., "message": ...}}``,
in request order. The "hello" op announces
``{protocol_version, dim, capabilities, deterministic}``.
"""

from __future__ import annotations

import hashlib
import json
import shlex
import socket
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .geometry import bbox2d_from_pixels
from .scene_io import CameraFrame, decode_rle, encode_rle

PROTOCOL_VERSION = 1
CAPABILITIES = frozenset({"refine_mask", "embed_crop", "embed_text"})


class ProviderError(RuntimeError):
    """Any failure while talking to or validating a provider."""


@dataclass(frozen=True)
class RleMask:
    """A provider-returned mask in the shared RLE record format."""

    height: int
    width: int
    counts: tuple[int, ...]

    def decode(self) -> np.ndarray:
        return decode_rle(self.counts, self.height, self.width)

    def bbox(self) -> tuple[int, int, int, int]:
        """Tight bbox of the mask pixels; raises on an empty mask."""
        vs, us = np.nonzero(self.decode())
        if us.size == 0:
            raise ProviderError("provider returned an empty mask")
        return bbox2d_from_pixels(np.stack([us, vs], axis=1))


def _bbox_overlap(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0) + 1
    ih = min(ay1, by1) - max(ay0, by0) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0 + 1) * (ay1 - ay0 + 1)
    area_b = (bx1 - bx0 + 1) * (by1 - by0 + 1)
    return inter / float(area_a + area_b - inter)


class FakeProvider:
    """Deterministic, model-free provider for tests and CI.

    Embeddings are keyed hashes: embed_text hashes the prompt string and
    embed_crop hashes (frame_id, bbox), each expanded into a unit vector
    through a seeded generator. refine_mask returns the filled prompt box.

    ``regions`` optionally maps frame ids to [(bbox, prompt)] pairs; a
    crop whose bbox overlaps a region embeds as that region's prompt text,
    which lets tests wire known per-object semantics end to end.
    """

    def __init__(self, seed: int = 0, dim: int = 64,
                 regions: dict[int, list[tuple[tuple[int, int, int, int], str]]]
                 | None = None):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.seed = int(seed)
        self.dim = int(dim)
        self.regions = regions or {}
        self.capabilities = CAPABILITIES
        self.deterministic = True
        self.call_log: list[tuple] = []

    def _hash_vector(self, *key) -> np.ndarray:
        digest = hashlib.sha256(repr((self.seed,) + key).encode()).digest()
        rng = np.random.Generator(
            np.random.PCG64(int.from_bytes(digest[:8], "little")))
        vec = rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)

    def refine_mask(self, frame: CameraFrame, bbox) -> RleMask:
        x0, y0, x1, y1 = (int(v) for v in bbox)
        self.call_log.append(("refine_mask", frame.id, (x0, y0, x1, y1)))
        if x1 < 0 or y1 < 0 or x0 >= frame.width or y0 >= frame.height:
            raise ProviderError("prompt bbox lies outside the image")
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, frame.width - 1), min(y1, frame.height - 1)
        bitmap = np.zeros((frame.height, frame.width), dtype=bool)
        bitmap[y0:y1 + 1, x0:x1 + 1] = True
        return RleMask(height=frame.height, width=frame.width,
                       counts=tuple(encode_rle(bitmap)))

    def embed_crop(self, frame: CameraFrame, mask: RleMask, bbox,
                   scale_index: int) -> np.ndarray:
        bbox = tuple(int(v) for v in bbox)
        self.call_log.append(("embed_crop", frame.id, bbox, int(scale_index)))
        best_prompt, best_overlap = None, 0.0
        for region_bbox, prompt in self.regions.get(frame.id, ()):
            overlap = _bbox_overlap(bbox, region_bbox)
            if overlap > best_overlap:
                best_prompt, best_overlap = prompt, overlap
        if best_prompt is not None:
            return self._hash_vector("text", best_prompt)
        return self._hash_vector("crop", frame.id, bbox)

    def embed_text(self, prompts) -> np.ndarray:
        prompts = list(prompts)
        if not prompts:
            raise ProviderError("empty prompt list")
        self.call_log.append(("embed_text", tuple(prompts)))
        return np.stack([self._hash_vector("text", p) for p in prompts])

    def close(self) -> None:
        pass


class WireProvider:
    """Client for an external provider speaking the NDJSON protocol."""

    def __init__(self, reader, writer, describe: str, *, owns=None):
        self._reader = reader
        self._writer = writer
        self._describe = describe
        self._owns = owns
        self._next_id = 0
        hello = self._call("hello", {})
        version = hello.get("protocol_version")
        if version != PROTOCOL_VERSION:
            self.close()
            raise ProviderError(
                f"{describe}: protocol version {version!r}, "
                f"engine speaks {PROTOCOL_VERSION}")
        try:
            self.dim = int(hello["dim"])
        except (KeyError, TypeError, ValueError) as e:
            self.close()
            raise ProviderError(f"{describe}: invalid hello: {e}") from e
        self.capabilities = frozenset(hello.get("capabilities", ()))
        self.deterministic = bool(hello.get("deterministic", False))

    @classmethod
    def from_command(cls, argv: list[str]) -> "WireProvider":
        try:
            proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        except OSError as e:
            raise ProviderError(f"cannot start provider {argv!r}: {e}") from e
        return cls(proc.stdout, proc.stdin, f"cmd:{' '.join(argv)}", owns=proc)

    @classmethod
    def from_tcp(cls, host: str, port: int) -> "WireProvider":
        try:
            sock = socket.create_connection((host, port), timeout=30)
        except OSError as e:
            raise ProviderError(f"cannot reach provider {host}:{port}: {e}") from e
        reader = sock.makefile("r", encoding="utf-8")
        writer = sock.makefile("w", encoding="utf-8")
        provider = cls(reader, writer, f"tcp:{host}:{port}", owns=sock)
        return provider

    def _call(self, op: str, params: dict) -> dict:
        self._next_id += 1
        request_id = self._next_id
        line = json.dumps({"id": request_id, "op": op, "params": params},
                          sort_keys=True)
        try:
            self._writer.write(line + "\n")
            self._writer.flush()
            response_line = self._reader.readline()
        except (OSError, ValueError) as e:
            raise ProviderError(f"{self._describe}: transport failure on "
                                f"request {request_id}: {e}") from e
        if not response_line:
            raise ProviderError(f"{self._describe}: connection closed on "
                                f"request {request_id}")
        try:
            response = json.loads(response_line)
        except json.JSONDecodeError as e:
            raise ProviderError(f"{self._describe}: bad response JSON on "
                                f"request {request_id}: {e}") from e
        if response.get("id") != request_id:
            raise ProviderError(
                f"{self._describe}: response id {response.get('id')!r} does "
                f"not echo request {request_id}")
        if not response.get("ok"):
            err = response.get("error") or {}
            raise ProviderError(
                f"{self._describe}: request {request_id} ({op}) failed: "
                f"{err.get('code')}: {err.get('message')}")
        result = response.get("result")
        if not isinstance(result, dict):
            raise ProviderError(f"{self._describe}: request {request_id} "
                                "returned no result object")
        return result

    @staticmethod
    def _frame_params(frame: CameraFrame) -> dict:
        params = {"frame_id": frame.id, "width": frame.width,
                  "height": frame.height}
        if frame.image_path is not None:
            params["image"] = frame.image_path
        return params

    def refine_mask(self, frame: CameraFrame, bbox) -> RleMask:
        params = self._frame_params(frame)
        params["bbox"] = [int(v) for v in bbox]
        result = self._call("refine_mask", params)
        mask = result.get("mask") or {}
        try:
            height, width = mask["size"]
            return RleMask(height=int(height), width=int(width),
                           counts=tuple(int(c) for c in mask["counts"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ProviderError(f"{self._describe}: malformed mask: {e}") from e

    def embed_crop(self, frame: CameraFrame, mask: RleMask, bbox,
                   scale_index: int) -> np.ndarray:
        params = self._frame_params(frame)
        params["bbox"] = [int(v) for v in bbox]
        params["scale_index"] = int(scale_index)
        params["mask"] = {"size": [mask.height, mask.width],
                          "counts": list(mask.counts)}
        result = self._call("embed_crop", params)
        return self._vector(result.get("embedding"))

    def embed_text(self, prompts) -> np.ndarray:
        prompts = list(prompts)
        if not prompts:
            raise ProviderError("empty prompt list")
        result = self._call("embed_text", {"prompts": prompts})
        rows = result.get("embeddings")
        if not isinstance(rows, list) or len(rows) != len(prompts):
            raise ProviderError(f"{self._describe}: expected "
                                f"{len(prompts)} embeddings")
        return np.stack([self._vector(r) for r in rows])

    def _vector(self, values) -> np.ndarray:
        try:
            vec = np.asarray(values, dtype=np.float64).reshape(self.dim)
        except (TypeError, ValueError) as e:
            raise ProviderError(
                f"{self._describe}: embedding is not a {self.dim}-vector"
            ) from e
        if not np.all(np.isfinite(vec)):
            raise ProviderError(f"{self._describe}: non-finite embedding")
        return vec

    def close(self) -> None:
        for stream in (self._writer, self._reader):
            try:
                stream.close()
            except Exception:
                pass
        owns = self._owns
        if isinstance(owns, subprocess.Popen):
            try:
                owns.terminate()
                owns.wait(timeout=5)
            except Exception:
                owns.kill()
        elif owns is not None:
            try:
                owns.close()
            except Exception:
                pass


def open_provider(spec: str, *, dim: int | None = None):
    """Open a provider from its spec string.

    Grammar: ``fake[:seed]`` | ``cmd:<argv>`` | ``tcp:<host>:<port>``.
    ``dim`` sizes the fake provider; wire providers announce their own.
    """
    if spec == "fake" or spec.startswith("fake:"):
        seed = 0
        if spec.startswith("fake:"):
            try:
                seed = int(spec.split(":", 1)[1])
            except ValueError as e:
                raise ProviderError(f"bad fake seed in {spec!r}") from e
        return FakeProvider(seed=seed, dim=dim or 64)
    if spec.startswith("cmd:"):
        argv = shlex.split(spec[len("cmd:"):])
        if not argv:
            raise ProviderError("cmd: provider needs a command line")
        return WireProvider.from_command(argv)
    if spec.startswith("tcp:"):
        rest = spec[len("tcp:"):]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise ProviderError(f"bad tcp provider spec {spec!r}")
        try:
            return WireProvider.from_tcp(host, int(port))
        except ValueError as e:
            raise ProviderError(f"bad tcp port in {spec!r}") from e
    raise ProviderError(f"unknown provider spec {spec!r}")
