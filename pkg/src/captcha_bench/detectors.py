"""Detector backends behind one small interface.

Two implementations live here: a ground-truth oracle with configurable
noise (drops, jitter, spurious boxes, a downscale-visibility model) used
for simulation and tests, and a client for external detector processes
speaking newline-delimited JSON over stdin/stdout.

Wire protocol, one JSON document per line, UTF-8, LF:

  harness -> adapter   {"type": "hello", "version": 1}
  adapter -> harness   {"type": "ready", "classes": ["text", "puzzle", "image", "button"]}
  harness -> adapter   {"type": "detect", "id": ..., "image_path": ...,
                        "slice": {"ax": ..., "ay": ..., "w": ..., "h": ...} | null}
  adapter -> harness   {"type": "result", "id": ..., "detections":
                        [{"cls": ..., "conf": ..., "x1": ..., "y1": ..., "x2": ..., "y2": ...}],
                        "inference_ms": ...}
  adapter -> harness   {"type": "error", "id": ..., "message": ...}
"""

from __future__ import annotations

import json
import logging
import queue
import subprocess
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import CLASS_NAMES, ClassId, Detection, GroundTruth, ImageMeta, PixelBox
from .errors import (
    ConfigError,
    DataError,
    DetectorError,
    DetectorTimeoutError,
    DetectorUnavailableError,
    ProtocolError,
)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


@dataclass(frozen=True)
class DetectorRequest:
    """One detection call: a whole image or one slice of it.

    slice_origin/slice_size are set together when the request covers a
    slice; image_size carries the full frame so replies can be validated
    either way.
    """

    image_id: str
    image_path: str
    slice_origin: tuple[int, int] | None = None
    slice_size: tuple[int, int] | None = None
    image_size: tuple[int, int] | None = None

    @property
    def window(self) -> tuple[int, int, int, int] | None:
        """(ax, ay, w, h) of the requested region, if dimensions are known."""
        if self.slice_origin is not None and self.slice_size is not None:
            return (*self.slice_origin, *self.slice_size)
        if self.image_size is not None:
            return (0, 0, *self.image_size)
        return None


@dataclass(frozen=True)
class DetectorResponse:
    """Detections in request-local pixel coordinates plus self-timed ms."""

    image_id: str
    detections: tuple[Detection, ...]
    inference_ms: float


class Detector(Protocol):
    def detect(self, request: DetectorRequest) -> DetectorResponse: ...

    def close(self) -> None: ...


@dataclass(frozen=True)
class OracleNoise:
    """Corruption model applied to ground truth by the oracle detector.

    min_visible_px drives the downscale model: an object whose smaller
    side, after the full input is conceptually resized to the detector
    input size, falls below this many pixels is dropped with probability
    downscale_drop. Confidences are drawn uniformly from [conf_lo, conf_hi].
    """

    jitter_px: float = 0.0
    drop_rate: float = 0.0
    fp_rate: float = 0.0
    min_visible_px: float = 0.0
    downscale_drop: float = 0.0
    conf_lo: float = 0.99
    conf_hi: float = 0.99

    def __post_init__(self):
        for name in ("drop_rate", "downscale_drop"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.jitter_px < 0 or self.fp_rate < 0 or self.min_visible_px < 0:
            raise ConfigError("noise magnitudes must be non-negative")
        if not 0.0 <= self.conf_lo <= self.conf_hi <= 1.0:
            raise ConfigError(
                f"need 0 <= conf_lo <= conf_hi <= 1, got ({self.conf_lo}, {self.conf_hi})"
            )

    @classmethod
    def zero(cls) -> "OracleNoise":
        return cls()


# Spurious boxes drawn by the oracle get a side in this pixel range.
FP_SIDE_RANGE = (20.0, 200.0)


class OracleDetector:
    """Simulated detector that perturbs known ground truth.

    Randomness is derived per (image, slice) from the run seed, so results
    do not depend on scheduling or worker count. A ground truth is
    reported only when its box lies fully inside the requested window.
    """

    def __init__(
        self,
        truth: Mapping[str, tuple[ImageMeta, Sequence[GroundTruth]]],
        noise: OracleNoise = OracleNoise.zero(),
        input_size: int = 640,
        seed: int = 0,
    ):
        if input_size < 1:
            raise ConfigError(f"input_size must be >= 1, got {input_size}")
        self._truth = truth
        self.noise = noise
        self.input_size = input_size
        self.seed = seed

    def _rng(self, image_id: str, ax: int, ay: int) -> np.random.Generator:
        key = zlib.crc32(image_id.encode("utf-8"))
        return np.random.default_rng(
            np.random.SeedSequence(entropy=(self.seed & 0xFFFFFFFFFFFFFFFF, key, ax, ay))
        )

    def detect(self, request: DetectorRequest) -> DetectorResponse:
        t0 = time.perf_counter()
        try:
            meta, gts = self._truth[request.image_id]
        except KeyError:
            raise DataError(f"oracle has no ground truth for {request.image_id!r}") from None
        if request.slice_origin is not None:
            ax, ay = request.slice_origin
            w, h = request.slice_size
        else:
            ax = ay = 0
            w, h = meta.width, meta.height

        rng = self._rng(request.image_id, ax, ay)
        noise = self.noise
        scale = self.input_size / max(w, h)
        dets: list[Detection] = []
        for gt in gts:
            b = gt.box
            if b.x1 < ax or b.y1 < ay or b.x2 > ax + w or b.y2 > ay + h:
                continue
            if noise.drop_rate > 0 and rng.uniform() < noise.drop_rate:
                continue
            if noise.downscale_drop > 0:
                rendered = min(b.width, b.height) * scale
                if rendered < noise.min_visible_px and rng.uniform() < noise.downscale_drop:
                    continue
            local = b.translate(-ax, -ay)
            if noise.jitter_px > 0:
                d = rng.uniform(-noise.jitter_px, noise.jitter_px, size=4)
                x1 = min(max(local.x1 + d[0], 0.0), w)
                y1 = min(max(local.y1 + d[1], 0.0), h)
                x2 = min(max(local.x2 + d[2], 0.0), w)
                y2 = min(max(local.y2 + d[3], 0.0), h)
                if x2 - x1 > 0.5 and y2 - y1 > 0.5:
                    local = PixelBox(x1, y1, x2, y2)
            conf = float(rng.uniform(noise.conf_lo, noise.conf_hi))
            dets.append(Detection(request.image_id, gt.cls, local, conf))

        if noise.fp_rate > 0:
            for _ in range(int(rng.poisson(noise.fp_rate))):
                side_lo, side_hi = FP_SIDE_RANGE
                fw = min(float(rng.uniform(side_lo, side_hi)), w)
                fh = min(float(rng.uniform(side_lo, side_hi)), h)
                fw, fh = max(fw, 1.0), max(fh, 1.0)
                fx = float(rng.uniform(0, w - fw)) if w > fw else 0.0
                fy = float(rng.uniform(0, h - fh)) if h > fh else 0.0
                cls = ClassId(int(rng.integers(0, 4)))
                conf = float(rng.uniform(noise.conf_lo, noise.conf_hi))
                dets.append(
                    Detection(request.image_id, cls, PixelBox(fx, fy, fx + fw, fy + fh), conf)
                )

        ms = max((time.perf_counter() - t0) * 1000.0, 1e-6)
        return DetectorResponse(request.image_id, tuple(dets), ms)

    def close(self) -> None:
        pass


def _validate_result_payload(
    payload: dict, request: DetectorRequest
) -> DetectorResponse:
    """Strict schema check of a result message; raises ProtocolError."""
    if payload.get("id") != request.image_id:
        raise ProtocolError(
            f"response id {payload.get('id')!r} does not echo request {request.image_id!r}"
        )
    if not isinstance(payload.get("detections"), list):
        raise ProtocolError("result message lacks a detections list")
    ms = payload.get("inference_ms")
    if not isinstance(ms, (int, float)) or ms < 0:
        raise ProtocolError(f"inference_ms must be a non-negative number, got {ms!r}")

    window = request.window
    dets: list[Detection] = []
    for entry in payload["detections"]:
        if not isinstance(entry, dict) or set(entry) != {"cls", "conf", "x1", "y1", "x2", "y2"}:
            raise ProtocolError(f"malformed detection entry {entry!r}")
        name = entry["cls"]
        if name not in CLASS_NAMES:
            raise ProtocolError(f"unknown class name {name!r} in detection")
        conf = entry["conf"]
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise ProtocolError(f"confidence {conf!r} outside [0, 1]")
        coords = [entry[k] for k in ("x1", "y1", "x2", "y2")]
        if any(not isinstance(c, (int, float)) for c in coords):
            raise ProtocolError(f"non-numeric box coordinate in {entry!r}")
        try:
            box = PixelBox(*[float(c) for c in coords])
        except DataError as exc:
            raise ProtocolError(f"invalid box in {entry!r}: {exc}") from None
        if window is not None:
            _, _, w, h = window
            if box.x2 > w + 1e-6 or box.y2 > h + 1e-6:
                raise ProtocolError(
                    f"box {box.as_tuple()} exceeds the {w}x{h} request window"
                )
        dets.append(Detection(request.image_id, ClassId.from_name(name), box, float(conf)))
    return DetectorResponse(request.image_id, tuple(dets), float(ms))


class _LineReader:
    """Background thread pumping one process stream into a queue."""

    _EOF = object()

    def __init__(self, stream):
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(stream,), daemon=True)
        self._thread.start()

    def _pump(self, stream):
        for line in stream:
            self._q.put(line)
        self._q.put(self._EOF)

    def read(self, timeout: float) -> str:
        try:
            item = self._q.get(timeout=timeout)
        except queue.Empty:
            raise DetectorTimeoutError(f"no reply within {timeout} s") from None
        if item is self._EOF:
            raise DetectorUnavailableError("detector process closed its stdout")
        return item


class ExternalProcessDetector:
    """Client for a detector adapter running as a child process.

    Each instance owns exactly one child and keeps one request in flight.
    On failure (process exit, timeout, schema violation) the child is
    restarted and the request retried once before the error propagates.
    """

    def __init__(
        self,
        command: Sequence[str],
        timeout_s: float = 30.0,
        cwd: str | None = None,
    ):
        if not command:
            raise ConfigError("external detector needs a non-empty command")
        if timeout_s <= 0:
            raise ConfigError(f"timeout must be positive, got {timeout_s}")
        self.command = tuple(command)
        self.timeout_s = timeout_s
        self.cwd = cwd
        self._proc: subprocess.Popen | None = None
        self._reader: _LineReader | None = None
        self._stderr_thread: threading.Thread | None = None

    # -- process management -------------------------------------------------

    def start(self) -> None:
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
                cwd=self.cwd,
            )
        except OSError as exc:
            raise DetectorUnavailableError(f"cannot start {self.command[0]}: {exc}") from exc
        self._reader = _LineReader(self._proc.stdout)
        self._stderr_thread = threading.Thread(
            target=self._drain_stderr, args=(self._proc.stderr,), daemon=True
        )
        self._stderr_thread.start()
        self._send({"type": "hello", "version": PROTOCOL_VERSION})
        ready = self._recv()
        if ready.get("type") != "ready":
            raise ProtocolError(f"expected a ready message, got {ready!r}")
        classes = ready.get("classes")
        if not isinstance(classes, list) or set(classes) != set(CLASS_NAMES):
            raise ProtocolError(f"adapter advertises classes {classes!r}")

    @staticmethod
    def _drain_stderr(stream) -> None:
        for line in stream:
            log.debug("adapter stderr: %s", line.rstrip())

    def close(self) -> None:
        if self._proc is None:
            return
        proc, self._proc, self._reader = self._proc, None, None
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.terminate()
            proc.wait(timeout=5)
        except Exception:
            proc.kill()

    # -- wire ----------------------------------------------------------------

    def _send(self, payload: dict) -> None:
        if self._proc is None or self._proc.stdin is None or self._proc.poll() is not None:
            raise DetectorUnavailableError("detector process is not running")
        try:
            self._proc.stdin.write(json.dumps(payload) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise DetectorUnavailableError(f"detector stdin closed: {exc}") from exc

    def _recv(self) -> dict:
        line = self._reader.read(self.timeout_s)
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"reply is not JSON: {line!r}") from exc
        if not isinstance(doc, dict):
            raise ProtocolError(f"reply is not a JSON object: {doc!r}")
        return doc

    # -- interface -----------------------------------------------------------

    def detect(self, request: DetectorRequest) -> DetectorResponse:
        if not Path(request.image_path).exists():
            raise DataError(f"image path {request.image_path} does not exist")
        try:
            return self._round_trip(request)
        except DetectorError as first:
            log.warning("detector failed (%s); restarting once", first)
            self.close()
            return self._round_trip(request)

    def _round_trip(self, request: DetectorRequest) -> DetectorResponse:
        if self._proc is None:
            self.start()
        slice_doc = None
        if request.slice_origin is not None and request.slice_size is not None:
            slice_doc = {
                "ax": request.slice_origin[0],
                "ay": request.slice_origin[1],
                "w": request.slice_size[0],
                "h": request.slice_size[1],
            }
        self._send(
            {
                "type": "detect",
                "id": request.image_id,
                "image_path": request.image_path,
                "slice": slice_doc,
            }
        )
        reply = self._recv()
        kind = reply.get("type")
        if kind == "error":
            raise DetectorError(f"adapter error: {reply.get('message')!r}")
        if kind != "result":
            raise ProtocolError(f"expected a result message, got {reply!r}")
        return _validate_result_payload(reply, request)
