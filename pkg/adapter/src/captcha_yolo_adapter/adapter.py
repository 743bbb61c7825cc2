"""Protocol loop and model backends.

The adapter owns image loading: requests carry only a filesystem path and
an optional slice window, and replies carry slice-local pixel boxes. Two
backends exist: a real ultralytics YOLO model, and a stub that answers
from YOLO label files next to the dataset (for fixtures and protocol
tests, no model weights needed).

Wire protocol, one JSON document per line, UTF-8, LF:

  in   {"type": "hello", "version": 1}
  out  {"type": "ready", "classes": ["text", "puzzle", "image", "button"]}
  in   {"type": "detect", "id": ..., "image_path": ...,
        "slice": {"ax": ..., "ay": ..., "w": ..., "h": ...} | null}
  out  {"type": "result", "id": ..., "detections": [{"cls", "conf",
        "x1", "y1", "x2", "y2"}], "inference_ms": ...}
  out  {"type": "error", "id": ..., "message": ...}
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

PROTOCOL_VERSION = 1
CLASS_NAMES = ("text", "puzzle", "image", "button")


@dataclass(frozen=True)
class AdapterConfig:
    """Runtime settings, all supplied as command-line flags."""

    weights: str
    input_size: int = 640
    conf_floor: float = 0.25
    device: str = "cpu"
    stub_labels: str | None = None
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.input_size < 1:
            raise ValueError(f"input size must be positive, got {self.input_size}")
        if not 0.0 <= self.conf_floor <= 1.0:
            raise ValueError(f"confidence floor {self.conf_floor} outside [0, 1]")


def parse_class_names(spec: str) -> dict[int, str]:
    """Parse an index->name table like '0=text,1=puzzle,2=image,3=button'."""
    table: dict[int, str] = {}
    for part in spec.split(","):
        idx, _, name = part.partition("=")
        name = name.strip()
        if not name or name not in CLASS_NAMES:
            raise ValueError(f"bad class table entry {part!r}")
        table[int(idx)] = name
    return table


class StubModel:
    """Answers from YOLO label files; used when --weights stub is given.

    Boxes come back denormalized against the actual image size, so a
    request on a known fixture returns its exact annotated rectangles.
    """

    confidence = 0.9

    def __init__(self, cfg: AdapterConfig):
        if not cfg.stub_labels:
            raise ValueError("stub weights need --stub-labels pointing at label files")
        self.labels_dir = Path(cfg.stub_labels)
        if not self.labels_dir.is_dir():
            raise ValueError(f"label directory {self.labels_dir} does not exist")

    def predict(self, image: Image.Image, image_path: Path) -> list[dict]:
        label_path = self.labels_dir / f"{image_path.stem}.txt"
        if not label_path.exists():
            return []
        width, height = image.size
        out = []
        for line in label_path.read_text(encoding="utf-8").splitlines():
            parts = line.split()
            if len(parts) != 5:
                continue
            code = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:])
            out.append({
                "cls": CLASS_NAMES[code],
                "conf": self.confidence,
                "x1": max((cx - w / 2) * width, 0.0),
                "y1": max((cy - h / 2) * height, 0.0),
                "x2": min((cx + w / 2) * width, float(width)),
                "y2": min((cy + h / 2) * height, float(height)),
            })
        return out


class YoloModel:
    """ultralytics-backed model; import is deferred so the stub path works
    on hosts without torch installed."""

    def __init__(self, cfg: AdapterConfig):
        from ultralytics import YOLO

        self.model = YOLO(cfg.weights)
        self.input_size = cfg.input_size
        self.device = cfg.device
        names = dict(getattr(self.model, "names", {}) or {})
        if cfg.class_names:
            names.update(cfg.class_names)
        self.names = {int(k): str(v) for k, v in names.items()}

    def predict(self, image: Image.Image, image_path: Path) -> list[dict]:
        results = self.model.predict(
            image, imgsz=self.input_size, device=self.device, verbose=False
        )
        out = []
        for result in results:
            boxes = result.boxes
            if boxes is None:
                continue
            for xyxy, conf, cls_idx in zip(
                boxes.xyxy.tolist(), boxes.conf.tolist(), boxes.cls.tolist()
            ):
                name = self.names.get(int(cls_idx))
                if name not in CLASS_NAMES:
                    continue  # never advertise classes outside the four
                out.append({
                    "cls": name,
                    "conf": float(conf),
                    "x1": float(xyxy[0]), "y1": float(xyxy[1]),
                    "x2": float(xyxy[2]), "y2": float(xyxy[3]),
                })
        return out


def load_model(cfg: AdapterConfig):
    if cfg.weights == "stub":
        return StubModel(cfg)
    return YoloModel(cfg)


def _send(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc) + "\n")
    sys.stdout.flush()


def _clip_to_window(dets: list[dict], window: dict) -> list[dict]:
    """Keep boxes fully inside the slice window, shifted to local coords."""
    ax, ay = float(window["ax"]), float(window["ay"])
    w, h = float(window["w"]), float(window["h"])
    out = []
    for d in dets:
        if d["x1"] < ax or d["y1"] < ay or d["x2"] > ax + w or d["y2"] > ay + h:
            continue
        out.append({**d, "x1": d["x1"] - ax, "y1": d["y1"] - ay,
                    "x2": d["x2"] - ax, "y2": d["y2"] - ay})
    return out


def serve(cfg: AdapterConfig) -> int:
    """Run the protocol loop until stdin closes. Returns the exit code."""
    hello_line = sys.stdin.readline()
    if not hello_line:
        return 1
    try:
        hello = json.loads(hello_line)
    except json.JSONDecodeError:
        print("adapter: handshake line is not JSON", file=sys.stderr)
        return 1
    if hello.get("type") != "hello" or hello.get("version") != PROTOCOL_VERSION:
        print(f"adapter: unsupported handshake {hello!r}", file=sys.stderr)
        return 1

    try:
        model = load_model(cfg)
    except Exception as exc:  # unloadable weights: fail before ready
        print(f"adapter: cannot load model: {exc}", file=sys.stderr)
        return 1

    _send({"type": "ready", "classes": list(CLASS_NAMES)})

    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError:
            _send({"type": "error", "id": None, "message": "request is not JSON"})
            continue
        rid = req.get("id")
        if req.get("type") != "detect":
            _send({"type": "error", "id": rid,
                   "message": f"unsupported message type {req.get('type')!r}"})
            continue
        try:
            image_path = Path(req["image_path"])
            with Image.open(image_path) as im:
                image = im.convert("RGB")
            window = req.get("slice")
            t0 = time.perf_counter()
            if window is not None:
                crop = image.crop((
                    int(window["ax"]), int(window["ay"]),
                    int(window["ax"]) + int(window["w"]),
                    int(window["ay"]) + int(window["h"]),
                ))
                if isinstance(model, StubModel):
                    # stub labels are full-image; filter + shift instead of
                    # predicting on the crop
                    dets = _clip_to_window(model.predict(image, image_path), window)
                else:
                    dets = model.predict(crop, image_path)
            else:
                dets = model.predict(image, image_path)
            inference_ms = max((time.perf_counter() - t0) * 1000.0, 1e-6)
            dets = [d for d in dets if d["conf"] >= cfg.conf_floor]
            _send({"type": "result", "id": rid, "detections": dets,
                   "inference_ms": inference_ms})
        except Exception as exc:  # per-request failure keeps the loop alive
            _send({"type": "error", "id": rid, "message": str(exc)})
    return 0
