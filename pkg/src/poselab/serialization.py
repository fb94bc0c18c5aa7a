"""Annotation JSONL and the NTC v1 named-tensor container.

Annotations: one scene per line,
``{"id": int, "width": int, "height": int, "instances": [{"keypoints":
[[x,y,v],...], "bbox": [x0,y0,x1,y1], "area": float}]}`` with pixel
coordinates serialized at 17 significant digits so roundtrips are exact.

NTC v1: magic ``NTC1``, an 8-byte little-endian header length, a UTF-8 JSON
header ``[{"name", "shape", "offset"}]``, then contiguous little-endian
float32 payloads at the declared offsets (relative to the payload start).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .scenes import Annotation, RawInstance

__all__ = [
    "AnnotationParseError",
    "CheckpointFormatError",
    "write_annotations",
    "read_annotations",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"NTC1"


class AnnotationParseError(ValueError):
    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class CheckpointFormatError(ValueError):
    pass


def _fmt(x: float) -> float:
    # json round-trips python floats exactly via repr (17 significant digits)
    return float(x)


def write_annotations(path, annotations: list[Annotation]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ann in annotations:
            record = {
                "id": ann.scene_id,
                "width": ann.width,
                "height": ann.height,
                "instances": [
                    {
                        "keypoints": [[_fmt(x), _fmt(y), int(v)] for x, y, v in inst.keypoints],
                        "bbox": [_fmt(c) for c in inst.bbox],
                        "area": _fmt(inst.area),
                    }
                    for inst in ann.instances
                ],
            }
            fh.write(json.dumps(record) + "\n")


def read_annotations(path) -> list[Annotation]:
    path = Path(path)
    out = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                ann = Annotation(
                    scene_id=int(record["id"]),
                    width=int(record["width"]),
                    height=int(record["height"]),
                    instances=[
                        RawInstance(
                            keypoints=[[float(x), float(y), int(v)] for x, y, v in inst["keypoints"]],
                            bbox=[float(c) for c in inst["bbox"]],
                            area=float(inst["area"]),
                        )
                        for inst in record["instances"]
                    ],
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise AnnotationParseError(lineno, str(exc)) from exc
            out.append(ann)
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise CheckpointFormatError("duplicate tensor name")
    header = []
    offset = 0
    arrays = []
    for name in names:
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        header.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        arrays.append(arr)
    header_bytes = json.dumps(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointFormatError("truncated header length")
    (header_len,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + header_len:
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointFormatError(f"invalid header json: {exc}") from exc
    payload = raw[12 + header_len :]
    out: dict[str, np.ndarray] = {}
    for entry in header:
        name = entry["name"]
        if name in out:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointFormatError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return out
