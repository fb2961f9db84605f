"""On-disk formats: detection dumps and pseudo labels (JSON Lines), threshold
state (JSON), and dense tensors (``VTTN`` binary).

All writers are canonical: the same value always serializes to the same
bytes, so ``write(read(x)) == x`` for anything a writer produced.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .caps import PseudoLabel, PseudoLabelSet, ThresholdState
from .detection import BBox, Detection, PredictionBatch, validate_detection
from .errors import MalformedDetection, ParseError

# ---------------------------------------------------------------- tensors

TENSOR_MAGIC = b"VTTN"
TENSOR_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}
_HEADER = struct.Struct("<4sHBB")


def tensor_to_bytes(array) -> bytes:
    a = np.asarray(array)
    if a.dtype == np.float32:
        a = a.astype("<f4", copy=False)
    elif a.dtype == np.float64:
        a = a.astype("<f8", copy=False)
    else:
        raise ValueError(f"unsupported tensor dtype {a.dtype}; expected float32 or float64")
    if a.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, _DTYPE_TAGS[a.dtype], a.ndim)
    dims = struct.pack(f"<{a.ndim}I", *a.shape)
    return header + dims + np.ascontiguousarray(a).tobytes(order="C")


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ParseError("tensor file shorter than its header", field="header")
    magic, version, tag, rank = _HEADER.unpack_from(data, 0)
    if magic != TENSOR_MAGIC:
        raise ParseError(f"bad magic {magic!r}", field="magic")
    if version != TENSOR_VERSION:
        raise ParseError(f"unsupported version {version}", field="version")
    if tag not in _TAG_DTYPES:
        raise ParseError(f"unknown dtype tag {tag}", field="dtype")
    offset = _HEADER.size
    if len(data) < offset + 4 * rank:
        raise ParseError("truncated dimension table", field="dims")
    dims = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    dtype = _TAG_DTYPES[tag]
    expected = math.prod(dims) * dtype.itemsize
    if len(data) - offset != expected:
        raise ParseError(f"payload has {len(data) - offset} bytes, expected {expected}", field="payload")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------ JSON helpers


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _loads(text: str, line: Optional[int] = None):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=line if line is not None else e.lineno) from None


def _number(obj: dict, key: str, line=None, integer=False):
    if key not in obj:
        raise ParseError("missing required field", line=line, field=key)
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}", line=line, field=key)
    if integer and not isinstance(v, int):
        raise ParseError(f"expected an integer, got {v!r}", line=line, field=key)
    if not math.isfinite(v):
        raise ParseError("non-finite number", line=line, field=key)
    return v


def _exact_keys(obj, required: Iterable[str], optional: Iterable[str] = (), line=None, where="object"):
    if not isinstance(obj, dict):
        raise ParseError(f"{where} must be a JSON object", line=line)
    required, optional = set(required), set(optional)
    missing = required - obj.keys()
    if missing:
        raise ParseError(f"{where} is missing a required field", line=line, field=sorted(missing)[0])
    unknown = obj.keys() - required - optional
    if unknown:
        raise ParseError(f"{where} has an unknown field", line=line, field=sorted(unknown)[0])


# ------------------------------------------------------------ detection dump

_DET_KEYS = ("x1", "y1", "x2", "y2", "conf", "scores")


@dataclass(frozen=True)
class DumpRecord:
    batch: PredictionBatch
    conf_semantics: str


def _detection_to_json(d: Detection) -> dict:
    out = {
        "x1": float(d.bbox.x1),
        "y1": float(d.bbox.y1),
        "x2": float(d.bbox.x2),
        "y2": float(d.bbox.y2),
        "conf": float(d.conf),
        "scores": [float(s) for s in d.class_scores],
    }
    if d.truth is not None:
        out["truth"] = d.truth
    return out


def _detection_from_json(obj, line, where="detection") -> Detection:
    _exact_keys(obj, _DET_KEYS, ("truth",), line=line, where=where)
    box = BBox(*(float(_number(obj, k, line)) for k in ("x1", "y1", "x2", "y2")))
    scores = obj["scores"]
    if not isinstance(scores, list):
        raise ParseError("expected a list", line=line, field="scores")
    for s in scores:
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s):
            raise ParseError(f"bad score {s!r}", line=line, field="scores")
    truth = None
    if "truth" in obj:
        truth = _number(obj, "truth", line, integer=True)
    return Detection(box, tuple(float(s) for s in scores), float(_number(obj, "conf", line)), truth)


def dump_line(record: DumpRecord) -> str:
    b = record.batch
    return _dumps({
        "image_id": b.image_id,
        "width": b.image_size[0],
        "height": b.image_size[1],
        "conf_semantics": record.conf_semantics,
        "detections": [_detection_to_json(d) for d in b.detections],
    })


def parse_dump_line(text: str, line: int = 1, num_classes: Optional[int] = None) -> DumpRecord:
    obj = _loads(text, line)
    _exact_keys(obj, ("image_id", "width", "height", "conf_semantics", "detections"), line=line, where="image record")
    if not isinstance(obj["image_id"], str):
        raise ParseError("expected a string", line=line, field="image_id")
    if not isinstance(obj["conf_semantics"], str) or not obj["conf_semantics"]:
        raise ParseError("producer must declare what conf means", line=line, field="conf_semantics")
    w = _number(obj, "width", line, integer=True)
    h = _number(obj, "height", line, integer=True)
    if not isinstance(obj["detections"], list):
        raise ParseError("expected a list", line=line, field="detections")
    dets = []
    for i, raw in enumerate(obj["detections"]):
        d = _detection_from_json(raw, line, where=f"detections[{i}]")
        n = num_classes if num_classes is not None else d.num_classes
        try:
            dets.append(validate_detection(d, n, (w, h)))
        except MalformedDetection as e:
            raise ParseError(e.reason, line=line, field=f"detections[{i}].{e.field}") from None
    return DumpRecord(PredictionBatch(obj["image_id"], tuple(dets), (w, h)), obj["conf_semantics"])


def write_dump(records: Sequence[DumpRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(dump_line(r) + "\n")


def read_dump(path, num_classes: Optional[int] = None) -> List[DumpRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, text in enumerate(fh, 1):
            if text.strip():
                records.append(parse_dump_line(text, i, num_classes))
    return records


# ------------------------------------------------------------ pseudo labels


def labels_line(labels: PseudoLabelSet) -> str:
    items = []
    for l in labels.labels:
        item = _detection_to_json(l.detection)
        item["class"] = l.assigned_class
        item["one_hot"] = list(l.one_hot)
        items.append(item)
    return _dumps({"image_id": labels.image_id, "labels": items})


def parse_labels_line(text: str, line: int = 1) -> PseudoLabelSet:
    obj = _loads(text, line)
    _exact_keys(obj, ("image_id", "labels"), line=line, where="label record")
    out = []
    for i, raw in enumerate(obj["labels"]):
        if not isinstance(raw, dict):
            raise ParseError("expected an object", line=line, field=f"labels[{i}]")
        det_part = {k: v for k, v in raw.items() if k not in ("class", "one_hot")}
        d = _detection_from_json(det_part, line, where=f"labels[{i}]")
        c = _number(raw, "class", line, integer=True)
        one_hot = raw.get("one_hot")
        if not isinstance(one_hot, list) or any(v not in (0, 1) or isinstance(v, bool) for v in one_hot):
            raise ParseError("expected a list of 0/1", line=line, field=f"labels[{i}].one_hot")
        out.append(PseudoLabel(d, c, tuple(one_hot)))
    return PseudoLabelSet(obj["image_id"], tuple(out))


def write_labels(sets: Sequence[PseudoLabelSet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sets:
            fh.write(labels_line(s) + "\n")


def read_labels(path) -> List[PseudoLabelSet]:
    with open(path, encoding="utf-8") as fh:
        return [parse_labels_line(t, i) for i, t in enumerate(fh, 1) if t.strip()]


# ------------------------------------------------------------ threshold state

STATE_VERSION = 1
_STATE_KEYS = ("version", "k", "K", "delta_t", "alpha_t", "beta_start", "beta_end", "M", "per_class")


def state_to_json(state: ThresholdState) -> str:
    obj = {
        "version": STATE_VERSION,
        "k": state.k,
        "K": state.total_iters,
        "delta_t": state.delta_t,
        "alpha_t": state.alpha_t,
        "beta_start": state.beta_start,
        "beta_end": state.beta_end,
        "M": state.num_bins,
        "per_class": [{"class": c, "delta": d} for c, d in enumerate(state.per_class)],
    }
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def state_from_json(text: str) -> ThresholdState:
    obj = _loads(text)
    _exact_keys(obj, _STATE_KEYS, where="state file")
    if obj["version"] != STATE_VERSION:
        raise ParseError(f"unsupported state version {obj['version']!r}", field="version")
    entries = obj["per_class"]
    if not isinstance(entries, list) or not entries:
        raise ParseError("expected a non-empty list", field="per_class")
    deltas = [None] * len(entries)
    for i, e in enumerate(entries):
        _exact_keys(e, ("class", "delta"), where=f"per_class[{i}]")
        c = _number(e, "class", integer=True)
        if not 0 <= c < len(entries) or deltas[c] is not None:
            raise ParseError(f"class ids must be 0..{len(entries) - 1}, each once", field=f"per_class[{i}].class")
        deltas[c] = float(_number(e, "delta"))
    return ThresholdState(
        per_class=tuple(deltas),
        delta_t=float(_number(obj, "delta_t")),
        alpha_t=float(_number(obj, "alpha_t")),
        beta_start=float(_number(obj, "beta_start")),
        beta_end=float(_number(obj, "beta_end")),
        total_iters=_number(obj, "K", integer=True),
        k=_number(obj, "k", integer=True),
        num_bins=_number(obj, "M", integer=True),
    )


def save_state(state: ThresholdState, path) -> None:
    Path(path).write_text(state_to_json(state), encoding="utf-8")


def load_state(path) -> ThresholdState:
    return state_from_json(Path(path).read_text(encoding="utf-8"))

