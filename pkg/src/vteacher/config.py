"""Run configuration and simulator scenario files.

Both are strict JSON: an unknown key is an error, since a misspelled
hyperparameter otherwise falls back to its default without a trace.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple

from .caps import ThresholdState
from .errors import InvalidProfile, ParseError, RangeError
from .losses import LossWeights
from .simulator import ClassProfile, ConfDist, Scenario


@dataclass(frozen=True)
class RunConfig:
    num_classes: Optional[int] = None
    delta_t: float = 0.2
    delta_0: float = 0.8
    alpha_t: float = 0.9999
    alpha: float = 0.9996
    lambda_d: float = 0.1
    M: int = 20
    beta_start: float = 1.0
    beta_end: float = 0.85
    K: Optional[int] = None
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("delta_t", "delta_0", "alpha_t", "alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise RangeError(f"{name} must lie in [0, 1], got {v}")
        for name in ("lambda_d", "lambda1", "lambda2", "lambda3", "beta_start", "beta_end"):
            v = getattr(self, name)
            if v < 0:
                raise RangeError(f"{name} must be >= 0, got {v}")
        if self.M < 2:
            raise RangeError(f"M must be >= 2, got {self.M}")
        if self.K is not None and self.K < 1:
            raise RangeError(f"K must be >= 1, got {self.K}")
        if self.num_classes is not None and self.num_classes < 1:
            raise RangeError(f"num_classes must be >= 1, got {self.num_classes}")

    def threshold_state(self, num_classes: Optional[int] = None, K: Optional[int] = None) -> ThresholdState:
        n = num_classes if num_classes is not None else self.num_classes
        total = K if K is not None else self.K
        if n is None:
            raise RangeError("num_classes is required to build a threshold state")
        if total is None:
            raise RangeError("K (total iterations) is required to build a threshold state")
        return ThresholdState.initial(
            n,
            self.delta_0,
            delta_t=self.delta_t,
            alpha_t=self.alpha_t,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            total_iters=total,
            num_bins=self.M,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda_d)

    def to_dict(self) -> dict:
        return asdict(self)


_INT_KEYS = {"num_classes", "M", "K", "seed"}
_NULLABLE = {"num_classes", "K"}


def _coerce(key, value, line=None):
    if value is None and key in _NULLABLE:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"expected a number, got {value!r}", line=line, field=key)
    if key in _INT_KEYS:
        if not isinstance(value, int):
            raise ParseError(f"expected an integer, got {value!r}", line=line, field=key)
        return value
    if not math.isfinite(value):
        raise ParseError("non-finite number", line=line, field=key)
    return float(value)


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ParseError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key in obj:
        if key not in known:
            raise ParseError("unknown config key", field=key)
    return RunConfig(**{k: _coerce(k, v) for k, v in obj.items()})


def _read_json(path):
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None


def load_config(path) -> RunConfig:
    """Parse a JSON config; an empty file yields every default."""
    return config_from_dict(_read_json(path))


# ------------------------------------------------------------------ scenarios

_CAPS_KEYS = {"delta_t", "delta_0", "alpha_t", "beta_start", "beta_end", "M"}


def _dist(obj, where) -> ConfDist:
    if not isinstance(obj, dict):
        raise ParseError("expected an object", field=where)
    unknown = obj.keys() - {"kind", "a", "b"}
    if unknown:
        raise ParseError("unknown key", field=f"{where}.{sorted(unknown)[0]}")
    try:
        d = ConfDist(str(obj.get("kind", "beta")), float(obj["a"]), float(obj["b"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad distribution: {e}", field=where) from None
    d.check()
    return d


def _profile(obj, i) -> ClassProfile:
    where = f"profiles[{i}]"
    if not isinstance(obj, dict):
        raise ParseError("expected an object", field=where)
    allowed = {"class", "tp_conf", "fp_conf", "tp_rate", "fp_rate", "box_size_range"}
    unknown = obj.keys() - allowed
    if unknown:
        raise ParseError("unknown key", field=f"{where}.{sorted(unknown)[0]}")
    for key in ("class", "tp_conf", "fp_conf"):
        if key not in obj:
            raise ParseError("missing required field", field=f"{where}.{key}")
    box: Tuple[float, float] = tuple(float(v) for v in obj.get("box_size_range", (16.0, 128.0)))
    if len(box) != 2:
        raise ParseError("expected [lo, hi]", field=f"{where}.box_size_range")
    p = ClassProfile(
        int(obj["class"]),
        _dist(obj["tp_conf"], f"{where}.tp_conf"),
        _dist(obj["fp_conf"], f"{where}.fp_conf"),
        float(obj.get("tp_rate", 2.0)),
        float(obj.get("fp_rate", 2.0)),
        box,
    )
    p.check()
    return p


def scenario_from_dict(obj: dict) -> Scenario:
    if not isinstance(obj, dict):
        raise ParseError("scenario must be a JSON object")
    allowed = {"profiles", "num_images", "image_size", "seed", "caps", "static_thresholds"}
    unknown = obj.keys() - allowed
    if unknown:
        raise ParseError("unknown scenario key", field=sorted(unknown)[0])
    if "profiles" not in obj or not isinstance(obj["profiles"], list):
        raise ParseError("expected a list of class profiles", field="profiles")
    profiles: List[ClassProfile] = [_profile(p, i) for i, p in enumerate(obj["profiles"])]
    caps = obj.get("caps", {})
    if not isinstance(caps, dict):
        raise ParseError("expected an object", field="caps")
    unknown = caps.keys() - _CAPS_KEYS
    if unknown:
        raise ParseError("unknown key", field=f"caps.{sorted(unknown)[0]}")
    run = RunConfig(**{k: _coerce(k, v) for k, v in caps.items()})
    size = obj.get("image_size", [640, 640])
    if not (isinstance(size, list) and len(size) == 2 and all(isinstance(v, int) and v > 0 for v in size)):
        raise ParseError("expected [width, height] positive integers", field="image_size")
    thresholds = obj.get("static_thresholds", [0.5, 0.6, 0.7, 0.8, 0.9])
    if not isinstance(thresholds, list):
        raise ParseError("expected a list", field="static_thresholds")
    num_images = _coerce("K", obj.get("num_images", 1000))
    seed = _coerce("seed", obj.get("seed", 0))
    if num_images is None or num_images < 0:
        raise InvalidProfile("num_images must be a non-negative integer")
    return Scenario(
        profiles=tuple(profiles),
        num_images=num_images,
        image_size=tuple(size),
        seed=seed,
        delta_t=run.delta_t,
        delta_0=run.delta_0,
        alpha_t=run.alpha_t,
        beta_start=run.beta_start,
        beta_end=run.beta_end,
        num_bins=run.M,
        static_thresholds=tuple(float(t) for t in thresholds),
    )


def load_scenario(path) -> Scenario:
    return scenario_from_dict(_read_json(path))
