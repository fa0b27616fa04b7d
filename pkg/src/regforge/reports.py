"""JSON report emission with stable float formatting."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InvariantViolation

FLOAT_DIGITS = 9


def to_jsonable(obj):
    """Recursively convert numpy values and round floats to 9 significant digits.

    Non-finite floats become ``None`` since JSON has no spelling for them.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        return float(f"{x:.{FLOAT_DIGITS}g}")
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=False)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")
    return path


@dataclass
class RunManifest:
    """Provenance embedded in every CLI report."""

    command: str
    seed: int
    out_dir: str
    model_path: str | None = None
    config_name: str | None = None
    scan_path: str | None = None
    plan_path: str | None = None
    inputs: list[str] = field(default_factory=list)
    taps: list[list] = field(default_factory=list)
    preprocessing: str = "shorter-side bilinear resize, centre crop, per-channel (x/255 - mean)/std"
    version: str = __version__

    def check(self) -> None:
        for path in [self.model_path, self.scan_path, self.plan_path, *self.inputs]:
            if path is not None and not os.path.exists(path):
                raise InvariantViolation(f"manifest references missing file {path}")

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "model_path": self.model_path,
            "config_name": self.config_name,
            "scan_path": self.scan_path,
            "plan_path": self.plan_path,
            "inputs": list(self.inputs),
            "taps": [list(t) for t in self.taps],
            "preprocessing": self.preprocessing,
            "version": self.version,
        }
