"""JSON checkpoints with hexadecimal floats, so weights round-trip exactly."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .mlp import MlpParams

CKPT_FORMAT = "steerkit-ckpt-v1"


def _hex(a: np.ndarray):
    if a.ndim == 1:
        return [float(x).hex() for x in a]
    return [_hex(row) for row in a]


def _unhex(x) -> np.ndarray:
    if x and isinstance(x[0], list):
        return np.array([[float.fromhex(v) for v in row] for row in x], dtype=np.float64)
    return np.array([float.fromhex(v) for v in x], dtype=np.float64)


def dump_layers(layers, meta: dict) -> dict:
    return {
        "format": CKPT_FORMAT,
        "meta": meta,
        "layers": [{"w": _hex(np.asarray(w)), "b": _hex(np.asarray(b))} for w, b in layers],
    }


def load_layers(doc: dict) -> tuple[list[tuple[np.ndarray, np.ndarray]], dict]:
    if doc.get("format") != CKPT_FORMAT:
        raise ValueError(f"not a {CKPT_FORMAT} checkpoint (format={doc.get('format')!r})")
    return [(_unhex(l["w"]), _unhex(l["b"])) for l in doc["layers"]], doc.get("meta", {})


def save_checkpoint(path, params: MlpParams | list, meta: dict) -> Path:
    layers = params.arrays() if isinstance(params, MlpParams) else params
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dump_layers(layers, meta)))
    return path


def load_checkpoint(path) -> tuple[list[tuple[np.ndarray, np.ndarray]], dict]:
    return load_layers(json.loads(Path(path).read_text()))
