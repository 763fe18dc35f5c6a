"""Flat scene parameter vectors with a named layout, and their checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Slot:
    name: str
    start: int
    stop: int
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.stop - self.start != int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError(f"slot {self.name!r} spans {self.stop - self.start} values but has shape {self.shape}")


def make_layout(**shapes) -> tuple[Slot, ...]:
    """Consecutive slots in keyword order, e.g. ``make_layout(density=(8, 8, 8))``."""
    slots, pos = [], 0
    for name, shape in shapes.items():
        n = int(np.prod(shape, dtype=np.int64))
        slots.append(Slot(name, pos, pos + n, tuple(shape)))
        pos += n
    return tuple(slots)


@dataclass(frozen=True, eq=False)
class SceneParameters:
    """The optimized vector theta and the named slices that give it meaning."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("scene parameters must be finite")
        slots = tuple(s if isinstance(s, Slot) else Slot(*s) for s in self.layout)
        pos = 0
        for s in sorted(slots, key=lambda s: s.start):
            if s.start != pos:
                raise ValueError(f"layout slot {s.name!r} starts at {s.start}, expected {pos} (gap or overlap)")
            pos = s.stop
        if pos != v.size:
            raise ValueError(f"layout covers {pos} values but theta has {v.size}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", slots)

    @property
    def size(self) -> int:
        return self.values.size

    def slot(self, name: str) -> Slot:
        for s in self.layout:
            if s.name == name:
                return s
        raise KeyError(name)

    def get(self, name: str) -> np.ndarray:
        s = self.slot(name)
        return self.values[s.start:s.stop].reshape(s.shape)

    def with_values(self, values) -> "SceneParameters":
        return SceneParameters(values, self.layout)

    def layout_dict(self) -> list:
        return [{"name": s.name, "start": s.start, "stop": s.stop, "shape": list(s.shape)} for s in self.layout]


def save_scene(path, theta: SceneParameters, renderer) -> Path:
    """npz with the flat vector, its layout and the renderer that interprets it."""
    path = Path(path)
    header = {"format_version": CHECKPOINT_VERSION, "renderer": renderer.config(), "layout": theta.layout_dict()}
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), theta=theta.values)
    tmp.replace(path)
    return path


def load_scene(path) -> tuple[SceneParameters, dict]:
    """Returns the parameters and the renderer config (see ``make_renderer``)."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        values = z["theta"]
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    layout = tuple(Slot(d["name"], d["start"], d["stop"], tuple(d["shape"])) for d in header["layout"])
    return SceneParameters(values, layout), header["renderer"]
