"""Per-step trajectory log of a closed-loop run, with CSV round-tripping.

Floats are written with shortest round-trip repr, so saving and reloading
reproduces the arrays bit-exactly (which the determinism checks rely on).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

# (attribute, number of columns). Column order in the CSV follows this table.
_LAYOUT = [
    ("t", 1),
    ("q", 7),
    ("qd", 7),
    ("q_v", 1),
    ("qd_v", 1),
    ("o_tip", 3),
    ("o_base", 3),
    ("z_tip", 3),
    ("zbar_tip", 3),
    ("zbar_base", 3),
    ("z_base", 3),
    ("zv_tip", 3),
    ("zv_base", 3),
    ("u_r", 7),
    ("u_e", 7),
    ("ddelta_tip", 3),
    ("ddelta_base", 3),
    ("e_robot", 1),
    ("e_drill", 1),
    ("e_buffer", 1),
    ("e_spring_tip", 1),
    ("e_spring_base", 1),
    ("e_total", 1),
    ("saturated", 7),
    ("status", 1),
]

_VEC_NAMES = {3: ("x", "y", "z")}


def _column_names() -> list[str]:
    names = []
    for attr, width in _LAYOUT:
        if width == 1:
            names.append(attr)
        elif width == 3:
            names.extend(f"{attr}_{s}" for s in _VEC_NAMES[3])
        else:
            names.extend(f"{attr}{i}" for i in range(width))
    return names


@dataclass
class TrajectoryLog:
    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    q_v: np.ndarray
    qd_v: np.ndarray
    o_tip: np.ndarray
    o_base: np.ndarray
    z_tip: np.ndarray
    zbar_tip: np.ndarray  # NaN rows while no vision measurement delivered
    zbar_base: np.ndarray
    z_base: np.ndarray
    zv_tip: np.ndarray
    zv_base: np.ndarray
    u_r: np.ndarray
    u_e: np.ndarray
    ddelta_tip: np.ndarray
    ddelta_base: np.ndarray
    e_robot: np.ndarray
    e_drill: np.ndarray
    e_buffer: np.ndarray
    e_spring_tip: np.ndarray
    e_spring_base: np.ndarray
    e_total: np.ndarray
    saturated: np.ndarray  # 0/1 per joint
    status: np.ndarray  # 0 running, 1 terminated

    @property
    def n(self) -> int:
        return len(self.t)

    def save_csv(self, path) -> None:
        cols = []
        for attr, width in _LAYOUT:
            a = getattr(self, attr)
            cols.append(a.reshape(self.n, width))
        table = np.hstack(cols)
        with open(path, "w") as f:
            f.write(",".join(_column_names()) + "\n")
            for row in table:
                f.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load_csv(cls, path) -> "TrajectoryLog":
        with open(path) as f:
            header = f.readline().strip().split(",")
            if header != _column_names():
                raise ValueError("unexpected trajectory log header")
            data = np.array([[float(v) for v in line.split(",")] for line in f if line.strip()])
        out = {}
        col = 0
        for attr, width in _LAYOUT:
            block = data[:, col : col + width]
            out[attr] = block[:, 0] if width == 1 else block
            col += width
        return cls(**out)


class LogBuilder:
    """Accumulates per-step rows and finalizes to a TrajectoryLog."""

    def __init__(self):
        self._rows = {f.name: [] for f in fields(TrajectoryLog)}

    def append(self, **kwargs) -> None:
        for name, value in kwargs.items():
            self._rows[name].append(value)

    def build(self) -> TrajectoryLog:
        return TrajectoryLog(**{k: np.asarray(v, dtype=float) for k, v in self._rows.items()})
