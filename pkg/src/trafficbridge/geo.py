"""Mapping simulation-plane coordinates into engine space, plus terrain height.

The simulation plane is a right-handed 2D system in meters; engine space
subtracts configured origin offsets, scales, and inverts the Y axis. Heading
conversion folds the simulation's degrees-clockwise-from-north convention
into engine yaw, where 0 degrees points along +X and 90 along +Y; the
composed handedness is not uniquely determined by upstream conventions, so
flip_yaw_sign switches to the mirrored convention for engines that need it.

Vertical placement comes from a HeightField: a regular elevation grid that
answers the question a top-down raycast against terrain geometry would,
deterministically and engine-free. The flat default keeps zero-config runs
on a level plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class HeightFieldError(Exception):
    pass


@dataclass(frozen=True)
class CoordinateMapper:
    offset_x: float = 0.0
    offset_y: float = 0.0
    units_per_meter: float = 1.0
    yaw_offset: float = 90.0
    flip_yaw_sign: bool = False

    def __post_init__(self):
        if self.units_per_meter <= 0:
            raise ValueError("units_per_meter must be positive")

    def to_engine(self, x: float, y: float) -> tuple[float, float]:
        return (
            (x - self.offset_x) * self.units_per_meter,
            -(y - self.offset_y) * self.units_per_meter,
        )

    def from_engine(self, x: float, y: float) -> tuple[float, float]:
        return (
            x / self.units_per_meter + self.offset_x,
            -y / self.units_per_meter + self.offset_y,
        )

    def to_engine_yaw(self, sumo_angle: float) -> float:
        yaw = sumo_angle - self.yaw_offset
        if self.flip_yaw_sign:
            yaw = -yaw
        return yaw % 360.0


def angle_difference(a: float, b: float) -> float:
    """Signed shortest-arc difference b - a in degrees, in (-180, 180]."""
    diff = (b - a) % 360.0
    return diff - 360.0 if diff > 180.0 else diff


def lerp_angle(a: float, b: float, t: float) -> float:
    """Interpolate between two angles along the shortest arc."""
    return (a + angle_difference(a, b) * t) % 360.0


class HeightField:
    """Regular elevation grid queried with bilinear interpolation.

    Sample [row, col] sits at (origin_x + col*cell_size, origin_y +
    row*cell_size). Queries outside the grid return the configured fallback
    elevation flagged as out of bounds.
    """

    def __init__(
        self,
        origin_x: float,
        origin_y: float,
        cell_size: float,
        data: np.ndarray,
        fallback: float = 0.0,
    ):
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
            raise HeightFieldError("height grid needs at least 2x2 samples")
        if cell_size <= 0:
            raise HeightFieldError("cell_size must be positive")
        if not np.all(np.isfinite(data)):
            raise HeightFieldError("height grid contains non-finite elevations")
        self.origin_x = origin_x
        self.origin_y = origin_y
        self.cell_size = cell_size
        self.data = data
        self.fallback = fallback
        self._flat_elevation: float | None = None

    @classmethod
    def flat(cls, elevation: float = 0.0) -> "HeightField":
        field = cls(0.0, 0.0, 1.0, np.full((2, 2), elevation), fallback=elevation)
        field._flat_elevation = elevation
        return field

    @property
    def max_elevation(self) -> float:
        return float(self.data.max())

    def snap_height(self, x: float, y: float, probe_height: float | None = None) -> tuple[float, bool]:
        """Terrain elevation under (x, y): what a downward ray from
        probe_height would hit. Returns (elevation, in_bounds)."""
        if self._flat_elevation is not None:
            return self._flat_elevation, True
        rows, cols = self.data.shape
        fx = (x - self.origin_x) / self.cell_size
        fy = (y - self.origin_y) / self.cell_size
        if not (0.0 <= fx <= cols - 1 and 0.0 <= fy <= rows - 1):
            return self.fallback, False
        c0 = min(int(fx), cols - 2)
        r0 = min(int(fy), rows - 2)
        tx = fx - c0
        ty = fy - r0
        h00 = self.data[r0, c0]
        h01 = self.data[r0, c0 + 1]
        h10 = self.data[r0 + 1, c0]
        h11 = self.data[r0 + 1, c0 + 1]
        top = h00 * (1 - tx) + h01 * tx
        bottom = h10 * (1 - tx) + h11 * tx
        return float(top * (1 - ty) + bottom * ty), True

    def snap_pitch(
        self,
        x: float,
        y: float,
        yaw: float,
        wheelbase: float,
        probe_height: float | None = None,
    ) -> tuple[float, bool]:
        """Pitch in degrees from two probes along yaw, half a wheelbase out
        each way. Positive pitch means the front sits higher than the rear.
        Returns (pitch, both_in_bounds); out-of-bounds probes yield pitch 0."""
        if wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        rad = math.radians(yaw)
        dx = math.cos(rad) * wheelbase / 2.0
        dy = math.sin(rad) * wheelbase / 2.0
        h_front, front_ok = self.snap_height(x + dx, y + dy, probe_height)
        h_rear, rear_ok = self.snap_height(x - dx, y - dy, probe_height)
        if not (front_ok and rear_ok):
            return 0.0, False
        return math.degrees(math.atan2(h_front - h_rear, wheelbase)), True

    def save(self, path: str | Path) -> None:
        rows, cols = self.data.shape
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.origin_x} {self.origin_y} {self.cell_size} {rows} {cols}\n")
            for row in self.data:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path: str | Path, fallback: float = 0.0) -> "HeightField":
        """Load the plain-text grid format: a header line
        `origin_x origin_y cell_size rows cols` followed by row-major
        whitespace-separated elevations."""
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 5:
                raise HeightFieldError(f"{path}: header must have 5 fields, found {len(header)}")
            try:
                origin_x, origin_y, cell_size = (float(v) for v in header[:3])
                rows, cols = int(header[3]), int(header[4])
            except ValueError as exc:
                raise HeightFieldError(f"{path}: bad header: {exc}") from None
            try:
                values = [float(token) for token in fh.read().split()]
            except ValueError as exc:
                raise HeightFieldError(f"{path}: bad elevation value: {exc}") from None
        if len(values) != rows * cols:
            raise HeightFieldError(
                f"{path}: expected {rows * cols} elevations, found {len(values)}"
            )
        grid = np.array(values, dtype=float).reshape(rows, cols)
        return cls(origin_x, origin_y, cell_size, grid, fallback=fallback)
