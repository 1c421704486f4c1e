"""In-memory 3-D scalar volume shared by every stage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense float32 voxel grid with physical spacing.

    ``data`` is indexed ``[i, j, k]`` with ``i`` along x; on disk the payload is
    written x-fastest (Fortran order). The array is made read-only on
    construction so instances can be shared freely.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    intensity_units: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"expected a non-empty 3-D array, got shape {data.shape}")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        elif data is self.data:
            data = data.copy()
        data.flags.writeable = False
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ParameterError(f"spacing must be three positive numbers, got {self.spacing}")
        orientation = np.array(self.orientation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(np.linalg.norm(orientation, axis=1), 1.0, atol=1e-6):
            raise ParameterError("orientation rows must have unit norm")
        orientation.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "orientation", orientation)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def center_mm(self) -> np.ndarray:
        """Physical position of the grid center in voxel-space millimeters."""
        return np.asarray(self.origin) + np.asarray(self.spacing) * (np.asarray(self.shape) - 1) / 2.0

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same geometry, new voxel values."""
        if np.shape(data) != self.shape:
            raise ShapeError(f"shape {np.shape(data)} does not match {self.shape}")
        return Volume3D(np.asarray(data, dtype=np.float32), self.spacing, self.origin,
                        self.orientation, self.intensity_units)

    def same_grid(self, other: "Volume3D") -> bool:
        return self.shape == other.shape and np.allclose(self.spacing, other.spacing)


def voxel_volume_mm3(vol: Volume3D) -> float:
    sx, sy, sz = vol.spacing
    return sx * sy * sz


def check_same_grid(a: Volume3D, b: Volume3D) -> None:
    if not a.same_grid(b):
        raise ShapeError(f"grid mismatch: {a.shape}@{a.spacing} vs {b.shape}@{b.spacing}")
