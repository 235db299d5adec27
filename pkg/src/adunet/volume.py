"""Voxel grid container used for images, masks, anomaly maps and predictions.

All 3-vectors (dims, spacing, origin offsets, voxel indices) are stored in
array-axis order ``(k, i, j)`` = ``(depth, height, width)``.  Column ``a`` of
``direction`` is the world-space unit vector of array axis ``a``, so the world
position of voxel index ``idx`` is::

    origin + direction @ (spacing * idx)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError

ORTHONORMAL_TOL = 1e-5


def _as_vec3(v, name: str) -> np.ndarray:
    arr = _f32_exact(v).reshape(-1)
    if arr.shape != (3,):
        raise ConfigError(f"{name} must have 3 components, got shape {arr.shape}")
    return arr


def _f32_exact(v) -> np.ndarray:
    # geometry is stored as f32 on disk; keep in-memory values f32-representable
    return np.asarray(v, dtype=np.float32).astype(np.float64)


def is_orthonormal(direction: np.ndarray, tol: float = ORTHONORMAL_TOL) -> bool:
    d = np.asarray(direction, dtype=np.float64)
    return d.shape == (3, 3) and bool(np.all(np.abs(d @ d.T - np.eye(3)) <= tol))


@dataclass(eq=False)
class Volume:
    data: np.ndarray
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ConfigError(f"volume data must be 3-D, got {data.ndim}-D")
        if min(data.shape) < 1:
            raise ConfigError(f"volume dims must be >= 1, got {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.spacing = _as_vec3(self.spacing, "spacing")
        self.origin = _as_vec3(self.origin, "origin")
        self.direction = _f32_exact(self.direction).reshape(3, 3)
        if np.any(self.spacing <= 0):
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if not is_orthonormal(self.direction):
            raise ConfigError("direction matrix is not orthonormal")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def like(self, data: np.ndarray) -> "Volume":
        """New volume on the same grid holding ``data``."""
        return Volume(data, self.spacing.copy(), self.origin.copy(), self.direction.copy())

    def same_geometry(self, other: "Volume", atol: float = 0.0) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
            and np.allclose(self.direction, other.direction, rtol=0, atol=atol)
        )

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map ``(..., 3)`` continuous indices to world coordinates (mm)."""
        idx = np.asarray(idx, dtype=np.float64)
        return self.origin + (idx * self.spacing) @ self.direction.T

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return ((points - self.origin) @ self.direction) / self.spacing

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.same_geometry(other)
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"Volume(dims={self.dims}, spacing={tuple(self.spacing)}, origin={tuple(self.origin)})"


def require_same_geometry(*volumes: Volume, what: str = "volumes") -> None:
    ref = volumes[0]
    for v in volumes[1:]:
        if not ref.same_geometry(v, atol=1e-6):
            raise GeometryError(f"{what} do not share geometry: {ref!r} vs {v!r}")
