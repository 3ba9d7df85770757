"""Regular 3D grids and the volumes that live on them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Axis-aligned voxel grid; ``origin`` is the centre of voxel (0, 0, 0)."""

    origin: np.ndarray
    spacing: np.ndarray
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        spacing = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        if np.any(spacing <= 0):
            raise ValueError(f"grid spacing must be positive, got {spacing}")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"grid shape must be three positive ints, got {self.shape}")

    @classmethod
    def centered(cls, center, extent, spacing) -> "Grid":
        """Grid of ``round(extent / spacing)`` voxels per axis centred on ``center``."""
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        extent = np.broadcast_to(np.asarray(extent, dtype=np.float64), (3,))
        shape = np.maximum(1, np.round(extent / spacing).astype(int))
        origin = np.asarray(center, dtype=np.float64) - (shape - 1) / 2.0 * spacing
        return cls(origin, spacing, tuple(shape))

    @classmethod
    def from_bounds(cls, lo, hi, spacing) -> "Grid":
        spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
        lo = np.asarray(lo, dtype=np.float64)
        shape = np.floor((np.asarray(hi, dtype=np.float64) - lo) / spacing + 1e-9).astype(int) + 1
        return cls(lo, spacing, tuple(shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def center(self) -> np.ndarray:
        return self.origin + (np.asarray(self.shape) - 1) / 2.0 * self.spacing

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.shape) - 1) * self.spacing

    def axes(self):
        return tuple(self.origin[i] + np.arange(self.shape[i]) * self.spacing[i] for i in range(3))

    def points(self) -> np.ndarray:
        """Voxel centres as an (N, 3) array in C order."""
        x, y, z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def shifted(self, t) -> "Grid":
        return Grid(self.origin + np.asarray(t, dtype=np.float64), self.spacing, self.shape)

    def position(self, index) -> np.ndarray:
        return self.origin + np.asarray(index, dtype=np.float64) * self.spacing

    def index_of(self, p) -> np.ndarray:
        """Fractional voxel index of physical position(s) ``p``."""
        return (np.asarray(p, dtype=np.float64) - self.origin) / self.spacing

    def contains(self, p) -> np.ndarray:
        idx = self.index_of(p)
        return np.all((idx >= -0.5) & (idx <= np.asarray(self.shape) - 0.5), axis=-1)

    def downsampled(self, factor: int = 2) -> "Grid":
        shape = tuple(max(1, n // factor) for n in self.shape)
        origin = self.origin + (factor - 1) / 2.0 * self.spacing
        return Grid(origin, self.spacing * factor, shape)


@dataclass
class Volume:
    data: np.ndarray
    grid: Grid
    frame_id: int = 0
    timestamp: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.grid.shape:
            raise ValueError(f"data shape {self.data.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data must be finite")

    @property
    def origin(self) -> np.ndarray:
        return self.grid.origin

    @property
    def spacing(self) -> np.ndarray:
        return self.grid.spacing

    @property
    def shape(self) -> tuple:
        return self.grid.shape

    def argmax_position(self) -> np.ndarray:
        idx = np.unravel_index(int(np.argmax(self.data)), self.data.shape)
        return self.grid.position(idx)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.grid, self.frame_id, self.timestamp, dict(self.meta))
