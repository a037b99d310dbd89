"""Normalized-density bird's-eye-view rasterization."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import Pose2, as_cloud


@dataclass(frozen=True)
class BevConfig:
    half_window: float = 25.0
    grid_resolution: float = 0.4
    density_clamp: int = 10
    output_side: int = 128
    z_min: float | None = None
    z_max: float | None = None

    def __post_init__(self):
        if self.half_window <= 0 or self.grid_resolution <= 0:
            raise ValueError("half_window and grid_resolution must be positive")
        if self.density_clamp < 1:
            raise ValueError("density_clamp must be >= 1")
        if self.raster_side < 8:
            raise ValueError(f"raster side {self.raster_side} < 8")
        if self.output_side < self.raster_side:
            raise ValueError(
                f"output_side {self.output_side} smaller than raster side {self.raster_side}"
            )

    @property
    def raster_side(self) -> int:
        # small epsilon so 50 / 0.4 lands on 125 rather than 124.99999
        return int(np.floor(2 * self.half_window / self.grid_resolution + 1e-9))

    @property
    def pad_before(self) -> int:
        return (self.output_side - self.raster_side) // 2


@dataclass
class BevImage:
    pixels: np.ndarray
    frame_pose: Pose2 | None = None
    dropped: int = 0
    in_window: int = 0

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


def voxel_filter(cloud, leaf: float) -> np.ndarray:
    """Replace the points of each occupied ``leaf``-sized voxel by their centroid."""
    if not leaf > 0:
        raise ValueError(f"leaf size must be positive, got {leaf}")
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud)
    return sums / counts[:, None]


def cell_indices(cloud: np.ndarray, cfg: BevConfig):
    """Return (rows, cols, in-window mask) in raster coordinates (before padding)."""
    L, g = cfg.half_window, cfg.grid_resolution
    x, y = cloud[:, 0], cloud[:, 1]
    mask = (x >= -L) & (x < L) & (y >= -L) & (y < L)
    if cfg.z_min is not None:
        mask &= cloud[:, 2] >= cfg.z_min
    if cfg.z_max is not None:
        mask &= cloud[:, 2] <= cfg.z_max
    rows = np.floor((L - y) / g).astype(np.int64)
    cols = np.floor((x + L) / g).astype(np.int64)
    n = cfg.raster_side
    # floating-point edge cases at the far border
    mask &= (rows >= 0) & (rows < n) & (cols >= 0) & (cols < n)
    return rows, cols, mask


def cell_counts(cloud, cfg: BevConfig) -> tuple[np.ndarray, int]:
    cloud = as_cloud(cloud)
    n = cfg.raster_side
    if len(cloud) == 0:
        return np.zeros((n, n), dtype=np.int64), 0
    rows, cols, mask = cell_indices(cloud, cfg)
    counts = np.bincount(rows[mask] * n + cols[mask], minlength=n * n).reshape(n, n)
    return counts, int((~mask).sum())


def rasterize(cloud, cfg: BevConfig = BevConfig(), frame_pose: Pose2 | None = None) -> BevImage:
    """Render a (voxel-filtered) cloud in its own frame as a density image.

    Pixel value is ``min(N_g, N_n) / N_m`` with ``N_m`` the per-image maximum
    of the clamped counts. The raster is zero-padded to ``cfg.output_side``.
    """
    counts, dropped = cell_counts(cloud, cfg)
    clamped = np.minimum(counts, cfg.density_clamp).astype(np.float64)
    peak = clamped.max()
    raster = clamped / peak if peak > 0 else clamped
    out = np.zeros((cfg.output_side, cfg.output_side), dtype=np.float32)
    p0, n = cfg.pad_before, cfg.raster_side
    out[p0:p0 + n, p0:p0 + n] = raster
    return BevImage(out, frame_pose, dropped=dropped, in_window=int(counts.sum()))


def save_png(image: BevImage | np.ndarray, path) -> None:
    from PIL import Image

    pixels = image.pixels if isinstance(image, BevImage) else np.asarray(image)
    Image.fromarray(np.round(255 * pixels).astype(np.uint8), mode="L").save(path)


def save_f32(image: BevImage | np.ndarray, path) -> None:
    pixels = image.pixels if isinstance(image, BevImage) else np.asarray(image)
    Path(path).write_bytes(np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def load_f32(path, side: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != side * side:
        raise ValueError(f"{path}: expected {side * side} float32 values, found {data.size}")
    return data.reshape(side, side).copy()


class BevRasterizer(TransformerMixin, BaseEstimator):
    """Voxel-filter + rasterize each cloud of ``X`` into a ``(n, side, side)`` stack."""

    def __init__(self, half_window=25.0, grid_resolution=0.4, density_clamp=10,
                 output_side=128, voxel_filter=True):
        self.half_window = half_window
        self.grid_resolution = grid_resolution
        self.density_clamp = density_clamp
        self.output_side = output_side
        self.voxel_filter = voxel_filter

    @property
    def config(self) -> BevConfig:
        return BevConfig(self.half_window, self.grid_resolution, self.density_clamp,
                         self.output_side)

    def fit(self, X=None, y=None):
        self.config_ = self.config
        return self

    def transform(self, X):
        cfg = self.config
        out = np.zeros((len(X), cfg.output_side, cfg.output_side), dtype=np.float32)
        for i, cloud in enumerate(X):
            if self.voxel_filter:
                cloud = voxel_filter(cloud, cfg.grid_resolution)
            out[i] = rasterize(cloud, cfg).pixels
        return out
