"""Local-map stitching and virtual-viewpoint BEV resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import BevConfig, BevImage, rasterize, voxel_filter
from .geometry import Pose2, compose, inverse, transform_cloud


class SparseViewError(ValueError):
    """Raised when a virtual view sees too few points; the caller should resample."""

    def __init__(self, in_window: int, minimum: int):
        super().__init__(f"sparse view: {in_window} in-window points < {minimum}")
        self.in_window = in_window
        self.minimum = minimum


@dataclass(frozen=True)
class AugmentConfig:
    frames_M: int = 5
    interval_S: int = 20
    offset_std: float = 2.0
    apply_probability: float = 0.5
    min_points: int = 50
    max_attempts: int = 10

    def __post_init__(self):
        if self.frames_M < 1 or self.interval_S < 1:
            raise ValueError("frames_M and interval_S must be >= 1")
        if self.offset_std < 0:
            raise ValueError("offset_std must be >= 0")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must be in [0, 1]")


def stitch_local_map(frames, anchor: Pose2, leaf: float = 0.4) -> np.ndarray:
    """Merge ``(cloud, pose)`` frames into the anchor's local frame and voxel-filter."""
    frames = list(frames)
    if not frames:
        raise ValueError("stitch_local_map needs at least one frame")
    to_anchor = inverse(anchor)
    parts = [transform_cloud(compose(to_anchor, pose), cloud) for cloud, pose in frames]
    return voxel_filter(np.concatenate(parts, axis=0), leaf)


def local_map_indices(i: int, n_frames: int, cfg: AugmentConfig) -> list[int]:
    """Indices of the ``M`` frames (spacing ``S``) centered on frame ``i``, clipped to range."""
    offsets = (np.arange(cfg.frames_M) - cfg.frames_M // 2) * cfg.interval_S
    return sorted({int(np.clip(i + o, 0, n_frames - 1)) for o in offsets})


def sample_virtual_pose(anchor: Pose2, cfg: AugmentConfig, rng_seed) -> Pose2:
    """Gaussian position offset (std ``offset_std``) and uniform yaw."""
    rng = np.random.default_rng(rng_seed)
    dx, dy = cfg.offset_std * rng.standard_normal(2)
    yaw = rng.uniform(0.0, 2 * math.pi)
    return Pose2(anchor.x + dx, anchor.y + dy, yaw)


def render_virtual_bev(local_map, virtual: Pose2, anchor: Pose2,
                       bev_cfg: BevConfig = BevConfig(), min_points: int = 50):
    """Render the anchor-frame map from the world pose ``virtual``.

    Returns ``(image, label)``; the label is ``virtual`` itself.
    """
    view = compose(inverse(virtual), anchor)
    image = rasterize(transform_cloud(view, local_map), bev_cfg, frame_pose=virtual)
    if image.in_window < min_points:
        raise SparseViewError(image.in_window, min_points)
    return image, virtual


def augmented_view(clouds, poses, i: int, cfg: AugmentConfig, bev_cfg: BevConfig,
                   rng_seed) -> tuple[BevImage, Pose2]:
    """Build a local map around frame ``i`` and render one virtual view.

    ``rng_seed`` should be a per-sample counter (e.g. ``(seed, epoch, i)``) so
    results do not depend on how work is split between workers. Sparse views
    are resampled up to ``cfg.max_attempts`` times before falling back to the
    raw frame.
    """
    anchor = poses[i]
    idx = local_map_indices(i, len(clouds), cfg)
    local = stitch_local_map([(clouds[j], poses[j]) for j in idx], anchor,
                             leaf=bev_cfg.grid_resolution)
    ss = np.random.SeedSequence(rng_seed)
    for child in ss.spawn(cfg.max_attempts):
        virtual = sample_virtual_pose(anchor, cfg, child)
        try:
            return render_virtual_bev(local, virtual, anchor, bev_cfg, cfg.min_points)
        except SparseViewError:
            continue
    cloud = voxel_filter(clouds[i], bev_cfg.grid_resolution)
    return rasterize(cloud, bev_cfg, frame_pose=anchor), anchor
