"""Deterministic 2.5D street world, planar LiDAR simulator and dataset format.

The world is a square of side ``extent`` centred on the origin. A rounded
square loop road is kept free; extruded convex polygons (blocks, elevated
slabs and poles) fill the rest.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon, box

from .geometry import Pose2, transform_cloud

FORMAT_VERSION = 1


class CollisionError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    vertices: np.ndarray  # (V, 2), counter-clockwise, convex
    z_min: float
    z_max: float

    def to_dict(self) -> dict:
        return {"vertices": np.round(self.vertices, 6).tolist(),
                "z_min": self.z_min, "z_max": self.z_max}

    @classmethod
    def from_dict(cls, d) -> Obstacle:
        return cls(np.asarray(d["vertices"], dtype=np.float64), float(d["z_min"]), float(d["z_max"]))


@dataclass(frozen=True)
class WorldParams:
    extent: float = 100.0
    loop_half_size: float = 30.0
    corner_radius: float = 10.0
    road_half_width: float = 6.0
    block_density: float = 0.8
    pole_density: float = 1.0
    elevated_fraction: float = 0.2


@dataclass
class WorldModel:
    params: WorldParams
    obstacles: list[Obstacle]
    seed: int

    @property
    def extent(self) -> float:
        return self.params.extent

    def centerline(self) -> LineString:
        return loop_centerline(self.params)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "params": asdict(self.params),
                "obstacles": [o.to_dict() for o in self.obstacles]}

    @classmethod
    def from_dict(cls, d) -> WorldModel:
        return cls(WorldParams(**d["params"]), [Obstacle.from_dict(o) for o in d["obstacles"]],
                   int(d["seed"]))


@dataclass(frozen=True)
class ScanConfig:
    beams: int = 360
    rings: int = 8
    ring_heights: tuple[float, ...] | None = None  # sensor frame z, metres
    sensor_height: float = 1.8
    max_range: float = 60.0
    range_noise_std: float = 0.02
    dropout_prob: float = 0.01

    def __post_init__(self):
        if self.beams < 8:
            raise ValueError("beams must be >= 8")
        if self.max_range <= 0 or self.range_noise_std < 0:
            raise ValueError("max_range must be > 0 and range_noise_std >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.ring_heights is None:
            object.__setattr__(self, "ring_heights",
                               tuple(np.linspace(-1.5, 2.5, self.rings).round(6).tolist()))
        elif len(self.ring_heights) != self.rings:
            raise ValueError("ring_heights must have one entry per ring")
        else:
            object.__setattr__(self, "ring_heights", tuple(float(h) for h in self.ring_heights))


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    cloud: np.ndarray
    pose: Pose2


@dataclass
class Dataset:
    world: WorldModel
    frames: list[FrameRecord]
    scan: ScanConfig = field(default_factory=ScanConfig)
    seeds: dict = field(default_factory=dict)

    @property
    def poses(self) -> np.ndarray:
        return np.array([f.pose.as_array() for f in self.frames]).reshape(-1, 3)

    @property
    def clouds(self) -> list[np.ndarray]:
        return [f.cloud for f in self.frames]

    def __len__(self):
        return len(self.frames)


def loop_centerline(params: WorldParams) -> LineString:
    """Counter-clockwise rounded-square loop centreline."""
    h, r = params.loop_half_size, params.corner_radius
    ring = box(-(h - r), -(h - r), h - r, h - r).buffer(r, quad_segs=64)
    ring = shapely.geometry.polygon.orient(ring, 1.0)
    return LineString(ring.exterior.coords)


def _regular_polygon(cx, cy, radius, n=8) -> np.ndarray:
    a = 2 * np.pi * np.arange(n) / n
    return np.stack([cx + radius * np.cos(a), cy + radius * np.sin(a)], axis=1)


def _rect(x0, y0, x1, y1) -> np.ndarray:
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def generate_world(seed: int = 0, params: WorldParams = WorldParams()) -> WorldModel:
    """Random street-like layout around a guaranteed free loop corridor."""
    p = params
    half = p.extent / 2
    if p.extent < 20:
        raise ValueError(f"extent must be >= 20 m, got {p.extent}")
    if p.corner_radius <= p.road_half_width or p.corner_radius > p.loop_half_size:
        raise ValueError("corner_radius must exceed road_half_width and not exceed loop_half_size")
    if p.loop_half_size + p.road_half_width >= half:
        raise ValueError("loop corridor does not fit inside the world extent")
    rng = np.random.default_rng(seed)
    corridor = loop_centerline(p).buffer(p.road_half_width + 0.25)
    walk = 1.5
    obstacles: list[Obstacle] = []

    def add_block(x0, y0, x1, y1):
        if x1 - x0 < 1.0 or y1 - y0 < 1.0 or rng.random() > p.block_density:
            return
        mx, my = rng.uniform(0.3, 1.5, size=2)
        x0, x1, y0, y1 = x0 + mx, x1 - mx, y0 + my, y1 - my
        if x1 - x0 < 0.5 or y1 - y0 < 0.5:
            return
        if rng.random() < p.elevated_fraction:
            z0, z1 = 2.6, float(rng.uniform(4.0, 6.0))
        else:
            z0, z1 = 0.0, float(rng.uniform(2.5, 15.0))
        verts = _rect(x0, y0, x1, y1)
        if not Polygon(verts).intersects(corridor):
            obstacles.append(Obstacle(verts, z0, z1))

    # inner blocks
    inner = p.loop_half_size - p.road_half_width - walk
    if inner > 2:
        n = max(1, int(round(2 * inner / 9.0)))
        edges = np.linspace(-inner, inner, n + 1)
        for i in range(n):
            for j in range(n):
                add_block(edges[i], edges[j], edges[i + 1], edges[j + 1])
    # outer band, split into lots of random length along each side
    outer = p.loop_half_size + p.road_half_width + walk
    if half - outer > 2:
        for side in range(4):
            pos = -half
            while pos < half - 2:
                step = float(rng.uniform(6.0, 14.0))
                a, b = pos, min(pos + step, half)
                lots = {0: (a, -half, b, -outer), 1: (outer, a, half, b),
                        2: (a, outer, b, half), 3: (-half, a, -outer, b)}
                add_block(*lots[side])
                pos = b
    # poles along both road edges
    line = loop_centerline(p)
    length = line.length
    if p.pole_density > 0:
        for side in (-1, 1):
            s = float(rng.uniform(0, 10))
            while s < length:
                radius = float(rng.uniform(0.15, 0.35))
                offset = side * (p.road_half_width + 0.6 + radius)
                (x, y), (tx, ty) = _point_and_tangent(line, s)
                cx, cy = x - ty * offset, y + tx * offset
                poly = _regular_polygon(cx, cy, radius)
                if (not Polygon(poly).intersects(corridor)
                        and not any(Polygon(o.vertices).intersects(Polygon(poly)) for o in obstacles)):
                    obstacles.append(Obstacle(poly, 0.0, float(rng.uniform(3.0, 6.0))))
                s += float(rng.uniform(8.0, 20.0)) / p.pole_density
    world = WorldModel(p, obstacles, seed)
    validate_world(world)
    return world


def validate_world(world: WorldModel) -> None:
    half = world.extent / 2
    bounds = box(-half, -half, half, half)
    for i, o in enumerate(world.obstacles):
        poly = Polygon(o.vertices)
        if poly.area <= 0.01:
            raise ValueError(f"obstacle {i} is degenerate (area {poly.area:.4f} m^2)")
        if not bounds.covers(poly):
            raise ValueError(f"obstacle {i} leaves the world extent")


def _point_and_tangent(line: LineString, s: float, ds: float = 0.05):
    L = line.length
    a = line.interpolate((s - ds) % L)
    b = line.interpolate((s + ds) % L)
    c = line.interpolate(s % L)
    t = np.array([b.x - a.x, b.y - a.y])
    return (c.x, c.y), t / np.linalg.norm(t)


def points_in_obstacles(world: WorldModel, xy) -> np.ndarray:
    """Boolean mask: which points lie inside (or on) any obstacle footprint."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    inside = np.zeros(len(xy), dtype=bool)
    for o in world.obstacles:
        v = o.vertices
        e = np.roll(v, -1, axis=0) - v
        rel = xy[:, None, :] - v[None, :, :]
        cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
        inside |= np.all(cross >= 0, axis=1)
    return inside


def _edges(world: WorldModel, height: float) -> np.ndarray:
    segs = [np.concatenate([o.vertices, np.roll(o.vertices, -1, axis=0)], axis=1)
            for o in world.obstacles if o.z_min <= height <= o.z_max]
    return np.concatenate(segs, axis=0) if segs else np.zeros((0, 4))


def cast_rays(origin, angles, edges, max_range) -> np.ndarray:
    """Exact distance to the nearest segment hit along each ray (inf on miss)."""
    angles = np.asarray(angles, dtype=np.float64)
    out = np.full(angles.shape, np.inf)
    if len(edges) == 0:
        return out
    d = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (B, 2)
    p0 = edges[:, :2] - np.asarray(origin)[None, :]
    s = edges[:, 2:] - edges[:, :2]  # (S, 2)
    denom = d[:, None, 0] * s[None, :, 1] - d[:, None, 1] * s[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p0[None, :, 0] * s[None, :, 1] - p0[None, :, 1] * s[None, :, 0]) / denom
        u = (p0[None, :, 0] * d[:, None, 1] - p0[None, :, 1] * d[:, None, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t > 0) & (u >= 0) & (u <= 1) & (t <= max_range)
    t = np.where(hit, t, np.inf)
    return t.min(axis=1)


def simulate_scan(world: WorldModel, pose: Pose2, cfg: ScanConfig = ScanConfig(),
                  rng_seed=0) -> np.ndarray:
    """Simulate one sweep; points are returned in the sensor frame."""
    if points_in_obstacles(world, [[pose.x, pose.y]])[0]:
        raise CollisionError(f"pose in collision: {pose}")
    rng = np.random.default_rng(rng_seed)
    local = 2 * np.pi * np.arange(cfg.beams) / cfg.beams
    parts = []
    for z in cfg.ring_heights:
        r = cast_rays((pose.x, pose.y), local + pose.yaw, _edges(world, cfg.sensor_height + z),
                      cfg.max_range)
        noise = rng.standard_normal(cfg.beams) * cfg.range_noise_std
        keep = rng.random(cfg.beams) >= cfg.dropout_prob
        valid = np.isfinite(r) & keep
        rr = r[valid] + noise[valid]
        a = local[valid]
        parts.append(np.stack([rr * np.cos(a), rr * np.sin(a), np.full(rr.shape, z)], axis=1))
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))


def generate_trajectory(world: WorldModel, length: int, speed: float = 0.2, seed: int = 0,
                        direction: int = 1, lane_offset: float = 0.0,
                        wander: float = 1.0) -> list[Pose2]:
    """Smooth collision-free drive along the loop corridor.

    ``direction`` is +1 (counter-clockwise) or -1. A low-frequency lateral
    wander of amplitude ``wander`` is added around ``lane_offset``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    p = world.params
    if abs(lane_offset) + wander > p.road_half_width - 0.5:
        raise ValueError("no feasible path: lateral offset leaves the road corridor")
    line = world.centerline()
    L = line.length
    rng = np.random.default_rng(seed)
    s0 = float(rng.uniform(0, L))
    wavelength = float(rng.uniform(40.0, 80.0))
    phase = float(rng.uniform(0, 2 * np.pi))
    # one extra sample so the heading of the last pose uses a forward difference
    s = s0 + direction * speed * np.arange(length + 1)
    off = lane_offset + wander * np.sin(2 * np.pi * s / wavelength + phase)
    xy = np.empty((length + 1, 2))
    for i, si in enumerate(s):
        (x, y), (tx, ty) = _point_and_tangent(line, si % L)
        xy[i] = (x - ty * off[i], y + tx * off[i])
    if length == 1:
        (tx, ty) = _point_and_tangent(line, s0 % L)[1]
        yaws = np.array([math.atan2(direction * ty, direction * tx)])
    else:
        dxy = np.diff(xy, axis=0)
        yaws = np.arctan2(dxy[:, 1], dxy[:, 0])
    poses = [Pose2(x, y, a) for (x, y), a in zip(xy[:length], yaws)]
    if length > 1:
        dyaw = np.abs(np.diff(np.unwrap(yaws)))
        if dyaw.max() > 0.2:
            raise ValueError(f"no feasible path: yaw step {dyaw.max():.3f} rad > 0.2 at this speed")
    if points_in_obstacles(world, xy[:length]).any():
        raise CollisionError("no feasible path: trajectory collides with an obstacle")
    return poses


def simulate_frames(world: WorldModel, poses, cfg: ScanConfig = ScanConfig(), scan_seed: int = 0,
                    dt: float = 0.1, workers: int = 1) -> list[FrameRecord]:
    """Scan every pose; per-frame seeds make output independent of ``workers``."""
    def one(i):
        return simulate_scan(world, poses[i], cfg, np.random.SeedSequence([scan_seed, i]))

    idx = range(len(poses))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            clouds = list(ex.map(one, idx))
    else:
        clouds = [one(i) for i in idx]
    return [FrameRecord(i, round(i * dt, 6), c, p) for i, (c, p) in enumerate(zip(clouds, poses))]


def write_dataset(path, dataset: Dataset) -> Path:
    """Write the on-disk layout (world.json, poses.csv, clouds/*.bin, meta.json)."""
    root = Path(path)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    world = dataset.world.to_dict()
    world["seeds"] = dict(sorted(dataset.seeds.items()))
    (root / "world.json").write_text(json.dumps(world, indent=1, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_id", "timestamp", "x", "y", "yaw"])
    for f in dataset.frames:
        w.writerow([f.frame_id, f"{f.timestamp:.9g}", f"{f.pose.x:.9g}", f"{f.pose.y:.9g}",
                    f"{f.pose.yaw:.9g}"])
        (root / "clouds" / f"{f.frame_id:06d}.bin").write_bytes(
            np.ascontiguousarray(f.cloud, dtype="<f4").tobytes())
    (root / "poses.csv").write_text(buf.getvalue())
    scan = asdict(dataset.scan)
    scan["ring_heights"] = list(scan["ring_heights"])
    meta = {"format_version": FORMAT_VERSION, "frames": len(dataset.frames),
            "points": int(sum(len(f.cloud) for f in dataset.frames)), "scan": scan}
    (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(path) -> Dataset:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{root}: unsupported dataset format version {meta.get('format_version')}")
    world_d = json.loads((root / "world.json").read_text())
    frames = []
    with open(root / "poses.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame_id", "timestamp", "x", "y", "yaw"]:
            raise ValueError(f"{root}/poses.csv: bad header {reader.fieldnames}")
        for row in reader:
            fid = int(row["frame_id"])
            raw = np.frombuffer((root / "clouds" / f"{fid:06d}.bin").read_bytes(), dtype="<f4")
            if raw.size % 3:
                raise ValueError(f"cloud {fid:06d}.bin size is not a multiple of 3 floats")
            frames.append(FrameRecord(fid, float(row["timestamp"]),
                                      raw.reshape(-1, 3).astype(np.float64),
                                      Pose2(float(row["x"]), float(row["y"]), float(row["yaw"]))))
    ids = [f.frame_id for f in frames]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError(f"{root}: frame ids are not strictly increasing")
    scan = meta["scan"]
    scan["ring_heights"] = tuple(scan["ring_heights"])
    return Dataset(WorldModel.from_dict(world_d), frames, ScanConfig(**scan),
                   world_d.get("seeds", {}))


def world_cloud(frames) -> np.ndarray:
    """All frames' points in the world frame (for visual inspection)."""
    return np.concatenate([transform_cloud(f.pose, f.cloud) for f in frames], axis=0)
