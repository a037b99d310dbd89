"""Training, evaluation metrics, checkpointing and the estimator front-end."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from . import checkpoint as ckpt
from .augment import AugmentConfig, augmented_view
from .bev import BevConfig, rasterize, voxel_filter
from .diffusion import (
    Denoiser, DenoiserConfig, NoiseSchedule, PoseNormalizer, add_noise, build_schedule,
    ddim_sample, epsilon_loss,
)
from .features import FeatureNet, FeatureNetConfig
from .geometry import Pose2, wrap_angle

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- configs

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    warmup_epochs: int = 5
    peak_lr: float = 5e-4
    weight_decay: float = 1e-2
    tuple_len: int = 3
    tuple_spacing: int = 2
    seed: int = 0
    augment: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.batch_size < 1 or self.tuple_len < 1 or self.tuple_spacing < 1:
            raise ValueError("batch_size, tuple_len and tuple_spacing must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    bev: BevConfig = field(default_factory=BevConfig)
    features: FeatureNetConfig = field(default_factory=FeatureNetConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    diffusion_steps: int = 100
    schedule: str = "cosine"
    sample_clip: float | None = 1.5

    def __post_init__(self):
        if self.features.image_side != self.bev.output_side:
            raise ValueError("feature net image_side must equal the BEV output side")
        if self.features.output_dim != self.denoiser.feature_dim:
            raise ValueError("feature output_dim must equal denoiser feature_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        feats = dict(d["features"])
        feats["backbone_widths"] = tuple(feats["backbone_widths"])
        return cls(BevConfig(**d["bev"]), FeatureNetConfig(**feats), DenoiserConfig(**d["denoiser"]),
                   AugmentConfig(**d["augment"]), d["diffusion_steps"], d["schedule"],
                   d.get("sample_clip"))


def full_config() -> ModelConfig:
    return ModelConfig()


def desk_config(use_mfa: bool = True, rotation_count: int = 4, tuple_len: int = 3) -> ModelConfig:
    """Reduced widths and a 0.8 m grid so training fits on one CPU core."""
    return ModelConfig(
        bev=BevConfig(half_window=25.0, grid_resolution=0.8, density_clamp=10, output_side=64),
        features=FeatureNetConfig(rotation_count=rotation_count, image_side=64,
                                  backbone_widths=(8, 16, 32, 32), patch_size=4, vit_dim=64,
                                  vit_depth=2, vit_heads=4, output_dim=128, use_mfa=use_mfa),
        denoiser=DenoiserConfig(layers=4, heads=4, latent_dim=128, sequence_len=tuple_len,
                                step_embed_dim=32, feature_dim=128, ff_mult=2),
    )


# --------------------------------------------------------------------------- model

class BevLocNet(nn.Module):
    """Feature network + conditional noise predictor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.features = FeatureNet(cfg.features)
        self.denoiser = Denoiser(cfg.denoiser)

    def encode_frames(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, N, S, S)`` BEV images -> ``(B, N, F)`` descriptors."""
        b, n = images.shape[:2]
        return self.features(images.reshape(b * n, *images.shape[2:])).reshape(b, n, -1)

    def forward(self, noisy, k, images):
        return self.denoiser(noisy, k, self.encode_frames(images))


# --------------------------------------------------------------------------- data

def make_tuples(n_frames, N: int = 3, spacing: int = 2) -> list[tuple[int, ...]]:
    """Index tuples ``(i - (N-1)s, ..., i - s, i)`` for every valid anchor ``i``."""
    n = n_frames if isinstance(n_frames, int) else len(n_frames)
    span = (N - 1) * spacing
    if n < span + 1:
        raise ValueError(f"need at least {span + 1} frames for tuples of {N} at spacing {spacing}, got {n}")
    return [tuple(range(i - span, i + 1, spacing)) for i in range(span, n)]


def clipped_tuples(n: int, N: int, spacing: int) -> list[tuple[int, ...]]:
    """One tuple per frame; indices before the sequence start are clamped to 0."""
    span = (N - 1) * spacing
    return [tuple(max(j, 0) for j in range(i - span, i + 1, spacing)) for i in range(n)]


class FrameStore:
    """Raw BEV images plus lazily built local maps for augmentation."""

    def __init__(self, clouds, poses, bev_cfg: BevConfig, aug_cfg: AugmentConfig):
        self.clouds = [np.asarray(c, dtype=np.float64) for c in clouds]
        self.poses = [p if isinstance(p, Pose2) else Pose2.from_array(p) for p in poses]
        self.bev_cfg, self.aug_cfg = bev_cfg, aug_cfg
        self.images = np.stack([
            rasterize(voxel_filter(c, bev_cfg.grid_resolution), bev_cfg).pixels for c in self.clouds
        ]) if self.clouds else np.zeros((0, bev_cfg.output_side, bev_cfg.output_side), np.float32)

    def __len__(self):
        return len(self.clouds)

    def sample(self, i: int, augment: bool, seed) -> tuple[np.ndarray, Pose2]:
        if augment:
            img, label = augmented_view(self.clouds, self.poses, i, self.aug_cfg, self.bev_cfg, seed)
            return img.pixels, label
        return self.images[i], self.poses[i]


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warm-up to ``peak`` then single-cycle cosine decay to zero.

    ``step`` is 0-based; the last warm-up step runs at exactly ``peak`` and the
    final step at zero.
    """
    t = step + 1
    if t <= warmup_steps:
        return peak * t / warmup_steps
    frac = (t - warmup_steps) / max(total_steps - warmup_steps, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: BevLocNet
    normalizer: PoseNormalizer
    schedule: NoiseSchedule
    history: list[dict]
    checkpoint: Path | None = None


def _build_batch(store: FrameStore, tuples, batch_idx, epoch: int, cfg: TrainConfig,
                 normalizer: PoseNormalizer):
    images, labels = [], []
    for b in batch_idx:
        for pos, i in enumerate(tuples[b]):
            # counter-based per-sample seed: independent of worker split
            rng = np.random.default_rng([cfg.seed, epoch, int(b), pos])
            use_aug = cfg.augment and rng.random() < store.aug_cfg.apply_probability
            img, label = store.sample(i, use_aug, [cfg.seed, epoch, int(b), pos, 1])
            images.append(img)
            labels.append(label.as_array())
    n = len(tuples[0])
    imgs = np.stack(images).reshape(len(batch_idx), n, *images[0].shape)
    t0 = normalizer.encode(np.array(labels)).reshape(len(batch_idx), n, 4)
    return imgs, t0


def train(clouds, poses, model: BevLocNet, cfg: TrainConfig, normalizer: PoseNormalizer | None = None,
          checkpoint_path=None, store: FrameStore | None = None, max_steps: int | None = None,
          extra_meta: dict | None = None) -> TrainResult:
    """Minimise the L1 noise-prediction loss with AdamW and a warm-up cosine schedule.

    ``clouds``/``poses`` are consecutive frames of one trajectory (sensor-frame
    clouds, world poses). A checkpoint is written after every epoch when
    ``checkpoint_path`` is given.
    """
    mcfg = model.cfg
    torch.manual_seed(cfg.seed)
    poses_arr = np.array([p.as_array() if isinstance(p, Pose2) else np.asarray(p) for p in poses])
    if len(poses_arr) == 0:
        raise ValueError("training set is empty")
    if store is None:
        store = FrameStore(clouds, poses_arr, mcfg.bev, mcfg.augment)
    normalizer = normalizer or PoseNormalizer.fit(poses_arr)
    schedule = build_schedule(mcfg.diffusion_steps, mcfg.schedule)
    tuples = make_tuples(len(store), cfg.tuple_len, cfg.tuple_spacing)
    steps_per_epoch = math.ceil(len(tuples) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = steps_per_epoch * cfg.warmup_epochs
    opt = torch.optim.AdamW(model.parameters(), lr=0.0, weight_decay=cfg.weight_decay)
    dtype = next(model.parameters()).dtype
    history: list[dict] = []
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tuples))
        gen = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg.seed, epoch]).generate_state(1)[0]))
        losses = []
        t_start = time.perf_counter()
        for s in range(steps_per_epoch):
            batch_idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            imgs, t0 = _build_batch(store, tuples, batch_idx, epoch, cfg, normalizer)
            imgs = torch.as_tensor(imgs, dtype=dtype)
            t0 = torch.as_tensor(t0, dtype=dtype)
            k = torch.randint(1, schedule.K + 1, (len(batch_idx),), generator=gen)
            eps = torch.randn(t0.shape, generator=gen, dtype=torch.float64).to(dtype)
            noisy = add_noise(t0, k, eps, schedule)
            lr = lr_at(step, total, warmup, cfg.peak_lr)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = epsilon_loss(model(noisy, k, imgs), eps)
            if not torch.isfinite(loss):
                snap = {"epoch": epoch, "step": step, "lr": lr, "loss": float(loss),
                        "k": k.tolist(), "tuples": [list(tuples[b]) for b in batch_idx]}
                if checkpoint_path is not None:
                    Path(str(checkpoint_path) + ".diverged.json").write_text(json.dumps(snap, indent=1))
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: {snap}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "first_loss": losses[0],
                        "lr": lr, "seconds": time.perf_counter() - t_start})
        log.info("epoch %d/%d loss %.4f lr %.2e (%.1fs)", epoch + 1, cfg.epochs, history[-1]["loss"],
                 lr, history[-1]["seconds"])
        if checkpoint_path is not None:
            save_model(checkpoint_path, model, normalizer, schedule, history, cfg, extra_meta)
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    return TrainResult(model, normalizer, schedule, history,
                       Path(checkpoint_path) if checkpoint_path is not None else None)


# --------------------------------------------------------------------------- checkpoints

def save_model(path, model: BevLocNet, normalizer: PoseNormalizer, schedule: NoiseSchedule,
               history=(), train_cfg: TrainConfig | None = None, extra: dict | None = None) -> Path:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors["rng/torch"] = torch.get_rng_state()
    meta = {
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg) if train_cfg is not None else None,
        "normalizer": normalizer.to_dict(),
        "schedule": schedule.to_dict(),
        "history": list(history),
        "extra": extra or {},
    }
    return ckpt.save_checkpoint(path, tensors, meta)


@dataclass
class LoadedModel:
    model: BevLocNet
    normalizer: PoseNormalizer
    schedule: NoiseSchedule
    meta: dict


def load_model(path, expected: ModelConfig | None = None) -> LoadedModel:
    """Rebuild a model from a checkpoint.

    With ``expected`` the parameters are loaded into a model built from that
    configuration, so any architecture mismatch is reported per tensor.
    """
    tensors, meta = ckpt.load_checkpoint(path)
    for key in ("model_config", "normalizer", "schedule"):
        if key not in meta:
            raise ckpt.CheckpointError(f"{path}: header lacks field {key!r}")
    cfg = expected or ModelConfig.from_dict(meta["model_config"])
    model = BevLocNet(cfg)
    ckpt.load_into(model, tensors)
    model.eval()
    return LoadedModel(model, PoseNormalizer.from_dict(meta["normalizer"]),
                       NoiseSchedule.from_dict(meta["schedule"]), meta)


# --------------------------------------------------------------------------- inference + metrics

@torch.no_grad()
def predict_tuples(model: BevLocNet, images: np.ndarray, tuples, normalizer: PoseNormalizer,
                   schedule: NoiseSchedule, steps: int = 10, seed: int = 0,
                   batch_size: int = 64) -> np.ndarray:
    """Sample poses for every tuple; returns ``(T, N, 3)`` world poses."""
    model.eval()
    dtype = next(model.parameters()).dtype
    # descriptors are per frame, so compute each frame once
    needed = sorted({i for t in tuples for i in t})
    feats = {}
    for c in range(0, len(needed), batch_size):
        idx = needed[c:c + batch_size]
        f = model.features(torch.as_tensor(images[idx], dtype=dtype))
        feats.update(zip(idx, f))
    out = []
    n = len(tuples[0])
    for c in range(0, len(tuples), batch_size):
        chunk = tuples[c:c + batch_size]
        cond = torch.stack([torch.stack([feats[i] for i in t]) for t in chunk])
        sample = ddim_sample(lambda x, k: model.denoiser(x, k, cond), (len(chunk), n, 4), steps,
                             schedule, rng_seed=seed + c, dtype=dtype, clip=model.cfg.sample_clip)
        out.append(normalizer.decode(sample.double().numpy()))
    return np.concatenate(out, axis=0)


def pose_errors(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame position error (m) and wrapped absolute yaw error (deg)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    e_t = np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])
    e_y = np.degrees(np.abs(wrap_angle(pred[:, 2] - truth[:, 2])))
    return e_t, np.atleast_1d(e_y)


@dataclass
class EvalReport:
    e_t: float
    e_y: float
    sr: float
    median_e_t: float
    median_e_y: float
    frame_ids: np.ndarray
    truth: np.ndarray
    pred: np.ndarray
    errors_t: np.ndarray
    errors_y: np.ndarray
    success: np.ndarray
    hz: float = float("nan")
    steps: int = 10
    sr_trans: float = 2.0
    sr_yaw: float = 5.0

    @classmethod
    def from_predictions(cls, frame_ids, truth, pred, sr_trans=2.0, sr_yaw=5.0, hz=float("nan"),
                         steps=10) -> EvalReport:
        e_t, e_y = pose_errors(pred, truth)
        success = (e_t < sr_trans) & (e_y < sr_yaw)
        return cls(float(e_t.mean()), float(e_y.mean()), float(100.0 * success.mean()),
                   float(np.median(e_t)), float(np.median(e_y)), np.asarray(frame_ids),
                   np.asarray(truth, dtype=np.float64), np.asarray(pred, dtype=np.float64),
                   e_t, e_y, success, hz, steps, sr_trans, sr_yaw)

    def summary(self) -> dict:
        return {"e_t": self.e_t, "e_y": self.e_y, "sr": self.sr, "median_e_t": self.median_e_t,
                "median_e_y": self.median_e_y, "frames": int(len(self.frame_ids)), "hz": self.hz,
                "steps": self.steps, "sr_trans": self.sr_trans, "sr_yaw": self.sr_yaw}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True) + "\n")
        with open(out / "per_frame.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_id", "x", "y", "yaw", "pred_x", "pred_y", "pred_yaw", "e_t", "e_y", "success"])
            for i, fid in enumerate(self.frame_ids):
                w.writerow([int(fid), *(f"{v:.9g}" for v in self.truth[i]),
                            *(f"{v:.9g}" for v in self.pred[i]),
                            f"{self.errors_t[i]:.9g}", f"{self.errors_y[i]:.9g}", int(self.success[i])])

    @classmethod
    def read_csv(cls, path, sr_trans=2.0, sr_yaw=5.0) -> EvalReport:
        rows = list(csv.DictReader(open(path, newline="")))
        ids = [int(r["frame_id"]) for r in rows]
        truth = [[float(r[c]) for c in ("x", "y", "yaw")] for r in rows]
        pred = [[float(r[c]) for c in ("pred_x", "pred_y", "pred_yaw")] for r in rows]
        return cls.from_predictions(ids, truth, pred, sr_trans, sr_yaw)


def evaluate(clouds, poses, loaded: LoadedModel, steps: int = 10, seed: int = 0,
             tuple_len: int | None = None, spacing: int = 2, frame_ids=None,
             sr_trans: float = 2.0, sr_yaw: float = 5.0, batch_size: int = 64) -> EvalReport:
    """Localize the last frame of every tuple and score it."""
    model = loaded.model
    cfg = model.cfg
    n_tuple = tuple_len or cfg.denoiser.sequence_len
    truth = np.array([p.as_array() if isinstance(p, Pose2) else np.asarray(p) for p in poses])
    start = time.perf_counter()
    images = np.stack([rasterize(voxel_filter(c, cfg.bev.grid_resolution), cfg.bev).pixels
                       for c in clouds])
    tuples = make_tuples(len(images), n_tuple, spacing)
    pred = predict_tuples(model, images, tuples, loaded.normalizer, loaded.schedule, steps, seed,
                          batch_size)[:, -1]
    elapsed = time.perf_counter() - start
    anchors = [t[-1] for t in tuples]
    ids = np.arange(len(truth)) if frame_ids is None else np.asarray(frame_ids)
    return EvalReport.from_predictions(ids[anchors], truth[anchors], pred, sr_trans, sr_yaw,
                                       hz=len(tuples) / elapsed, steps=steps)


def single_tuple_latency(loaded: LoadedModel, images: np.ndarray, steps: int = 10, repeats: int = 5) -> float:
    """Median wall-clock seconds to localize one tuple from its BEV images."""
    n = loaded.model.cfg.denoiser.sequence_len
    times = []
    for r in range(repeats):
        t = time.perf_counter()
        predict_tuples(loaded.model, images[:n], [tuple(range(n))], loaded.normalizer,
                       loaded.schedule, steps, seed=r)
        times.append(time.perf_counter() - t)
    return float(np.median(times))


# --------------------------------------------------------------------------- estimator

class BEVLocalizer(BaseEstimator):
    """Scikit-learn style wrapper: ``fit`` on a trajectory, ``predict`` poses.

    ``X`` is a sequence of sensor-frame point clouds in temporal order and
    ``y`` the matching ``(n, 3)`` world poses ``(x, y, yaw)``. ``predict``
    returns one pose per input frame; frames before the first complete tuple
    reuse the earliest frame for the missing history.
    """

    _estimator_type = "regressor"

    def __init__(self, model_config=None, epochs=40, batch_size=16, warmup_epochs=5, peak_lr=5e-4,
                 weight_decay=1e-2, tuple_spacing=2, augment=True, inference_steps=10,
                 random_state=0, checkpoint_path=None):
        self.model_config = model_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.peak_lr = peak_lr
        self.weight_decay = weight_decay
        self.tuple_spacing = tuple_spacing
        self.augment = augment
        self.inference_steps = inference_steps
        self.random_state = random_state
        self.checkpoint_path = checkpoint_path

    def _train_config(self) -> TrainConfig:
        cfg = self.model_config or desk_config()
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           warmup_epochs=self.warmup_epochs, peak_lr=self.peak_lr,
                           weight_decay=self.weight_decay, tuple_len=cfg.denoiser.sequence_len,
                           tuple_spacing=self.tuple_spacing, seed=self.random_state,
                           augment=self.augment)

    def fit(self, X, y):
        y = _check_poses(y, len(X))
        cfg = self.model_config or desk_config()
        tcfg = self._train_config()
        torch.manual_seed(self.random_state)
        model = BevLocNet(cfg)
        res = train(X, y, model, tcfg, checkpoint_path=self.checkpoint_path)
        self.model_ = res.model
        self.normalizer_ = res.normalizer
        self.schedule_ = res.schedule
        self.history_ = res.history
        return self

    @classmethod
    def from_checkpoint(cls, path, **params) -> BEVLocalizer:
        loaded = load_model(path)
        est = cls(model_config=loaded.model.cfg, **params)
        est.model_, est.normalizer_, est.schedule_ = loaded.model, loaded.normalizer, loaded.schedule
        est.history_ = loaded.meta.get("history", [])
        return est

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        images = np.stack([rasterize(voxel_filter(c, cfg.bev.grid_resolution), cfg.bev).pixels for c in X])
        tuples = clipped_tuples(len(images), cfg.denoiser.sequence_len, self.tuple_spacing)
        return predict_tuples(self.model_, images, tuples, self.normalizer_, self.schedule_,
                              self.inference_steps, self.random_state)[:, -1]

    def score(self, X, y) -> float:
        """Fraction of frames localized within 2 m and 5 degrees."""
        y = _check_poses(y, len(X))
        e_t, e_y = pose_errors(self.predict(X), y)
        return float(np.mean((e_t < 2.0) & (e_y < 5.0)))


def _check_poses(y, n: int) -> np.ndarray:
    from sklearn.utils import check_array

    y = check_array(y, ensure_2d=True, dtype=np.float64)
    if y.shape != (n, 3):
        raise ValueError(f"poses must have shape ({n}, 3), got {y.shape}")
    return y
