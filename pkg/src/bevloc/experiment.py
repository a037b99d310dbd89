"""Desk-scale end-to-end experiment on the synthetic world.

Trains on one counter-clockwise loop of the corridor and evaluates on a
separate drive along the same route: different trajectory seed (so a
different lateral wander), speed and scan noise. The full model is also
scored on two harder drives, reversed heading and a fixed lane offset; those
numbers are reported alongside but are not part of the pass/fail gate.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .pipeline import BevLocNet, EvalReport, TrainConfig, desk_config, evaluate, load_model, train
from .synthworld import (
    Dataset, ScanConfig, generate_trajectory, generate_world, read_dataset, simulate_frames,
    write_dataset,
)

log = logging.getLogger(__name__)

# fields that change the trained weights; evaluation-only fields are left out of the cache key
TRAIN_FIELDS = ("world_seed", "train_frames", "train_seed", "epochs", "warmup_epochs",
                "batch_size", "peak_lr", "rotation_count", "seed")


@dataclass(frozen=True)
class DeskSetup:
    world_seed: int = 7
    train_frames: int = 1500
    test_frames: int = 500
    train_seed: int = 1
    test_seed: int = 2
    test_direction: int = 1
    test_lane_offset: float = 0.0
    stress_drives: tuple = ((-1, 0.0), (1, 1.5))
    epochs: int = 40
    warmup_epochs: int = 2
    batch_size: int = 16
    peak_lr: float = 5e-4
    rotation_count: int = 4
    steps: int = 10
    seed: int = 0

    def train_key(self) -> dict:
        return {k: getattr(self, k) for k in TRAIN_FIELDS}


def _drive_seeds(setup: DeskSetup, seed: int, direction: int, lane_offset: float) -> dict:
    return {"world": setup.world_seed, "trajectory": seed, "scan": 100 + seed,
            "direction": direction, "lane_offset": lane_offset}


def _drive(path: Path, setup: DeskSetup, frames: int, seed: int, direction: int,
           lane_offset: float) -> Dataset:
    """Load the drive at ``path`` if its recorded seeds match, else simulate and write it."""
    seeds = _drive_seeds(setup, seed, direction, lane_offset)
    if (path / "meta.json").exists():
        recorded = json.loads((path / "world.json").read_text()).get("seeds")
        if recorded == seeds and json.loads((path / "meta.json").read_text())["frames"] == frames:
            return read_dataset(path)
    world = generate_world(setup.world_seed)
    loop = world.centerline().length
    scan = ScanConfig()
    poses = generate_trajectory(world, frames, loop / frames, seed, direction=direction,
                                lane_offset=lane_offset)
    write_dataset(path, Dataset(world, simulate_frames(world, poses, scan, seeds["scan"]), scan, seeds))
    return read_dataset(path)


def make_split(setup: DeskSetup, root) -> tuple[Dataset, Dataset]:
    """Generate (or reload) the training and test datasets under ``root``."""
    root = Path(root)
    return (_drive(root / "train", setup, setup.train_frames, setup.train_seed, 1, 0.0),
            _drive(root / "test", setup, setup.test_frames, setup.test_seed, setup.test_direction,
                   setup.test_lane_offset))


def stress_sets(setup: DeskSetup, root) -> dict[str, Dataset]:
    """The harder, ungated evaluation drives keyed by a short name."""
    return {f"dir{d:+d}_offset{o:g}": _drive(Path(root) / f"stress_dir{d:+d}_offset{o:g}", setup,
                                             setup.test_frames, setup.test_seed, d, o)
            for d, o in setup.stress_drives}


def evaluate_checkpoint(setup: DeskSetup, path, test_set: Dataset, out_dir) -> EvalReport:
    report = evaluate(test_set.clouds, test_set.poses, load_model(path), steps=setup.steps,
                      seed=setup.seed, frame_ids=[f.frame_id for f in test_set.frames])
    report.write(out_dir)
    return report


def run_variant(setup: DeskSetup, train_set: Dataset, test_set: Dataset, out_dir, *,
                use_mfa: bool = True, augment: bool = True) -> EvalReport:
    """Train one model variant (cached by checkpoint) and evaluate it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "model.bvdl"
    cfg = desk_config(use_mfa=use_mfa, rotation_count=setup.rotation_count)
    tcfg = TrainConfig(epochs=setup.epochs, batch_size=setup.batch_size,
                       warmup_epochs=setup.warmup_epochs, peak_lr=setup.peak_lr,
                       seed=setup.seed, augment=augment)
    done = False
    if path.exists():
        meta = load_model(path).meta
        stored = meta.get("extra", {}).get("setup") or {}
        done = (len(meta.get("history", [])) >= setup.epochs
                and {k: stored.get(k) for k in TRAIN_FIELDS} == setup.train_key())
    if not done:
        torch.manual_seed(setup.seed)
        model = BevLocNet(cfg)
        train(train_set.clouds, train_set.poses, model, tcfg, checkpoint_path=path,
              extra_meta={"setup": setup.train_key(), "use_mfa": use_mfa, "augment": augment})
    return evaluate_checkpoint(setup, path, test_set, out)


def random_guess_median(extent: float, truth, n: int = 200_000, seed: int = 0) -> float:
    """Median position error of guessing uniformly inside the world square."""
    rng = np.random.default_rng(seed)
    truth = np.asarray(truth)[:, :2]
    guess = rng.uniform(-extent / 2, extent / 2, size=(n, 2))
    pick = truth[rng.integers(0, len(truth), n)]
    return float(np.median(np.linalg.norm(guess - pick, axis=1)))


def run_desk_experiment(root, setup: DeskSetup = DeskSetup(), ablations: bool = True) -> dict:
    root = Path(root)
    tr, te = make_split(setup, root / "data")
    results = {"full": run_variant(setup, tr, te, root / "full").summary()}
    if ablations:
        results["no_augmentation"] = run_variant(setup, tr, te, root / "no_aug", augment=False).summary()
        results["no_mfa"] = run_variant(setup, tr, te, root / "no_mfa", use_mfa=False).summary()
    stress = {}
    for name, ds in stress_sets(setup, root / "data").items():
        stress[name] = evaluate_checkpoint(setup, root / "full" / "model.bvdl", ds,
                                           root / "full" / name).summary()
    results["full_stress"] = stress
    results["random_guess_median_e_t"] = random_guess_median(tr.world.extent, te.poses)
    (root / "summary.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n")
    return results
