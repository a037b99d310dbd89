"""Small configurations and checks shared by the test modules."""
import numpy as np
import torch

from bevloc.augment import AugmentConfig
from bevloc.bev import BevConfig
from bevloc.diffusion import DenoiserConfig
from bevloc.features import FeatureNetConfig
from bevloc.pipeline import ModelConfig
from bevloc.synthworld import ScanConfig, generate_trajectory, simulate_frames


def tiny_config(vit_dim=16, use_mfa=True, tuple_len=3) -> ModelConfig:
    return ModelConfig(
        bev=BevConfig(half_window=12.8, grid_resolution=0.8, output_side=32),
        features=FeatureNetConfig(rotation_count=2, image_side=32, backbone_widths=(4, 8, 8, 8),
                                  vit_dim=vit_dim, vit_depth=1, vit_heads=2, output_dim=16,
                                  use_mfa=use_mfa),
        denoiser=DenoiserConfig(layers=1, heads=2, latent_dim=16, sequence_len=tuple_len,
                                step_embed_dim=8, feature_dim=16, ff_mult=2),
        augment=AugmentConfig(min_points=10),
    )


def tiny_drive(world, n=24, seed=1):
    poses = generate_trajectory(world, n, seed=seed)
    frames = simulate_frames(world, poses, ScanConfig(beams=120), scan_seed=seed)
    return [f.cloud for f in frames], poses


def fd_relative_error(net, loss_fn, h, seed, per_tensor=3):
    """Relative error between analytic and central-difference gradients on sampled weights."""
    net.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    for p in net.parameters():
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + h
                up = loss_fn().item()
                flat[j] = old - h
                down = loss_fn().item()
                flat[j] = old
            numeric.append((up - down) / (2 * h))
            analytic.append(p.grad.view(-1)[j].item())
    a, n = np.array(analytic), np.array(numeric)
    return np.linalg.norm(a - n) / np.linalg.norm(a)
