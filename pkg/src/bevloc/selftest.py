"""Quick built-in invariant checks, runnable without the test suite."""
from __future__ import annotations

import math
from collections import Counter

import numpy as np
import torch

from .bev import BevConfig, rasterize
from .diffusion import add_noise, build_schedule, ddim_sample
from .features import MFA, FeatureNetConfig, rotate_image
from .geometry import Pose2, compose, inverse
from .pipeline import EvalReport


def _pose_inverse(rng):
    worst = 0.0
    for _ in range(200):
        p = Pose2(*rng.uniform(-100, 100, 2), rng.uniform(-math.pi, math.pi))
        e = compose(p, inverse(p)).as_array()
        worst = max(worst, float(np.abs(e).max()))
    return worst < 1e-9, f"max |p (+) p^-1| = {worst:.2e}"


def _raster(rng):
    cfg = BevConfig(half_window=5.0, grid_resolution=0.5, density_clamp=4, output_side=20)
    bad = 0
    for _ in range(10):
        pts = np.c_[rng.uniform(-6, 6, (300, 2)), rng.uniform(-1, 1, 300)]
        img = rasterize(pts, cfg).pixels
        counts = Counter()
        for x, y, _z in pts:
            if -5 <= x < 5 and -5 < y <= 5:
                counts[(math.floor((5 - y) / 0.5), math.floor((x + 5) / 0.5))] += 1
        ref = np.zeros((20, 20))
        for (r, c), n in counts.items():
            ref[r, c] = min(n, 4)
        if ref.max() > 0:
            ref /= ref.max()
        bad += int(not np.array_equal(img, ref.astype(np.float32)))
    return bad == 0, f"{bad}/10 clouds differ from per-cell counting"


def _ddim(rng):
    s = build_schedule(100)
    t0 = torch.as_tensor(rng.uniform(-1, 1, (100, 3, 4)))
    ab = s.alpha_bar

    def oracle(t, k):
        return (t - math.sqrt(ab[k]) * t0) / math.sqrt(1 - ab[k])

    err = max(float((ddim_sample(oracle, t0.shape, n, s, dtype=torch.float64) - t0).abs().max())
              for n in (10, 15, 100))
    return err < 1e-5, f"max recovery error {err:.2e}"


def _forward(rng):
    s = build_schedule(100)
    t0 = np.array([0.5, -0.25, 0.8, 0.1])
    worst = 0.0
    n = 20000
    for k in (1, 50, 100):
        x = add_noise(t0, k, rng.standard_normal((n, 4)), s)
        sd = math.sqrt(1 - s.alpha_bar[k])
        z = np.abs(x.mean(0) - math.sqrt(s.alpha_bar[k]) * t0) / (sd / math.sqrt(n))
        worst = max(worst, float(z.max()))
    return worst < 4.0, f"largest mean deviation {worst:.2f} standard errors"


def _equivariance(rng):
    torch.manual_seed(int(rng.integers(1 << 31)))
    cfg = FeatureNetConfig(rotation_count=4, image_side=16, backbone_widths=(4, 4, 4, 4))
    mfa = MFA(cfg).double().eval()
    x = torch.as_tensor(rng.random((1, 1, 16, 16)))
    with torch.no_grad():
        err = float((mfa(rotate_image(x, math.pi / 2)) - rotate_image(mfa(x), math.pi / 2)).abs().max())
    return err < 1e-9, f"quarter-turn commutation error {err:.2e}"


def _metrics(_rng):
    r = EvalReport.from_predictions([0, 1, 2], [[0, 0, 0], [0, 0, math.radians(179)], [0, 0, 0]],
                                    [[3, 4, 0], [0, 0, math.radians(-179)], [2.0, 0, 0]])
    ok = (r.errors_t[0] == 5.0 and abs(r.errors_y[1] - 2.0) < 1e-9 and not r.success[2])
    return ok, f"e_t={r.errors_t[0]:g} e_y={r.errors_y[1]:.6f} boundary success={bool(r.success[2])}"


CHECKS = [
    ("pose inverse", _pose_inverse),
    ("rasterizer vs counting", _raster),
    ("DDIM oracle recovery", _ddim),
    ("forward-process mean", _forward),
    ("MFA quarter-turn equivariance", _equivariance),
    ("metric edge cases", _metrics),
]


def run(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        ok, detail = fn(np.random.default_rng(seed))
        results.append((name, bool(ok), detail))
    return results
