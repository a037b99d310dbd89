"""Static figures for evaluation reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import EvalReport  # noqa: E402

SUCCESS_COLOR = (1.0, 0.0, 0.0, 1.0)
FAILURE_COLOR = (0.0, 0.0, 0.0, 1.0)
YAW_CAP_DEG = 5.0


def success_colors(report: EvalReport) -> np.ndarray:
    """RGBA per frame: red where localization succeeded, black otherwise."""
    out = np.empty((len(report.success), 4))
    out[:] = FAILURE_COLOR
    out[report.success] = SUCCESS_COLOR
    return out


def trajectory_figure(report: EvalReport):
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(report.truth[:, 0], report.truth[:, 1], color="0.8", lw=1, zorder=1, label="ground truth")
    ax.scatter(report.pred[:, 0], report.pred[:, 1], c=success_colors(report), s=6, zorder=2)
    ax.scatter(report.truth[:1, 0], report.truth[:1, 1], marker="*", s=160, color="tab:blue",
               zorder=3, label="start")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"SR {report.sr:.1f}%  (red: < {report.sr_trans:g} m and < {report.sr_yaw:g} deg)")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return fig


def yaw_heatmap_figure(report: EvalReport, cap: float = YAW_CAP_DEG):
    """Ground-truth path colored by yaw error, color scale clamped at ``cap`` degrees."""
    fig, ax = plt.subplots(figsize=(6.6, 6))
    sc = ax.scatter(report.truth[:, 0], report.truth[:, 1], c=np.minimum(report.errors_y, cap),
                    cmap="viridis", vmin=0.0, vmax=cap, s=8)
    fig.colorbar(sc, ax=ax, label="yaw error [deg]")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    fig.tight_layout()
    return fig


def write_figures(report: EvalReport, out_dir, fmt: str = "png") -> list[Path]:
    if fmt not in ("png", "svg"):
        raise ValueError(f"unsupported figure format {fmt!r} (use png or svg)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, make in (("trajectory", trajectory_figure), ("yaw_heatmap", yaw_heatmap_figure)):
        fig = make(report)
        path = out / f"{name}.{fmt}"
        # fixed metadata keeps repeated renders byte-stable
        meta = {"Software": None} if fmt == "png" else {"Date": None}
        fig.savefig(path, dpi=120, metadata=meta)
        plt.close(fig)
        paths.append(path)
    return paths
