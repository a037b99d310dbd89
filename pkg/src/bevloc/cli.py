"""``bevloc`` command-line entry point.

Every subcommand accepts ``--config FILE``, a flat JSON object whose keys are
flag names (``"sr-trans"`` or ``"sr_trans"``). Values resolve as
flag > config file > ``BEVLOC_SEED`` (seed only) > built-in default.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

log = logging.getLogger("bevloc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


# name -> list of (flag, kwargs); defaults live here so config files can override them
HELP = {
    "gen-world": "generate a synthetic loop-road world",
    "gen-data": "drive the world and record LiDAR frames with poses",
    "make-bev": "render BEV density images for a dataset",
    "train": "train a localization model",
    "eval": "localize a dataset with a checkpoint and write a report",
    "plot": "draw trajectory and yaw-error figures from a report",
    "selftest": "run quick built-in consistency checks",
}

OPTIONS: dict[str, list[tuple[str, dict]]] = {
    "gen-world": [
        ("--out", dict(type=str, default="world.json", help="output JSON path")),
        ("--seed", dict(type=int, default=0, help="world seed")),
        ("--extent", dict(type=float, default=100.0, help="square side in metres")),
        ("--block-density", dict(type=float, default=0.8)),
        ("--pole-density", dict(type=float, default=1.0)),
    ],
    "gen-data": [
        ("--out", dict(type=str, default="data", help="dataset directory")),
        ("--seed", dict(type=int, default=0, help="default for the three seeds below")),
        ("--world-seed", dict(type=int, default=None)),
        ("--traj-seed", dict(type=int, default=None)),
        ("--scan-seed", dict(type=int, default=None)),
        ("--frames", dict(type=int, default=1500)),
        ("--speed", dict(type=float, default=None, help="metres per frame (default: one loop, at most 0.2)")),
        ("--direction", dict(type=int, choices=(1, -1), default=1)),
        ("--lane-offset", dict(type=float, default=0.0)),
        ("--beams", dict(type=int, default=360)),
        ("--noise", dict(type=float, default=0.02, help="range noise std in metres")),
        ("--dropout", dict(type=float, default=0.01)),
        ("--workers", dict(type=int, default=1)),
    ],
    "make-bev": [
        ("--data", dict(type=str, required=True, help="dataset directory")),
        ("--out", dict(type=str, default="bev")),
        ("--half-window", dict(type=float, default=25.0)),
        ("--grid-resolution", dict(type=float, default=0.4)),
        ("--density-clamp", dict(type=int, default=10)),
        ("--side", dict(type=int, default=128)),
        ("--png", dict(action=argparse.BooleanOptionalAction, default=False,
                       help="also write 8-bit PNGs")),
    ],
    "train": [
        ("--data", dict(type=str, required=True)),
        ("--out", dict(type=str, default="model.bvdl")),
        ("--preset", dict(choices=("desk", "full"), default="desk")),
        ("--epochs", dict(type=int, default=150)),
        ("--batch-size", dict(type=int, default=16)),
        ("--warmup-epochs", dict(type=int, default=5)),
        ("--peak-lr", dict(type=float, default=5e-4)),
        ("--weight-decay", dict(type=float, default=1e-2)),
        ("--tuple-spacing", dict(type=int, default=2)),
        ("--augment", dict(action=argparse.BooleanOptionalAction, default=True)),
        ("--mfa", dict(action=argparse.BooleanOptionalAction, default=True)),
        ("--rotation-count", dict(type=int, default=None, help="default: 4 (desk) / 8 (full)")),
        ("--max-steps", dict(type=int, default=None)),
        ("--seed", dict(type=int, default=0)),
    ],
    "eval": [
        ("--checkpoint", dict(type=str, required=True)),
        ("--data", dict(type=str, required=True)),
        ("--out", dict(type=str, default="eval")),
        ("--steps", dict(type=int, default=10, help="DDIM steps (10 or 15 typical)")),
        ("--sr-trans", dict(type=float, default=2.0)),
        ("--sr-yaw", dict(type=float, default=5.0)),
        ("--tuple-spacing", dict(type=int, default=2)),
        ("--seed", dict(type=int, default=0)),
    ],
    "plot": [
        ("--report", dict(type=str, required=True, help="directory holding per_frame.csv")),
        ("--out", dict(type=str, default=None, help="default: the report directory")),
        ("--format", dict(choices=("png", "svg"), default="png")),
        ("--sr-trans", dict(type=float, default=2.0)),
        ("--sr-yaw", dict(type=float, default=5.0)),
    ],
    "selftest": [
        ("--seed", dict(type=int, default=0)),
    ],
}


def build_parser() -> _Parser:
    parser = _Parser(prog="bevloc", description="BEV diffusion localization toolkit")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS, help=HELP[name])
        p.add_argument("--config", type=str, help="flat JSON config file")
        for flag, kw in opts:
            kw = {k: v for k, v in kw.items() if k not in ("default", "required")}
            p.add_argument(flag, **kw)
    return parser


def _defaults(command: str) -> dict:
    return {flag[2:].replace("-", "_"): kw.get("default") for flag, kw in OPTIONS[command]}


def resolve_config(command: str, flags: dict, env=None) -> dict:
    """Merge built-in defaults, ``BEVLOC_SEED``, the config file and explicit flags."""
    env = os.environ if env is None else env
    cfg = _defaults(command)
    if "seed" in cfg and env.get("BEVLOC_SEED"):
        try:
            cfg["seed"] = int(env["BEVLOC_SEED"])
        except ValueError:
            raise UsageError(f"BEVLOC_SEED must be an integer, got {env['BEVLOC_SEED']!r}") from None
    path = flags.get("config")
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        for key, value in data.items():
            k = key.replace("-", "_")
            if k not in cfg:
                raise UsageError(f"config file {path}: unknown option {key!r} for {command}")
            cfg[k] = value
    cfg.update({k: v for k, v in flags.items() if k != "config"})
    missing = [flag for flag, kw in OPTIONS[command]
               if kw.get("required") and cfg.get(flag[2:].replace("-", "_")) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    return cfg


# --------------------------------------------------------------------------- commands

def cmd_gen_world(c: dict) -> None:
    from .synthworld import WorldParams, generate_world

    world = generate_world(c["seed"], WorldParams(extent=c["extent"], block_density=c["block_density"],
                                                  pole_density=c["pole_density"]))
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(world.to_dict(), indent=1, sort_keys=True) + "\n")
    log.info("wrote %s (%d obstacles)", out, len(world.obstacles))


def cmd_gen_data(c: dict) -> None:
    from .synthworld import (Dataset, ScanConfig, generate_trajectory, generate_world, simulate_frames,
                             write_dataset)

    seeds = {k: c[f"{k}_seed"] if c[f"{k}_seed"] is not None else c["seed"]
             for k in ("world", "traj", "scan")}
    world = generate_world(seeds["world"])
    speed = c["speed"] or min(world.centerline().length / c["frames"], 0.2)
    poses = generate_trajectory(world, c["frames"], speed, seeds["traj"], direction=c["direction"],
                                lane_offset=c["lane_offset"])
    scan = ScanConfig(beams=c["beams"], range_noise_std=c["noise"], dropout_prob=c["dropout"])
    frames = simulate_frames(world, poses, scan, seeds["scan"], workers=c["workers"])
    root = write_dataset(c["out"], Dataset(world, frames, scan,
                                           {"world": seeds["world"], "trajectory": seeds["traj"],
                                            "scan": seeds["scan"]}))
    log.info("wrote %d frames to %s", len(frames), root)


def cmd_make_bev(c: dict) -> None:
    from .bev import BevConfig, rasterize, save_f32, save_png, voxel_filter
    from .synthworld import read_dataset

    cfg = BevConfig(half_window=c["half_window"], grid_resolution=c["grid_resolution"],
                    density_clamp=c["density_clamp"], output_side=c["side"])
    ds = read_dataset(c["data"])
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    for f in ds.frames:
        img = rasterize(voxel_filter(f.cloud, cfg.grid_resolution), cfg, f.pose)
        save_f32(img, out / f"{f.frame_id:06d}.f32")
        if c["png"]:
            save_png(img, out / f"{f.frame_id:06d}.png")
    log.info("rasterized %d frames to %s", len(ds), out)


def cmd_train(c: dict) -> None:
    import torch

    from .pipeline import BevLocNet, TrainConfig, desk_config, full_config, train
    from .synthworld import read_dataset

    if c["preset"] == "full":
        cfg = full_config()
        if c["rotation_count"] is not None or not c["mfa"]:
            cfg = replace(cfg, features=replace(cfg.features, use_mfa=c["mfa"],
                                                rotation_count=c["rotation_count"] or 8))
    else:
        cfg = desk_config(use_mfa=c["mfa"], rotation_count=c["rotation_count"] or 4)
    tcfg = TrainConfig(epochs=c["epochs"], batch_size=c["batch_size"], warmup_epochs=c["warmup_epochs"],
                       peak_lr=c["peak_lr"], weight_decay=c["weight_decay"],
                       tuple_len=cfg.denoiser.sequence_len, tuple_spacing=c["tuple_spacing"],
                       seed=c["seed"], augment=c["augment"])
    ds = read_dataset(c["data"])
    torch.manual_seed(c["seed"])
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    res = train(ds.clouds, ds.poses, BevLocNet(cfg), tcfg, checkpoint_path=out, max_steps=c["max_steps"],
                extra_meta={"cli": c})
    log.info("final loss %.4f, checkpoint %s", res.history[-1]["loss"], out)


def cmd_eval(c: dict) -> None:
    from .pipeline import evaluate, load_model
    from .synthworld import read_dataset

    loaded = load_model(c["checkpoint"])
    ds = read_dataset(c["data"])
    report = evaluate(ds.clouds, ds.poses, loaded, steps=c["steps"], seed=c["seed"],
                      spacing=c["tuple_spacing"], frame_ids=[f.frame_id for f in ds.frames],
                      sr_trans=c["sr_trans"], sr_yaw=c["sr_yaw"])
    report.write(c["out"])
    s = report.summary()
    print(f"e_t {s['e_t']:.3f} m  e_y {s['e_y']:.3f} deg  SR {s['sr']:.1f}%  "
          f"median e_t {s['median_e_t']:.3f} m  {s['hz']:.1f} Hz")


def cmd_plot(c: dict) -> None:
    from .pipeline import EvalReport
    from .plotting import write_figures

    src = Path(c["report"])
    csv_path = src / "per_frame.csv" if src.is_dir() else src
    report = EvalReport.read_csv(csv_path, c["sr_trans"], c["sr_yaw"])
    for p in write_figures(report, c["out"] or csv_path.parent, c["format"]):
        log.info("wrote %s", p)


def cmd_selftest(c: dict) -> int:
    from .selftest import run

    results = run(c["seed"])
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


COMMANDS = {"gen-world": cmd_gen_world, "gen-data": cmd_gen_data, "make-bev": cmd_make_bev,
            "train": cmd_train, "eval": cmd_eval, "plot": cmd_plot, "selftest": cmd_selftest}


def run(argv=None, env=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "log_level")}
        cfg = resolve_config(ns.command, flags, env)
    except UsageError as exc:
        sys.stderr.write(exc.usage or parser.format_usage())
        sys.stderr.write(f"bevloc: error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, ns.log_level), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    log.info("%s config: %s", ns.command, json.dumps(cfg, sort_keys=True))
    try:
        code = COMMANDS[ns.command](cfg)
    except KeyboardInterrupt:
        sys.stderr.write("bevloc: interrupted\n")
        return EXIT_RUNTIME
    except Exception as exc:  # reported, not re-raised: the exit code carries the failure
        log.debug("traceback", exc_info=True)
        sys.stderr.write(f"bevloc: {ns.command} failed: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
