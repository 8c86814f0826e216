"""Command line front end: datagen -> prep -> train -> eval -> drive.

Exit codes: 0 success, 1 operational failure (missing or malformed inputs),
2 bad usage or configuration, 3 a requested check or drive did not pass
(gradient check over tolerance, vehicle left the lane).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import autodiff as ad
from . import datapipe as dp
from . import models
from . import simworld as sw
from .config import ConfigError, RunConfig
from .control import ModelController

OK, FAIL_OP, FAIL_CONFIG, FAIL_CHECK = 0, 1, 2, 3


def _add_config_args(p):
    p.add_argument("--config", metavar="FILE",
                   help="key = value settings file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   dest="overrides", help="override one setting (repeatable)")


def _cfg_from(args, base=None) -> RunConfig:
    cfg = base.copy() if base is not None else None
    if getattr(args, "config", None):
        if cfg is not None:
            cfg.apply_overrides(
                line for line in Path(args.config).read_text().splitlines()
                if line.strip() and not line.strip().startswith("#"))
        else:
            cfg = RunConfig.from_file(args.config)
    if cfg is None:
        cfg = RunConfig()
    cfg.apply_overrides(args.overrides)
    return cfg


def _vehicle(cfg) -> sw.VehicleParams:
    return sw.VehicleParams(cfg.wheelbase_m, cfg.steer_ratio, cfg.a_max_mps2)


def _camera(cfg) -> sw.CameraModel:
    return sw.CameraModel(cfg.render_side, cfg.fov_deg, cfg.cam_pitch_deg,
                          cfg.cam_height_m)


# ---------------------------------------------------------------------------
# subcommands

def cmd_datagen(args) -> int:
    cfg = _cfg_from(args)
    manifest = sw.gen_dataset(args.out, cfg)
    n = cfg.n_roads * cfg.frames_per_road * 3
    print(f"wrote {manifest} ({n} rows, {cfg.n_roads} trips)")
    return OK


def cmd_prep(args) -> int:
    cfg = _cfg_from(args)
    report = dp.prep_dataset(args.manifest, args.out, cfg,
                             image_root=args.image_root)
    for line in report.lines():
        print(line)
    return OK


def cmd_train(args) -> int:
    cfg = _cfg_from(args)
    data = Path(args.data)
    train_shard = dp.read_shard(data / "train.shard")
    val_shard = dp.read_shard(data / "val.shard")
    resume_state = None
    if args.resume:
        state_path = Path(args.out) / "train.state"
        if not state_path.exists():
            print(f"error: no state file at {state_path}", file=sys.stderr)
            return FAIL_OP
        resume_state = models.read_state(state_path)
    model = models.build_model(cfg)
    summary = models.train(model, train_shard, val_shard, cfg,
                           out_dir=args.out, resume_state=resume_state,
                           max_steps=args.max_steps, log=print)
    best = summary["best_val"]
    print(f"done: epochs {summary['epochs_run']} best val angle mae "
          f"{'n/a' if best is None else f'{best:.4f}'}")
    return OK


def cmd_eval(args) -> int:
    model = models.load_checkpoint(args.checkpoint)
    cfg = _cfg_from(args, base=model.cfg)
    shard = dp.read_shard(args.shard)
    metrics = models.evaluate(model, shard, cfg)
    for key in sorted(metrics):
        value = metrics[key]
        print(f"{key} {value:.6f}" if isinstance(value, float)
              else f"{key} {value}")
    return OK


def _parse_perturbations(specs):
    out = []
    for spec in specs:
        try:
            t, dy = spec.split(":")
            out.append(sw.Perturbation(float(t), float(dy)))
        except ValueError:
            raise ConfigError(f"perturbation {spec!r} is not T:OFFSET") from None
    return out


def cmd_drive(args) -> int:
    if args.oracle:
        cfg = _cfg_from(args)
        controller = None
    else:
        model = models.load_checkpoint(args.checkpoint)
        cfg = _cfg_from(args, base=model.cfg)
        controller = ModelController(model, cfg)
    road = sw.gen_road(args.road_seed if args.road_seed is not None
                       else cfg.road_seed, cfg.road_length_m,
                       lane_half_width_m=cfg.lane_half_width_m)
    vp = _vehicle(cfg)
    if controller is None:
        controller = sw.PurePursuitDriver(
            road, vp, lookahead_m=cfg.lookahead_m,
            a_lat_max_mps2=cfg.a_lat_max_mps2, cruise_mps=cfg.cruise_speed_mps)
    trace = sw.run_episode(
        road, controller,
        duration_s=args.duration if args.duration else cfg.duration_s,
        dt_s=1.0 / cfg.sim_fps, vp=vp, cam=_camera(cfg),
        init_speed_mps=cfg.init_speed_mps,
        perturbations=_parse_perturbations(args.perturb))
    print(trace.summary_line())
    if args.trace:
        trace.write_csv(args.trace)
        print(f"trace written to {args.trace}")
    return FAIL_CHECK if trace.off_road else OK


def cmd_gradcheck(args) -> int:
    cfg = _cfg_from(args)
    kinds = ("base", "command", "mmmt") if args.kind == "all" else (args.kind,)
    all_passed = True
    for kind in kinds:
        kcfg = cfg.with_values(model=kind)
        model = models.build_model(kcfg)
        batch = models.gradcheck_batch(kind, kcfg)
        if args.corrupt_conv_grad:
            with ad.corrupt_conv_backward():
                report = models.grad_check_model(
                    model, batch, tolerance=args.tolerance,
                    coords_per_param=args.coords, fd_step=args.fd_step)
        else:
            report = models.grad_check_model(model, batch,
                                             tolerance=args.tolerance,
                                             coords_per_param=args.coords,
                                             fd_step=args.fd_step)
        print(f"{kind}: {'pass' if report.passed else 'FAIL'}")
        for line in report.lines():
            print(line)
        all_passed = all_passed and report.passed
    return OK if all_passed else FAIL_CHECK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drivestack",
        description="end-to-end steering and speed stack on synthetic roads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="drive the expert and dump a dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    _add_config_args(p)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("prep", help="label, synthesize, split, write shards")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="shard directory")
    p.add_argument("--image-root", help="base dir for image paths "
                   "(default: manifest's directory)")
    _add_config_args(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a model on prepared shards")
    p.add_argument("--data", required=True, help="directory with train/val shards")
    p.add_argument("--out", required=True, help="run directory for checkpoints")
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory's state file")
    p.add_argument("--max-steps", type=int, default=None)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a shard")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shard", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("drive", help="closed-loop episode on a fresh road")
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint", help="multi-task checkpoint to drive")
    who.add_argument("--oracle", action="store_true",
                     help="drive the ground-truth expert instead")
    p.add_argument("--road-seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, metavar="SECONDS")
    p.add_argument("--perturb", metavar="T:OFFSET", action="append", default=[],
                   help="lateral impulse of OFFSET meters at T seconds "
                        "(repeatable)")
    p.add_argument("--trace", metavar="FILE", help="write the episode CSV here")
    _add_config_args(p)
    p.set_defaults(func=cmd_drive)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--kind", choices=("base", "command", "mmmt", "all"),
                   default="all")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=20,
                   help="coordinates probed per parameter tensor")
    p.add_argument("--fd-step", type=float, default=1e-6,
                   help="finite-difference step; wide nets need a fine one "
                        "or relu kinks pollute the numeric slope")
    p.add_argument("--corrupt-conv-grad", action="store_true",
                   help="negative control: mis-scale one gradient path")
    _add_config_args(p)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return FAIL_CONFIG
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return FAIL_OP


if __name__ == "__main__":
    sys.exit(main())
