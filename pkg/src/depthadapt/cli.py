"""Command-line driver: run, eval, ba, synth, plot-export.

Everything runs unattended from a flat key=value config; exit codes are
0 on success, 1 on runtime failure, and 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys

from .config import ConfigError, load_config
from .depthnet import load_checkpoint
from .keyframes import KeyframeStore, encode_keyframe
from .losses import validation_loss
from .metrics import SCALING_MODES, Trajectory, ate_rmse, evaluate_depth, \
    map_depth_error
from .pipeline import build_source, register_from_sparse, run_adaptation, \
    synthetic_spec, write_manifest
from .refine import apply_ba_result, assign_hosts, build_ba, cull_map, solve_ba
from .report import export_all
from .synthetic import SyntheticScene

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    result = run_adaptation(cfg)
    print(f"run complete: {result.keyframes} keyframes, "
          f"{len(result.ba_passes)} refinement passes, artifacts in {result.out_dir}")
    if result.depth_eval is not None:
        print(f"mean percent correct {result.depth_eval.mean_percent_correct:.3f}, "
              f"mean e_si {result.depth_eval.mean_e_si:.5f}")
    if result.ate is not None:
        print(f"trajectory ATE {result.ate:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    if args.scaling is not None:
        if args.scaling not in SCALING_MODES:
            raise ConfigError(f"unknown scaling mode {args.scaling!r}, "
                              f"have {sorted(SCALING_MODES)}")
        cfg.values["eval.scaling"] = args.scaling
    ckpt_path = args.checkpoint or cfg["run.checkpoint"]
    if not ckpt_path:
        raise ConfigError("eval needs run.checkpoint in the config or --checkpoint")
    net, _ = load_checkpoint(ckpt_path)
    source = build_source(cfg)
    gts = [kf.gt_depth for kf in source.frames]
    if not source.frames or any(g is None for g in gts):
        raise ValueError("source provides no ground-truth depth to evaluate against")
    preds = [net.predict(kf.image) for kf in source.frames]
    evald = evaluate_depth(preds, gts, cfg.depth_eval())
    out_dir = args.out or cfg["run.out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    per_frame = os.path.join(out_dir, "metrics_depth.tsv")
    with open(per_frame, "w", encoding="utf-8") as fh:
        fh.write("frame\tpercent_correct\te_si\tvalid_pixels\n")
        for kf, fr in zip(source.frames, evald.frames):
            fh.write(f"{kf.id}\t{fr.percent_correct:.6f}\t{fr.e_si:.8f}"
                     f"\t{fr.valid_pixels}\n")
    summary = os.path.join(out_dir, "metrics_summary.tsv")
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("key\tvalue\n")
        fh.write(f"frames\t{len(source.frames)}\n")
        fh.write(f"mean_percent_correct\t{evald.mean_percent_correct:.6f}\n")
        fh.write(f"mean_e_si\t{evald.mean_e_si:.8f}\n")
        fh.write(f"scaling\t{cfg['eval.scaling']}\n")
        if evald.scale is not None:
            fh.write(f"global_scale\t{evald.scale:.8f}\n")
    print(f"evaluated {len(source.frames)} frames: "
          f"percent correct {evald.mean_percent_correct:.3f}, "
          f"e_si {evald.mean_e_si:.5f} -> {per_frame}")
    return EXIT_OK


def cmd_ba(args) -> int:
    cfg = load_config(args.config)
    source = build_source(cfg)
    store = KeyframeStore()
    for kf in source.frames:
        register_from_sparse(store, kf, source.intrinsics)
    if len(store.keyframes) < 2:
        raise ValueError("standalone refinement needs at least two keyframes")
    net = None
    if cfg["run.checkpoint"]:
        net, _ = load_checkpoint(cfg["run.checkpoint"])
        depth_maps = {}
        for kid in store.ordered_ids():
            kf = store.keyframes[kid]
            depth_maps[kid] = net.predict(kf.image)
            validation_loss(kf, depth_maps[kid])
        assign_hosts(store)
        report = cull_map(store, depth_maps, source.intrinsics, cfg.cull())
        print(f"culling: kept {report.kept}, culled {report.culled}, "
              f"skipped {report.skipped}")
    else:
        for kf in store.keyframes.values():
            kf.last_val_loss = 0.0  # no predictor: host defaults to lowest id
        assign_hosts(store)
    options = cfg.ba_options()
    problem = build_ba(store, source.intrinsics, options)
    if not problem.landmarks:
        raise ValueError("no landmarks with enough observations to adjust")
    result = solve_ba(problem, options)
    apply_ba_result(store, result)
    accepted = sum(1 for r in result.iterations if r.accepted)
    print(f"refined {len(problem.landmarks)} landmarks over {len(problem.kf_ids)} "
          f"keyframes: cost {result.initial_cost:.6g} -> {result.final_cost:.6g} "
          f"({accepted} accepted steps, {problem.dropped} dropped)")
    try:
        print(f"map depth e_si {map_depth_error(store, source.intrinsics):.5f}")
    except ValueError:
        pass
    if source.gt_trajectory is not None and len(source.gt_trajectory) >= 3:
        est = Trajectory.from_pairs(
            [(store.keyframes[k].timestamp, store.keyframes[k].pose)
             for k in store.ordered_ids()])
        ate = ate_rmse(est, source.gt_trajectory, align=cfg["eval.align"])
        print(f"trajectory ATE ({cfg['eval.align']}) {ate:.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg["run.out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    n = args.frames if args.frames is not None else cfg["source.frames"]
    scene = SyntheticScene(synthetic_spec(cfg, cfg["source.scene"]), n)
    log_path = os.path.join(out_dir, "keyframes.log")
    gt_path = os.path.join(out_dir, "groundtruth.txt")
    gt_traj = scene.gt_trajectory()
    with open(log_path, "wb") as log, open(gt_path, "w", encoding="utf-8") as gt:
        gt.write("# timestamp tx ty tz qx qy qz qw\n")
        for i in range(n):
            kf = scene.keyframe(i)
            record = encode_keyframe(kf)
            log.write(struct.pack("<I", len(record)))
            log.write(record)
            t, pose = gt_traj[i]
            qw, qx, qy, qz = pose.q
            tx, ty, tz = pose.t
            gt.write(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                     f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")
    artifacts = {"keyframes.log": log_path, "groundtruth.txt": gt_path}
    write_manifest(out_dir, artifacts, "ok", cfg["source.seed"])
    print(f"wrote {n} keyframes to {log_path}")
    return EXIT_OK


def cmd_plot_export(args) -> int:
    written = export_all(args.run_dir, args.out)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthadapt",
        description="Online depth adaptation with map culling and photometric "
                    "bundle adjustment.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full adaptation loop from a config file")
    p_run.add_argument("config")
    p_run.set_defaults(fn=cmd_run)

    p_eval = sub.add_parser("eval", help="depth metrics for a checkpoint on a source")
    p_eval.add_argument("config")
    p_eval.add_argument("--checkpoint", help="overrides run.checkpoint")
    p_eval.add_argument("--out", help="overrides run.out_dir")
    p_eval.add_argument("--scaling", default=None, help="overrides eval.scaling")
    p_eval.set_defaults(fn=cmd_eval)

    p_ba = sub.add_parser("ba", help="standalone cull + bundle adjust on a source")
    p_ba.add_argument("config")
    p_ba.set_defaults(fn=cmd_ba)

    p_synth = sub.add_parser("synth", help="render a scene to a replayable log")
    p_synth.add_argument("config")
    p_synth.add_argument("--frames", type=int, default=None,
                         help="overrides source.frames")
    p_synth.add_argument("--out", help="overrides run.out_dir")
    p_synth.set_defaults(fn=cmd_synth)

    p_plot = sub.add_parser("plot-export",
                            help="delimited tables + figures from run artifacts")
    p_plot.add_argument("run_dir")
    p_plot.add_argument("--out", default=None)
    p_plot.set_defaults(fn=cmd_plot_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
