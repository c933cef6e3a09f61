"""End-to-end adaptation runs: producer, trainer/controller, and BA worker.

A run wires three roles over ordered channels. The producer renders or
loads keyframes and publishes them; the store subscriber registers each
keyframe and any newly referenced landmarks (position from the first
observation's ray and depth estimate, exactly what a sparse front end
hands over); the controller decides per keyframe whether to fine-tune,
validate, or trigger a global map refinement. With the synchronous
scheduler (default) runs are bit-reproducible from (config, seed); the
asynchronous scheduler trades that for a non-blocking trainer.

Artifacts land under the configured output directory with a manifest of
sha256 checksums. Wall-clock time appears only in the event log, so the
metrics files compare equal across repeated seeded runs.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .continual import RegularizerConfig, ReplayBuffer, TrainerState, fine_tune_step, \
    restore_trainer, trainer_extensions
from .controller import AdaptationController, BAScheduler, EventLog
from .depthnet import DepthNet, NetSpec, load_checkpoint, save_checkpoint
from .geometry import Intrinsics
from .keyframes import Channel, Keyframe, KeyframeStore, MapPoint, decode_keyframe, \
    encode_graph, encode_keyframe, read_message_log
from .losses import LossWeights, validation_loss
from .metrics import DepthEvalResult, Trajectory, ate_rmse, evaluate_depth, map_depth_error
from .refine import apply_ba_result, assign_hosts, build_ba, cull_map, solve_ba
from .synthetic import SyntheticScene, scene_preset
from .tum import TumConfig, load_sequence

MANIFEST_NAME = "manifest.tsv"


def register_from_sparse(store: KeyframeStore, kf: Keyframe, K: Intrinsics) -> None:
    """Add a keyframe, creating map points first seen in it.

    A new landmark's position is backprojected from its first observation
    through the keyframe's estimated pose, matching what a sparse mapper
    would triangulate and hand over.
    """
    for p in kf.sparse:
        if p.map_point_id not in store.map_points:
            ray = np.array([(p.u - K.cx) / K.fx, (p.v - K.cy) / K.fy, 1.0])
            pos = kf.pose.apply(ray * p.depth)
            store.add_map_point(MapPoint(id=p.map_point_id, position=pos, observations={}))
    store.add_keyframe(kf)


@dataclass
class KeyframeSource:
    frames: list[Keyframe]
    intrinsics: Intrinsics
    gt_trajectory: Trajectory | None = None


def synthetic_spec(cfg: RunConfig, scene_name: str):
    v = cfg.values
    return scene_preset(scene_name, seed=v["source.seed"],
                        image_noise=v["source.image_noise"],
                        depth_noise=v["source.depth_noise"],
                        pose_noise=v["source.pose_noise"],
                        grid_size=v["source.grid_size"], max_fts=v["source.max_fts"],
                        texture_freq=(v["source.texture_freq_lo"],
                                      v["source.texture_freq_hi"]))


def _default_intrinsics(width: int, height: int) -> Intrinsics:
    # Message logs carry no calibration; assume the synthetic camera model.
    return Intrinsics(fx=60.0, fy=60.0, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


def _tum_intrinsics(width: int, height: int) -> Intrinsics:
    # Standard TUM RGB-D camera at 640x480, scaled to the actual image size.
    s = width / 640.0
    return Intrinsics(fx=525.0 * s, fy=525.0 * s, cx=(width - 1) / 2.0,
                      cy=(height - 1) / 2.0, width=width, height=height)


def build_source(cfg: RunConfig) -> KeyframeSource:
    kind = cfg["source.kind"]
    n = cfg["source.frames"]
    if kind == "synthetic":
        scene = SyntheticScene(synthetic_spec(cfg, cfg["source.scene"]), n)
        frames = [scene.keyframe(i) for i in range(n)]
        gt = Trajectory.from_pairs(scene.gt_trajectory()) if n else None
        return KeyframeSource(frames=frames, intrinsics=scene.intrinsics, gt_trajectory=gt)
    if kind == "dataset":
        def tum_cfg(K):
            return TumConfig(directory=cfg["source.path"], intrinsics=K,
                             keyframe_stride=cfg["source.every"],
                             grid_size=cfg["source.grid_size"],
                             max_fts=cfg["source.max_fts"],
                             depth_noise=cfg["source.depth_noise"],
                             seed=cfg["source.seed"])
        K = _tum_intrinsics(640, 480)
        frames, _, gt_pairs = load_sequence(tum_cfg(K))
        if not frames:
            raise ValueError(f"dataset {cfg['source.path']} produced no keyframes")
        h, w = frames[0].image.shape
        if (w, h) != (K.width, K.height):
            # Non-standard image size: rescale the camera model and reload so
            # the sparse backprojections match the corrected intrinsics.
            K = _tum_intrinsics(w, h)
            frames, _, gt_pairs = load_sequence(tum_cfg(K))
        frames = frames[:n] if n else frames
        gt = Trajectory.from_pairs(gt_pairs) if gt_pairs else None
        return KeyframeSource(frames=frames, intrinsics=K, gt_trajectory=gt)
    if kind == "log":
        records = read_message_log(cfg["source.path"])
        frames = [decode_keyframe(r) for r in records]
        frames = frames[:n] if n else frames
        if not frames:
            raise ValueError(f"message log {cfg['source.path']} is empty")
        h, w = frames[0].image.shape
        return KeyframeSource(frames=frames, intrinsics=_default_intrinsics(w, h))
    raise ValueError(f"unknown source kind {kind!r}")


def pretrain(net: DepthNet, cfg: RunConfig) -> int:
    """Warm up the predictor on the pretraining scene; returns steps run.

    Stands in for the offline-trained weights an online run would normally
    start from, so it departs from the online recipe in three ways. No
    importance regularizer (there is nothing to preserve yet). A higher
    learning rate, since the fresh head sits several logits from
    scene-scale output and per-parameter steps are bounded by the rate.
    And a boosted sparse-depth weight on a denser supervision grid:
    from random weights the photometric term alone collapses into its
    zero-parallax optimum (predict far everywhere), which the handful of
    default-grid sparse points cannot counter.

    The rate ramps linearly over the first ``run.pretrain_warmup`` steps.
    Adam's first unwarmed steps are full-magnitude sign kicks; on some
    inits those push a large pixel mass into the sigmoid head's saturated
    tail before any anchor gradient can answer, and float32 leaves no
    gradient to climb back out with.
    """
    steps = cfg["run.pretrain_steps"]
    if steps <= 0:
        return 0
    tstate = TrainerState.init(net, RegularizerConfig(kind="none"),
                               lr=cfg["run.pretrain_lr"], beta1=cfg["optim.beta1"],
                               beta2=cfg["optim.beta2"], eps=cfg["optim.eps"])
    n_frames = min(30, max(2, steps))
    spec = synthetic_spec(cfg, cfg["run.pretrain_scene"])
    spec.grid_size = cfg["run.pretrain_grid"]
    scene = SyntheticScene(spec, n_frames)
    store = KeyframeStore()
    replay = ReplayBuffer(seed=cfg["replay.seed"] + 1)
    base = cfg.loss_weights()
    weights = LossWeights(alpha=base.alpha, lambda1=cfg["run.pretrain_lambda1"],
                          lambda2=base.lambda2,
                          smooth_on_disparity=base.smooth_on_disparity)
    peak_lr = cfg["run.pretrain_lr"]
    warmup = max(1, cfg["run.pretrain_warmup"])
    for step in range(steps):
        tstate.adam.lr = peak_lr * min(1.0, (step + 1) / warmup)
        i = step % n_frames
        if i not in store.keyframes:
            register_from_sparse(store, scene.keyframe(i), scene.intrinsics)
        kf = store.keyframes[i]
        batch = [(kf, store.neighbors(i))]
        if cfg["replay.enabled"]:
            for _ in range(cfg["replay.samples"]):
                rid = replay.sample(exclude=i)
                if rid is not None:
                    batch.append((store.keyframes[rid], store.neighbors(rid)))
        fine_tune_step(net, batch, scene.intrinsics, weights, tstate,
                       inner_iters=cfg["optim.inner_iters"])
        replay.add(i)
    return steps


@dataclass
class BAPass:
    index: int
    t: int
    kept: int
    culled: int
    culled_post: int
    skipped: int
    dropped: int
    initial_cost: float | None
    final_cost: float | None
    esi_before: float | None
    esi_after: float | None
    status: str = "ok"


@dataclass
class RunResult:
    out_dir: str
    keyframes: int = 0
    ba_passes: list[BAPass] = field(default_factory=list)
    depth_eval: DepthEvalResult | None = None
    ate: float | None = None
    artifacts: dict[str, str] = field(default_factory=dict)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str, artifacts: dict[str, str], status: str, seed) -> str:
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("key\tvalue\n")
        fh.write(f"status\t{status}\n")
        fh.write(f"seed\t{seed}\n")
        for name in sorted(artifacts):
            apath = artifacts[name]
            digest = _sha256(apath) if os.path.exists(apath) else "missing"
            fh.write(f"artifact:{name}\t{digest}\n")
    return path


def _safe_map_esi(store: KeyframeStore, K: Intrinsics) -> float | None:
    try:
        return map_depth_error(store, K)
    except ValueError:
        return None


class AdaptationRun:
    """One configured run; ``execute`` drives it to completion."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out_dir = cfg["run.out_dir"]
        os.makedirs(self.out_dir, exist_ok=True)
        self.artifacts: dict[str, str] = {}
        self.result = RunResult(out_dir=self.out_dir)

        spec = NetSpec(d_min=cfg["net.d_min"], d_max=cfg["net.d_max"])
        if cfg["run.checkpoint"]:
            self.net, ext = load_checkpoint(cfg["run.checkpoint"])
            self.tstate = restore_trainer(ext, self.net, cfg.regularizer())
            self.tstate.adam.lr = cfg["optim.lr"]
        else:
            self.net = DepthNet.init(seed=cfg["net.seed"], spec=spec)
            self.tstate = None  # created after pretraining in execute()
        self.weights = cfg.loss_weights()
        self.store = KeyframeStore()
        self.replay = ReplayBuffer(seed=cfg["replay.seed"])
        self.train_rows: list[str] = []

    # ---- controller hooks ----

    def _validate(self) -> float:
        kf = self.store.latest()
        depth = self.net.predict(kf.image)
        return validation_loss(kf, depth)

    def _fine_tune(self) -> None:
        kf = self.store.latest()
        batch = [(kf, self.store.neighbors(kf.id))]
        if self.cfg["replay.enabled"]:
            for _ in range(self.cfg["replay.samples"]):
                rid = self.replay.sample(exclude=kf.id)
                if rid is not None:
                    batch.append((self.store.keyframes[rid], self.store.neighbors(rid)))
        breakdown, info = fine_tune_step(self.net, batch, self.K, self.weights,
                                         self.tstate,
                                         inner_iters=self.cfg["optim.inner_iters"])
        self.train_rows.append(
            f"{self.controller.state.t}\t{breakdown.total:.8f}\t{breakdown.photo:.8f}"
            f"\t{breakdown.sparse_depth:.8f}\t{breakdown.smooth:.8f}"
            f"\t{info.get('penalty', 0.0):.8f}\t{info.get('grad_norm', 0.0):.8f}")

    def _run_ba(self) -> None:
        cfg = self.cfg
        idx = len(self.result.ba_passes)
        t = self.controller.state.t
        report_path = os.path.join(self.out_dir, f"ba_{idx:03d}.tsv")
        self.artifacts[f"ba_{idx:03d}.tsv"] = report_path
        ba = BAPass(index=idx, t=t, kept=0, culled=0, culled_post=0, skipped=0,
                    dropped=0, initial_cost=None, final_cost=None, esi_before=None,
                    esi_after=None)
        self.result.ba_passes.append(ba)
        if not cfg["ba.enabled"]:
            ba.status = "disabled"
            with open(report_path, "w", encoding="utf-8") as fh:
                fh.write(f"# t={t} status=disabled\n")
                fh.write("iteration\tcost\tlambda\taccepted\tstep_norm\n")
            return

        depth_maps = {}
        for kid in self.store.ordered_ids():
            kf = self.store.keyframes[kid]
            depth_maps[kid] = self.net.predict(kf.image)
            validation_loss(kf, depth_maps[kid])  # refresh cached L_val for host choice
        assign_hosts(self.store)
        ba.esi_before = _safe_map_esi(self.store, self.K)

        report = cull_map(self.store, depth_maps, self.K, cfg.cull())
        ba.culled, ba.skipped = report.culled, report.skipped

        rows = []
        try:
            problem = build_ba(self.store, self.K, cfg.ba_options())
            ba.dropped = problem.dropped
            if not problem.landmarks:
                ba.status = "empty"
            else:
                result = solve_ba(problem, cfg.ba_options())
                ba.initial_cost = result.initial_cost
                ba.final_cost = result.final_cost
                apply_ba_result(self.store, result)
                rows = [f"{r.iteration}\t{r.cost:.10e}\t{r.lam:.3e}"
                        f"\t{int(r.accepted)}\t{r.step_norm:.6e}" for r in result.iterations]
                # A handful of weak-texture landmarks can slide to spurious
                # photometric matches during the joint solve; the same
                # depth-consistency cull that cleaned the input prunes them
                # from the refined map before it is published.
                post = cull_map(self.store, depth_maps, self.K, cfg.cull())
                ba.culled_post = post.culled
                self.graph_channel.publish(self.store.snapshot())
        except ValueError as exc:
            ba.status = f"failed: {exc}"
        ba.kept = sum(1 for _ in self.store.live_points())
        ba.esi_after = _safe_map_esi(self.store, self.K)

        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(f"# t={t} status={ba.status} kept={ba.kept} culled={ba.culled} "
                     f"culled_post={ba.culled_post} skipped={ba.skipped} "
                     f"dropped={ba.dropped} "
                     f"esi_before={ba.esi_before} esi_after={ba.esi_after}\n")
            fh.write("iteration\tcost\tlambda\taccepted\tstep_norm\n")
            fh.write("\n".join(rows) + ("\n" if rows else ""))

    # ---- main drive ----

    def execute(self) -> RunResult:
        cfg = self.cfg
        resolved = os.path.join(self.out_dir, "config.resolved.cfg")
        with open(resolved, "w", encoding="utf-8") as fh:
            fh.write(cfg.dump())
        self.artifacts["config.resolved.cfg"] = resolved

        try:
            if self.tstate is None:
                pretrain(self.net, cfg)
                self.tstate = TrainerState.init(self.net, cfg.regularizer(),
                                                lr=cfg["optim.lr"],
                                                beta1=cfg["optim.beta1"],
                                                beta2=cfg["optim.beta2"],
                                                eps=cfg["optim.eps"])
            source = build_source(cfg)
            self.K = source.intrinsics

            kf_log = None
            if cfg["run.write_keyframe_log"]:
                kf_log = os.path.join(self.out_dir, "keyframes.log")
                self.artifacts["keyframes.log"] = kf_log
            kf_channel = Channel("keyframes", encoder=encode_keyframe, log_path=kf_log)
            kf_channel.subscribe(lambda kf: register_from_sparse(self.store, kf, self.K))
            graph_log = os.path.join(self.out_dir, "graph.log")
            self.graph_channel = Channel("graph", encoder=encode_graph, log_path=graph_log)
            self.artifacts["graph.log"] = graph_log

            events_path = os.path.join(self.out_dir, "events.tsv")
            self.artifacts["events.tsv"] = events_path
            event_log = EventLog(events_path)
            scheduler = BAScheduler(self._run_ba,
                                    synchronous=not cfg["controller.async_ba"])
            self.controller = AdaptationController(cfg.controller(), self._validate,
                                                   self._fine_tune, scheduler.trigger,
                                                   log=event_log)

            for kf in source.frames:
                kf_channel.publish(kf)
                self.replay.add(kf.id)
                self.controller.step()
                self.result.keyframes += 1
            scheduler.wait()
            event_log.close()
            kf_channel.close()
            self.graph_channel.close()

            self._write_train_log()
            self._write_metrics(source)
            ckpt = os.path.join(self.out_dir, "checkpoint.dpc")
            save_checkpoint(ckpt, self.net, extensions=trainer_extensions(self.tstate))
            self.artifacts["checkpoint.dpc"] = ckpt
        except Exception:
            write_manifest(self.out_dir, self.artifacts, "failed", cfg["run.seed"])
            raise
        manifest = write_manifest(self.out_dir, self.artifacts, "ok", cfg["run.seed"])
        self.artifacts[MANIFEST_NAME] = manifest
        self.result.artifacts = dict(self.artifacts)
        return self.result

    def _write_train_log(self) -> None:
        path = os.path.join(self.out_dir, "train_log.tsv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t\ttotal\tphoto\tsparse\tsmooth\tpenalty\tgrad_norm\n")
            fh.write("\n".join(self.train_rows) + ("\n" if self.train_rows else ""))
        self.artifacts["train_log.tsv"] = path

    def _write_metrics(self, source: KeyframeSource) -> None:
        ids = self.store.ordered_ids()
        gts = [self.store.keyframes[k].gt_depth for k in ids]
        have_gt = ids and all(g is not None for g in gts)
        summary_rows: list[tuple[str, str]] = [
            ("keyframes", str(self.result.keyframes)),
            ("ba_passes", str(len(self.result.ba_passes))),
        ]
        if have_gt:
            preds = [self.net.predict(self.store.keyframes[k].image) for k in ids]
            evald = evaluate_depth(preds, gts, self.cfg.depth_eval())
            self.result.depth_eval = evald
            per_frame = os.path.join(self.out_dir, "metrics_depth.tsv")
            with open(per_frame, "w", encoding="utf-8") as fh:
                fh.write("frame\tpercent_correct\te_si\tvalid_pixels\n")
                for kid, fr in zip(ids, evald.frames):
                    fh.write(f"{kid}\t{fr.percent_correct:.6f}\t{fr.e_si:.8f}"
                             f"\t{fr.valid_pixels}\n")
            self.artifacts["metrics_depth.tsv"] = per_frame
            summary_rows.append(("mean_percent_correct", f"{evald.mean_percent_correct:.6f}"))
            summary_rows.append(("mean_e_si", f"{evald.mean_e_si:.8f}"))
            if evald.scale is not None:
                summary_rows.append(("global_scale", f"{evald.scale:.8f}"))
        for ba in self.result.ba_passes:
            if ba.esi_before is not None and ba.esi_after is not None:
                summary_rows.append((f"map_e_si_pre_ba{ba.index}", f"{ba.esi_before:.8f}"))
                summary_rows.append((f"map_e_si_post_ba{ba.index}", f"{ba.esi_after:.8f}"))
        gt_traj = source.gt_trajectory
        if gt_traj is not None and len(gt_traj) >= 3 and ids:
            est = Trajectory.from_pairs(
                [(self.store.keyframes[k].timestamp, self.store.keyframes[k].pose)
                 for k in ids])
            try:
                self.result.ate = ate_rmse(est, gt_traj, align=self.cfg["eval.align"])
                summary_rows.append((f"ate_{self.cfg['eval.align']}",
                                     f"{self.result.ate:.8f}"))
            except ValueError:
                pass
        summary = os.path.join(self.out_dir, "metrics_summary.tsv")
        with open(summary, "w", encoding="utf-8") as fh:
            fh.write("key\tvalue\n")
            for k, v in summary_rows:
                fh.write(f"{k}\t{v}\n")
        self.artifacts["metrics_summary.tsv"] = summary


def run_adaptation(cfg: RunConfig) -> RunResult:
    return AdaptationRun(cfg).execute()
