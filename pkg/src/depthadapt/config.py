"""Run configuration: flat ``section.key = value`` text files.

Every tunable of the adaptation loop has a named key with its default.
Unknown keys are rejected and every diagnostic carries the offending line
number, so a typo fails loudly at load time instead of silently running
with a default. Referenced paths are checked at load.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .continual import RegularizerConfig
from .controller import ControllerConfig
from .losses import LossWeights
from .metrics import ALIGN_MODES, SCALING_MODES, DepthEvalConfig
from .refine import BAOptions, CullConfig


class ConfigError(Exception):
    """Bad configuration; message includes file and line context."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (type constructor, default). None default means optional/unset.
_SCHEMA: dict[str, tuple] = {
    "run.seed": (int, 0),
    "run.out_dir": (str, "run_out"),
    "run.pretrain_steps": (int, 0),
    "run.pretrain_scene": (str, "env_a"),
    "run.pretrain_lr": (float, 3e-3),
    "run.pretrain_lambda1": (float, 1.0),
    "run.pretrain_grid": (int, 8),
    "run.pretrain_warmup": (int, 30),
    "run.checkpoint": (str, None),
    "run.write_keyframe_log": (_bool, False),

    "source.kind": (str, "synthetic"),  # synthetic | dataset | log
    "source.scene": (str, "env_a"),
    "source.frames": (int, 60),
    "source.path": (str, None),
    "source.every": (int, 5),
    "source.seed": (int, 0),
    "source.image_noise": (float, 0.0),
    "source.depth_noise": (float, 0.0),
    "source.pose_noise": (float, 0.0),
    "source.grid_size": (int, 20),
    "source.max_fts": (int, 500),
    "source.texture_freq_lo": (float, 8.0),
    "source.texture_freq_hi": (float, 30.0),

    "net.d_min": (float, 0.1),
    "net.d_max": (float, 10.0),
    "net.seed": (int, 0),

    "optim.lr": (float, 1e-3),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.999),
    "optim.eps": (float, 1e-8),
    "optim.inner_iters": (int, 1),

    "loss.alpha": (float, 0.85),
    "loss.lambda1": (float, 0.1),
    "loss.lambda2": (float, 0.1),
    "loss.smooth_on_disparity": (_bool, False),

    "regularizer.kind": (str, "ewc"),
    "regularizer.beta": (float, 5.0e7),
    "regularizer.max_f": (float, 0.001),
    "regularizer.bound": (str, "floor"),
    "regularizer.si_lambda": (float, 1.0),
    "regularizer.si_xi": (float, 0.1),
    "regularizer.mas_lambda": (float, 0.5),

    "replay.enabled": (_bool, True),
    "replay.samples": (int, 1),
    "replay.seed": (int, 0),

    "controller.m": (int, 5),
    "controller.n": (int, 3),
    "controller.tau_val": (float, 0.2),
    "controller.halt_after_converged": (_bool, False),
    "controller.ba_repeat": (_bool, True),
    "controller.async_ba": (_bool, False),

    "cull.gamma": (float, 0.5),
    "cull.d_max": (float, 1.5),

    "ba.enabled": (_bool, True),
    "ba.max_iters": (int, 25),
    "ba.init_lambda": (float, 1e-4),
    "ba.lambda_up": (float, 10.0),
    "ba.lambda_down": (float, 1.0 / 3.0),
    "ba.tol": (float, 1e-8),
    "ba.huber_delta": (float, 0.0),
    "ba.max_edges": (int, 5),
    "ba.build_margin": (float, 0.0),

    "eval.rel_threshold": (float, 0.1),
    "eval.scaling": (str, "none"),
    "eval.min_depth": (float, 0.1),
    "eval.max_depth": (float, 20.0),
    "eval.align": (str, "sim3"),
}

_SOURCE_KINDS = ("synthetic", "dataset", "log")


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    path: str | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    # ---- typed sub-configs ----

    def regularizer(self) -> RegularizerConfig:
        v = self.values
        return RegularizerConfig(kind=v["regularizer.kind"], beta=v["regularizer.beta"],
                                 si_lambda=v["regularizer.si_lambda"],
                                 mas_lambda=v["regularizer.mas_lambda"],
                                 max_f=v["regularizer.max_f"], xi=v["regularizer.si_xi"],
                                 bound=v["regularizer.bound"])

    def controller(self) -> ControllerConfig:
        v = self.values
        return ControllerConfig(m=v["controller.m"], n=v["controller.n"],
                                tau_val=v["controller.tau_val"],
                                halt_after_converged=v["controller.halt_after_converged"],
                                ba_repeat=v["controller.ba_repeat"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(lambda1=v["loss.lambda1"], lambda2=v["loss.lambda2"],
                           alpha=v["loss.alpha"],
                           smooth_on_disparity=v["loss.smooth_on_disparity"])

    def cull(self) -> CullConfig:
        return CullConfig(gamma=self.values["cull.gamma"], d_max=self.values["cull.d_max"])

    def ba_options(self) -> BAOptions:
        v = self.values
        return BAOptions(max_iters=v["ba.max_iters"], init_lambda=v["ba.init_lambda"],
                         lambda_up=v["ba.lambda_up"], lambda_down=v["ba.lambda_down"],
                         tol=v["ba.tol"], huber_delta=v["ba.huber_delta"],
                         max_edges_per_point=v["ba.max_edges"],
                         build_margin=v["ba.build_margin"])

    def depth_eval(self) -> DepthEvalConfig:
        v = self.values
        return DepthEvalConfig(rel_threshold=v["eval.rel_threshold"],
                               scaling=v["eval.scaling"],
                               min_depth=v["eval.min_depth"], max_depth=v["eval.max_depth"])

    def dump(self) -> str:
        """Resolved configuration, one key per line, stable order."""
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if val is None:
                continue
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        ctor = _SCHEMA[key][0]
        try:
            values[key] = ctor(val)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(values=values, path=path)
    _validate(cfg)
    return cfg


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file does not exist: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), path=path)


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    p = cfg.path
    if v["source.kind"] not in _SOURCE_KINDS:
        raise ConfigError(f"{p}: source.kind must be one of {_SOURCE_KINDS}, "
                          f"got {v['source.kind']!r}")
    if v["source.kind"] in ("dataset", "log"):
        if not v["source.path"]:
            raise ConfigError(f"{p}: source.kind={v['source.kind']} requires source.path")
        if not os.path.exists(v["source.path"]):
            raise ConfigError(f"{p}: source.path does not exist: {v['source.path']}")
    if v["run.checkpoint"] is not None and not os.path.exists(v["run.checkpoint"]):
        raise ConfigError(f"{p}: run.checkpoint does not exist: {v['run.checkpoint']}")
    if v["eval.scaling"] not in SCALING_MODES:
        raise ConfigError(f"{p}: eval.scaling must be one of {SCALING_MODES}")
    if v["eval.align"] not in ALIGN_MODES:
        raise ConfigError(f"{p}: eval.align must be one of {ALIGN_MODES}")
    if v["source.frames"] < 0:
        raise ConfigError(f"{p}: source.frames must be nonnegative")
    if v["controller.m"] < 1 or v["controller.n"] < 1:
        raise ConfigError(f"{p}: controller.m and controller.n must be >= 1")
    for key in ("optim.lr", "loss.alpha", "cull.gamma", "cull.d_max", "net.d_min",
                "net.d_max"):
        if v[key] <= 0:
            raise ConfigError(f"{p}: {key} must be positive")
    # Constructing the typed views exercises their own invariants early.
    try:
        cfg.regularizer()
        cfg.controller()
        cfg.depth_eval()
    except ValueError as exc:
        raise ConfigError(f"{p}: {exc}") from None
