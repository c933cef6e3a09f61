"""Regularized online fine-tuning with experience replay.

One optimizer step per arriving keyframe: snapshot the parameters, take an
Adam step on the combined training loss plus a quadratic importance penalty
anchored at the previous snapshot, then consolidate importance from this
batch. Three importance estimators are supported:

* ``ewc``: accumulated squared training gradients, averaged over batches and
  bounded by ``max_f``. The printed update bounds from below (floor); the
  prose reading bounds from above (ceiling). Both are implemented behind
  ``bound``, default floor.
* ``si``: a running path integral omega += -grad * delta_theta, turned into
  importance as omega / ((theta - theta_task_start)^2 + xi). Omega is never
  reset.
* ``mas``: mean absolute gradient of the squared L2 norm of the network
  output, accumulated per batch.

The penalty for ``ewc`` is (beta/2) * sum(F_hat * (theta - theta_star)^2);
for ``si``/``mas`` it is lambda * sum(Omega * (theta - theta_star)^2).
theta_star for the next step is always this step's pre-update snapshot.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .depthnet import DepthNet, _EXT_ADAM, _EXT_IMPORTANCE
from .geometry import Intrinsics
from .keyframes import Keyframe
from .losses import LossBreakdown, LossWeights, train_loss
from .tape import ParamVector, Tape


@dataclass
class RegularizerConfig:
    kind: str = "ewc"  # ewc | si | mas | none
    beta: float = 5.0e7
    si_lambda: float = 1.0
    mas_lambda: float = 0.5
    max_f: float = 0.001
    xi: float = 0.1
    bound: str = "floor"  # floor | ceiling

    def __post_init__(self):
        if self.kind not in ("ewc", "si", "mas", "none"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.bound not in ("floor", "ceiling"):
            raise ValueError(f"bound must be floor or ceiling, got {self.bound!r}")


class ImportanceMatrix:
    """Diagonal Fisher estimate accumulated over training batches."""

    def __init__(self, size: int, max_f: float = 0.001, bound: str = "floor"):
        self.f_accum = np.zeros(size, dtype=np.float64)
        self.batch_count = 0
        self.max_f = float(max_f)
        self.bound = bound

    def consolidate(self, grads: np.ndarray) -> None:
        """Add one batch's squared gradients; non-finite input is rejected."""
        g = np.asarray(grads, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradients in consolidation")
        self.f_accum += g * g
        self.batch_count += 1

    def f_hat(self) -> np.ndarray:
        """Bounded per-parameter importance, zeros before any batch."""
        if self.batch_count == 0:
            return np.zeros_like(self.f_accum)
        mean = self.f_accum / self.batch_count
        if self.bound == "floor":
            return np.maximum(mean, self.max_f)
        return np.minimum(mean, self.max_f)


class SiState:
    """Path-integral importance: per-parameter work against the loss."""

    def __init__(self, theta_start: np.ndarray, xi: float = 0.1):
        self.omega = np.zeros(theta_start.size, dtype=np.float64)
        self.theta_start = np.asarray(theta_start, dtype=np.float64).copy()
        self.xi = float(xi)

    def update(self, grads: np.ndarray, delta_theta: np.ndarray) -> None:
        self.omega += -np.asarray(grads, np.float64) * np.asarray(delta_theta, np.float64)

    def importance(self, theta_now: np.ndarray) -> np.ndarray:
        drift = np.asarray(theta_now, np.float64) - self.theta_start
        return self.omega / (drift * drift + self.xi)


class MasState:
    """Mean absolute sensitivity of the squared output norm."""

    def __init__(self, size: int):
        self.accum = np.zeros(size, dtype=np.float64)
        self.batch_count = 0

    def update(self, abs_grads: np.ndarray) -> None:
        self.accum += np.abs(np.asarray(abs_grads, np.float64))
        self.batch_count += 1

    def importance(self) -> np.ndarray:
        if self.batch_count == 0:
            return np.zeros_like(self.accum)
        return self.accum / self.batch_count


def output_importance(forward_fn, params: ParamVector) -> np.ndarray:
    """|d ||f(theta)||^2 / d theta| for one sample; f given as a tape program."""
    tape = Tape()
    leaves = tape.leaves(params)
    out = forward_fn(tape, leaves)
    tape.backward(tp.sum_(tp.square(out)))
    return np.abs(tape.param_grads(params, leaves))


@dataclass
class AdamState:
    """First/second moment estimates for adaptive gradient steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, size: int, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(size, np.float64), v=np.zeros(size, np.float64),
                   t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, theta: np.ndarray, grads: np.ndarray) -> np.ndarray:
        g = np.asarray(grads, np.float64)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        update = self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return (np.asarray(theta, np.float64) - update).astype(np.float32)


class ReplayBuffer:
    """Uniform sampling over previously seen keyframe ids."""

    def __init__(self, seed: int = 0):
        self.ids: list[int] = []
        self.rng = np.random.default_rng(seed)

    def add(self, kf_id: int) -> None:
        if kf_id not in self.ids:
            self.ids.append(kf_id)

    def sample(self, exclude: int) -> int | None:
        """One uniform draw over stored ids, never ``exclude``; None if empty."""
        pool = [i for i in self.ids if i != exclude]
        if not pool:
            return None
        return pool[int(self.rng.integers(len(pool)))]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TrainerState:
    """Everything the online fine-tuner carries between keyframes."""

    adam: AdamState
    reg: RegularizerConfig
    theta_star: np.ndarray | None = None
    ewc: ImportanceMatrix | None = None
    si: SiState | None = None
    mas: MasState | None = None

    @classmethod
    def init(cls, net: DepthNet, reg: RegularizerConfig, lr: float = 1e-3,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "TrainerState":
        n = net.params.size
        state = cls(adam=AdamState.init(n, lr, beta1, beta2, eps), reg=reg)
        if reg.kind == "ewc":
            state.ewc = ImportanceMatrix(n, max_f=reg.max_f, bound=reg.bound)
        elif reg.kind == "si":
            state.si = SiState(net.params.values, xi=reg.xi)
        elif reg.kind == "mas":
            state.mas = MasState(n)
        return state


def ewc_penalty(tape: Tape, leaves: dict, params: ParamVector,
                theta_star: np.ndarray, coeff: np.ndarray):
    """sum(coeff * (theta - theta_star)^2) as a tape scalar.

    ``coeff`` folds the strength in: (beta/2) * F_hat for the Fisher flavor,
    lambda * Omega otherwise.
    """
    total = None
    for seg in params.layout:
        c = coeff[seg.offset:seg.offset + seg.size].reshape(seg.shape).astype(np.float32)
        anchor = theta_star[seg.offset:seg.offset + seg.size].reshape(seg.shape).astype(np.float32)
        term = tp.sum_(tp.mul(tp.square(tp.sub(leaves[seg.name], anchor)), c))
        total = term if total is None else tp.add(total, term)
    return total


def penalty_coefficients(state: TrainerState, theta_now: np.ndarray) -> np.ndarray | None:
    """Per-parameter quadratic penalty coefficients for the active regularizer."""
    reg = state.reg
    if reg.kind == "none" or state.theta_star is None:
        return None
    if reg.kind == "ewc":
        if state.ewc.batch_count == 0:
            return None
        return (reg.beta / 2.0) * state.ewc.f_hat()
    if reg.kind == "si":
        return reg.si_lambda * state.si.importance(theta_now)
    if reg.kind == "mas":
        if state.mas.batch_count == 0:
            return None
        return reg.mas_lambda * state.mas.importance()
    return None


def fine_tune_step(net: DepthNet, batch: list[tuple[Keyframe, list[Keyframe]]],
                   intrinsics: Intrinsics, weights: LossWeights,
                   state: TrainerState, inner_iters: int = 1) -> tuple[LossBreakdown, dict]:
    """Adapt the network on one batch of keyframes.

    Each batch entry is (keyframe, neighbors). Returns the data-loss
    breakdown of the last inner iteration plus a diagnostics dict. On any
    failure the network and state are left untouched.
    """
    if not batch:
        raise ValueError("empty batch")
    saved_params = net.params.values.copy()
    saved_step = net.step
    try:
        return _fine_tune_inner(net, batch, intrinsics, weights, state, inner_iters)
    except Exception:
        net.params.values[:] = saved_params
        net.step = saved_step
        raise


def _fine_tune_inner(net, batch, intrinsics, weights, state, inner_iters):
    breakdown = None
    info = {}
    for _ in range(max(1, inner_iters)):
        theta_cpy = net.params.values.copy()
        tape = Tape()
        leaves = tape.leaves(net.params)
        triples = [(kf, neighbors, net.predict_recorded(tape, leaves, kf.image))
                   for kf, neighbors in batch]
        data_loss, breakdown = train_loss(triples, intrinsics, weights)

        coeff = penalty_coefficients(state, theta_cpy)
        if coeff is not None:
            root = tp.add(data_loss, ewc_penalty(tape, leaves, net.params,
                                                 state.theta_star, coeff))
        else:
            root = data_loss
        tape.backward(root)
        grads = tape.param_grads(net.params, leaves).astype(np.float64)

        if coeff is not None:
            penalty_grad = 2.0 * coeff * (theta_cpy.astype(np.float64) - state.theta_star)
            data_grads = grads - penalty_grad
            info["penalty"] = float(np.sum(coeff * (theta_cpy.astype(np.float64)
                                                    - state.theta_star) ** 2))
        else:
            data_grads = grads
            info["penalty"] = 0.0

        new_values = state.adam.step(net.params.values, grads)
        delta = new_values.astype(np.float64) - theta_cpy.astype(np.float64)
        net.params.values[:] = new_values
        net.step += 1

        if state.reg.kind == "ewc":
            state.ewc.consolidate(data_grads)
        elif state.reg.kind == "si":
            state.si.update(grads, delta)
        elif state.reg.kind == "mas":
            for kf, _ in batch:
                img = kf.image

                def fwd(tape_, leaves_, _img=img):
                    return net.predict_recorded(tape_, leaves_, _img)

                state.mas.update(output_importance(fwd, net.params.replaced(theta_cpy)))

        state.theta_star = theta_cpy.astype(np.float64)
        info["grad_norm"] = float(np.linalg.norm(data_grads))
    return breakdown, info


# ---- extended checkpoint sections ----


def encode_adam(adam: AdamState) -> bytes:
    head = struct.pack("<Qdddd", adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps)
    return head + adam.m.astype("<f8").tobytes() + adam.v.astype("<f8").tobytes()


def decode_adam(payload: bytes, size: int) -> AdamState:
    t, lr, b1, b2, eps = struct.unpack_from("<Qdddd", payload, 0)
    off = 8 + 32
    m = np.frombuffer(payload, dtype="<f8", count=size, offset=off).copy()
    v = np.frombuffer(payload, dtype="<f8", count=size, offset=off + size * 8).copy()
    return AdamState(m=m, v=v, t=int(t), lr=lr, beta1=b1, beta2=b2, eps=eps)


_KIND_CODE = {"none": 0, "ewc": 1, "si": 2, "mas": 3}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def encode_importance(state: TrainerState) -> bytes:
    kind = state.reg.kind
    parts = [struct.pack("<B", _KIND_CODE[kind])]
    has_star = state.theta_star is not None
    parts.append(struct.pack("<B", int(has_star)))
    if has_star:
        parts.append(np.asarray(state.theta_star, "<f8").tobytes())
    if kind == "ewc":
        parts.append(struct.pack("<Qd", state.ewc.batch_count, state.ewc.max_f))
        parts.append(state.ewc.bound.encode().ljust(8, b"\0"))
        parts.append(state.ewc.f_accum.astype("<f8").tobytes())
    elif kind == "si":
        parts.append(struct.pack("<d", state.si.xi))
        parts.append(state.si.omega.astype("<f8").tobytes())
        parts.append(state.si.theta_start.astype("<f8").tobytes())
    elif kind == "mas":
        parts.append(struct.pack("<Q", state.mas.batch_count))
        parts.append(state.mas.accum.astype("<f8").tobytes())
    return b"".join(parts)


def decode_importance(payload: bytes, size: int, state: TrainerState) -> None:
    (code,) = struct.unpack_from("<B", payload, 0)
    kind = _CODE_KIND[code]
    if kind != state.reg.kind:
        raise ValueError(f"checkpoint importance kind {kind!r} != configured {state.reg.kind!r}")
    off = 1
    (has_star,) = struct.unpack_from("<B", payload, off)
    off += 1
    if has_star:
        state.theta_star = np.frombuffer(payload, dtype="<f8", count=size, offset=off).copy()
        off += size * 8
    if kind == "ewc":
        count, max_f = struct.unpack_from("<Qd", payload, off)
        off += 16
        bound = payload[off:off + 8].rstrip(b"\0").decode()
        off += 8
        state.ewc = ImportanceMatrix(size, max_f=max_f, bound=bound)
        state.ewc.batch_count = int(count)
        state.ewc.f_accum = np.frombuffer(payload, dtype="<f8", count=size, offset=off).copy()
    elif kind == "si":
        (xi,) = struct.unpack_from("<d", payload, off)
        off += 8
        omega = np.frombuffer(payload, dtype="<f8", count=size, offset=off).copy()
        off += size * 8
        start = np.frombuffer(payload, dtype="<f8", count=size, offset=off).copy()
        state.si = SiState(start, xi=xi)
        state.si.omega = omega
        state.si.theta_start = start
    elif kind == "mas":
        (count,) = struct.unpack_from("<Q", payload, off)
        off += 8
        state.mas = MasState(size)
        state.mas.batch_count = int(count)
        state.mas.accum = np.frombuffer(payload, dtype="<f8", count=size, offset=off).copy()


def trainer_extensions(state: TrainerState) -> dict[bytes, bytes]:
    """Extension sections for an extended checkpoint."""
    return {_EXT_ADAM: encode_adam(state.adam), _EXT_IMPORTANCE: encode_importance(state)}


def restore_trainer(extensions: dict[bytes, bytes], net: DepthNet,
                    reg: RegularizerConfig) -> TrainerState:
    """Rebuild trainer state from extended checkpoint sections."""
    state = TrainerState.init(net, reg)
    if _EXT_ADAM in extensions:
        state.adam = decode_adam(extensions[_EXT_ADAM], net.params.size)
    if _EXT_IMPORTANCE in extensions:
        decode_importance(extensions[_EXT_IMPORTANCE], net.params.size, state)
    return state
