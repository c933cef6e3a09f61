"""Small encoder-decoder network predicting a dense depth map.

Three stride-2 encoder blocks (8, 16, 32 channels), three nearest-upsample
decoder blocks with skip concatenation, and a sigmoid head mapped to metric
depth through

    D = 1 / (1/d_max + (1/d_min - 1/d_max) * sigma)

so sigma = 0 gives d_max and sigma = 1 gives d_min. Input height and width
must be divisible by 8. The forward function is written against the tape op
set; handing it plain arrays runs the identical numpy code without
recording, so recorded and unrecorded predictions agree bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .tape import ParamVector, Segment, Tape, Tensor

MAGIC = b"DPC1"
_EXT_ADAM = b"ADM1"
_EXT_IMPORTANCE = b"IMP1"

_ENC_CHANNELS = (8, 16, 32)


def _layer_shapes(in_channels: int) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3 = _ENC_CHANNELS
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def block(name, cin, cout):
        shapes.append((f"{name}.w", (cout, cin, 3, 3)))
        shapes.append((f"{name}.b", (cout,)))

    block("enc1", in_channels, c1)
    block("enc2", c1, c2)
    block("enc3", c2, c3)
    block("dec3", c3 + c2, c2)
    block("dec2", c2 + c1, c1)
    block("dec1", c1 + in_channels, c1)
    block("head", c1, 1)
    return shapes


@dataclass(frozen=True)
class NetSpec:
    """Architecture descriptor stored in checkpoints."""

    d_min: float = 0.1
    d_max: float = 10.0
    in_channels: int = 1

    def describe(self) -> str:
        return (f"depthnet-v1:in={self.in_channels};enc=8,16,32;"
                f"dmin={self.d_min:g};dmax={self.d_max:g}")

    @classmethod
    def parse(cls, text: str) -> "NetSpec":
        head, _, rest = text.partition(":")
        if head != "depthnet-v1":
            raise ValueError(f"unknown architecture descriptor {text!r}")
        fields = dict(item.split("=", 1) for item in rest.split(";") if item)
        if fields.get("enc") != "8,16,32":
            raise ValueError(f"unsupported encoder widths in {text!r}")
        return cls(d_min=float(fields["dmin"]), d_max=float(fields["dmax"]),
                   in_channels=int(fields["in"]))


class DepthNet:
    """Depth predictor with a flat parameter vector."""

    def __init__(self, spec: NetSpec, params: ParamVector, seed: int = 0, step: int = 0):
        self.spec = spec
        self.params = params
        self.seed = seed
        self.step = step

    @classmethod
    def init(cls, seed: int, spec: NetSpec | None = None) -> "DepthNet":
        """Fan-in scaled random init, deterministic in the seed.

        The head bias is centered so zero features decode to the geometric
        mean of the depth range rather than sigmoid-midpoint depth (0.2 m
        for the defaults). A fresh net then starts inside the usable band:
        the inverse-depth loss is flat on both sides of its well in logit
        space, and an init outside the well saturates the head before the
        first useful photometric gradient arrives.
        """
        spec = spec or NetSpec()
        rng = np.random.default_rng(seed)
        d_mid = float(np.sqrt(spec.d_min * spec.d_max))
        sig0 = (1.0 / d_mid - 1.0 / spec.d_max) / (1.0 / spec.d_min - 1.0 / spec.d_max)
        z0 = float(np.log(sig0 / (1.0 - sig0)))

        def fill(name: str, shape: tuple[int, ...]) -> np.ndarray:
            if name == "head.b":
                return z0 + rng.normal(0.0, 0.01, size=shape)
            if name.endswith(".b"):
                return rng.normal(0.0, 0.01, size=shape)
            fan_in = int(np.prod(shape[1:]))
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        params = ParamVector.build(_layer_shapes(spec.in_channels), fill)
        return cls(spec, params, seed=seed, step=0)

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image)
        if img.ndim == 3:
            # Luminance from RGB, ITU-R 601 weights.
            img = img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)
        if img.ndim != 2:
            raise ValueError(f"expected a 2D grayscale image, got shape {np.shape(image)}")
        h, w = img.shape
        if h % 8 or w % 8:
            raise ValueError(f"image size {h}x{w} must be divisible by 8")
        return img.astype(np.float32, copy=False)

    def forward(self, params, image):
        """Depth map from parameter tensors (or arrays) and an (H, W) image."""
        spec = self.spec
        h, w = np.shape(image)[-2:]
        x0 = tp.reshape(image, (1, spec.in_channels, h, w)) if isinstance(image, Tensor) \
            else np.asarray(image).reshape(1, spec.in_channels, h, w)
        e1 = tp.elu(tp.conv2d(x0, params["enc1.w"], params["enc1.b"], stride=2, pad=1))
        e2 = tp.elu(tp.conv2d(e1, params["enc2.w"], params["enc2.b"], stride=2, pad=1))
        e3 = tp.elu(tp.conv2d(e2, params["enc3.w"], params["enc3.b"], stride=2, pad=1))
        d3 = tp.elu(tp.conv2d(tp.concat([tp.upsample2x(e3), e2], axis=1),
                              params["dec3.w"], params["dec3.b"], stride=1, pad=1))
        d2 = tp.elu(tp.conv2d(tp.concat([tp.upsample2x(d3), e1], axis=1),
                              params["dec2.w"], params["dec2.b"], stride=1, pad=1))
        d1 = tp.elu(tp.conv2d(tp.concat([tp.upsample2x(d2), x0], axis=1),
                              params["dec1.w"], params["dec1.b"], stride=1, pad=1))
        sig = tp.sigmoid(tp.conv2d(d1, params["head.w"], params["head.b"], stride=1, pad=1))
        inv = tp.add(tp.mul(sig, 1.0 / spec.d_min - 1.0 / spec.d_max), 1.0 / spec.d_max)
        depth = tp.reciprocal(inv)
        return tp.reshape(depth, (h, w))

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Unrecorded depth prediction, float32 (H, W) in [d_min, d_max]."""
        img = self._check_image(image)
        views = {s.name: self.params.view(s.name) for s in self.params.layout}
        return self.forward(views, img)

    def predict_recorded(self, tape: Tape, leaf_map: dict[str, Tensor], image: np.ndarray):
        """Depth prediction on a tape, for training."""
        return self.forward(leaf_map, tape.leaf(self._check_image(image)))

    def clone(self) -> "DepthNet":
        return DepthNet(self.spec, self.params.copy(), seed=self.seed, step=self.step)


def save_checkpoint(path, net: DepthNet, extensions: dict[bytes, bytes] | None = None) -> None:
    """Write a versioned little-endian checkpoint.

    Layout: magic, u32 version, u32 descriptor length + UTF-8 descriptor,
    u64 seed, u64 step, u64 parameter count, float32 parameters, then zero or
    more extension sections (4-byte tag, u64 length, payload).
    """
    desc = net.spec.describe().encode("utf-8")
    theta = np.ascontiguousarray(net.params.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(struct.pack("<QQQ", net.seed, net.step, theta.size))
        f.write(theta.tobytes())
        for tag, payload in (extensions or {}).items():
            if len(tag) != 4:
                raise ValueError(f"extension tag must be 4 bytes, got {tag!r}")
            f.write(tag)
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


def load_checkpoint(path) -> tuple[DepthNet, dict[bytes, bytes]]:
    """Read a checkpoint; returns the network and any extension sections."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a depth network checkpoint: bad magic {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    spec = NetSpec.parse(blob[off:off + dlen].decode("utf-8"))
    off += dlen
    seed, step, count = struct.unpack_from("<QQQ", blob, off)
    off += 24
    theta = np.frombuffer(blob, dtype="<f4", count=count, offset=off).copy()
    off += count * 4
    layout_shapes = _layer_shapes(spec.in_channels)
    expected = sum(int(np.prod(s)) for _, s in layout_shapes)
    if count != expected:
        raise ValueError(f"checkpoint holds {count} parameters, architecture needs {expected}")
    extensions: dict[bytes, bytes] = {}
    while off < len(blob):
        tag = blob[off:off + 4]
        (plen,) = struct.unpack_from("<Q", blob, off + 4)
        off += 12
        extensions[tag] = blob[off:off + plen]
        off += plen
    segs, acc = [], 0
    for name, shape in layout_shapes:
        segs.append(Segment(name, acc, tuple(shape)))
        acc += int(np.prod(shape))
    params = ParamVector(theta, segs)
    return DepthNet(spec, params, seed=int(seed), step=int(step)), extensions


def pack_floats(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_floats(payload: bytes, count: int) -> np.ndarray:
    return np.frombuffer(payload, dtype="<f4", count=count).copy()
