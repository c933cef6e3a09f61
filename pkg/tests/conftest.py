"""Shared fixtures: small rendered scenes and an on-disk RGB-D fixture."""

import numpy as np
import pytest
from PIL import Image

from depthadapt import KeyframeStore, SyntheticScene, feed_store, scene_preset


def make_scene(name="env_a", n=6, **overrides):
    overrides.setdefault("texture_freq", (3.0, 9.0))
    return SyntheticScene(scene_preset(name, **overrides), n)


def make_store(n, name="env_a", **overrides):
    scene = make_scene(name, n, **overrides)
    store = KeyframeStore()
    feed_store(scene, store, n)
    return scene, store


@pytest.fixture(scope="session")
def tum_dir(tmp_path_factory):
    """Five-frame RGB-D sequence with association boundary cases.

    rgb timestamps are 10.0 .. 10.4 in 0.1 steps. Depth for the second
    frame sits 0.030 s away (outside the 0.02 s tolerance, so that frame
    drops); the first sits 0.019 s away (inside). Depth images are a
    constant raw 5000, i.e. exactly 1.0 m.
    """
    root = tmp_path_factory.mktemp("tum_seq")
    (root / "rgb").mkdir()
    (root / "depth").mkdir()
    rng = np.random.default_rng(7)
    rgb_times = [10.0, 10.1, 10.2, 10.3, 10.4]
    depth_times = [10.019, 10.130, 10.2, 10.3, 10.4]
    w, h = 64, 48
    with open(root / "rgb.txt", "w") as f:
        f.write("# color images\n# timestamp filename\n")
        for t in rgb_times:
            name = f"rgb/{t:.6f}.png"
            img = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
            Image.fromarray(img).save(root / name)
            f.write(f"{t:.6f} {name}\n")
    with open(root / "depth.txt", "w") as f:
        f.write("# depth images\n")
        for t in depth_times:
            name = f"depth/{t:.6f}.png"
            img = np.full((h, w), 5000, dtype=np.uint16)
            Image.frombytes("I;16", (w, h), img.astype("<u2").tobytes()).save(root / name)
            f.write(f"{t:.6f} {name}\n")
    with open(root / "groundtruth.txt", "w") as f:
        f.write("# ground truth trajectory\n# timestamp tx ty tz qx qy qz qw\n")
        for i, t in enumerate(rgb_times):
            f.write(f"{t + 0.005:.6f} {0.1 * i:.6f} 0.0 0.0 0.0 0.0 0.0 1.0\n")
    return root
