"""Smoke test for the pyotoc extension.

Build and install the module first, e.g. ``maturin develop -m crates/py/Cargo.toml``,
or put a built ``pyotoc`` shared library on ``PYTHONPATH``.
"""

import math
import sys
import tempfile
from pathlib import Path

import pyotoc


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    scene = pyotoc.synth_scene(3)
    n = len(scene)
    check(n > 1000, f"synthetic scene has {n} points")
    check(len(scene.points()) == n and len(scene.colors()) == n, "point and color arrays match")

    feats = scene.features(10)
    check(len(feats) == n and len(feats[0]) == 14, "14 features per point")

    part = pyotoc.Partition.compute(scene)
    ids = part.assignment()
    check(len(ids) == n and max(ids) + 1 == part.num_supervoxels, "partition covers every point")

    clicks = pyotoc.simulate_clicks(scene, 7)
    labels, conflicts = pyotoc.expand_clicks(clicks, part)
    seeds = [l for l in labels if l[2] == 1]
    check(0 < len(seeds) <= len(clicks), f"{len(seeds)} seed super-voxels from {len(clicks)} clicks")
    check(conflicts >= 0, "conflict count reported")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "scene.otoc"
        scene.save(path)
        again = pyotoc.Scene.load(path)
        check(again.points() == scene.points() and again.semantic() == scene.semantic(), "scene round trip")
        try:
            pyotoc.Scene.load(Path(tmp) / "missing.otoc")
        except OSError:
            check(True, "missing file raises OSError")

    w = [[0.0, 1.0], [1.0, 0.0]]
    u = [[0.9, 0.1], [0.4, 0.6]]
    q = pyotoc.mean_field(w, u, 10)
    check(all(abs(sum(r) - 1.0) < 1e-12 for r in q), "mean-field rows stay on the simplex")
    e = pyotoc.energy(w, u, [0, 0])
    check(abs(e - (-math.log(0.9) - math.log(0.4))) < 1e-9, "energy of an agreeing labeling")

    ious, m = pyotoc.miou([0, 1, 1, 0], [0, 1, 0, -1], 2)
    check(abs(ious[0] - 0.5) < 1e-12 and abs(ious[1] - 0.5) < 1e-12 and abs(m - 0.5) < 1e-12, "mIoU")

    try:
        pyotoc.mean_field([[0.0, 1.0]], u, 10)
    except ValueError:
        check(True, "bad shapes raise ValueError")
    print("all checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
