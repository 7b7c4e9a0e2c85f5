#!/usr/bin/env python3
"""Smoke test for the trajdepth_py extension module.

Builds nothing itself: run `cargo build -p trajdepth-py` (or --release)
first, then `python3 python/smoke_test.py`. The script copies the cdylib
next to a temp dir so the module imports under its Python name.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libtrajdepth_py.so",
        ROOT / "target" / "debug" / "libtrajdepth_py.so",
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("libtrajdepth_py.so not found; run `cargo build -p trajdepth-py` first")
    newest = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="trajdepth_py_"))
    shutil.copy2(newest, stage / "trajdepth_py.so")
    sys.path.insert(0, str(stage))
    import trajdepth_py

    return trajdepth_py


td = load_module()
checks = 0


def ok(name, cond):
    global checks
    if not cond:
        sys.exit(f"FAIL {name}")
    checks += 1
    print(f"PASS {name}")


# Camera geometry round-trips.
cam = td.Camera(320.0, (128.0, 120.0), (256, 240))
pix = cam.project((0.7, -0.4, 3.2))
lifted = cam.unproject(pix, 3.2)
ok("camera_roundtrip", all(abs(a - b) < 1e-9 for a, b in zip(lifted, (0.7, -0.4, 3.2))))

# Density route agrees with the direct depth quotient.
r = td.theoretical_ratio(cam, (1.0, 0.0, 2.0), (1.0, 0.3, 5.0))
ok("theoretical_ratio", abs(r - 2.5) < 1e-6)

# A fronto-parallel patch obeys the density law through the KDE baseline.
scene = td.generate_scene(3, frames=24, fronto_parallel=True, num_bodies=1)
ratios = td.baseline_ratio(scene, k=8)
t_len = scene.t_len
errs = []
for i in range(scene.n):
    truth = scene.depth(i, t_len - 1) / scene.depth(i, 0)
    errs.append(abs(ratios[i * t_len + t_len - 1] - truth) / truth)
ok("baseline_density_law", sum(errs) / len(errs) < 0.05)

# Window accumulation chains log ratios through the overlap frame.
acc = td.accumulate(
    [0, 2],
    [[0.0, math.log(2.0), math.log(3.0)], [0.0, math.log(2.0), math.log(5.0)]],
    1,
    3,
    5,
)
ok(
    "accumulate_identity",
    all(abs(a - b) < 1e-5 for a, b in zip(acc, (1.0, 2.0, 3.0, 6.0, 15.0))),
)

# Bundle IO round-trips all channels.
with tempfile.TemporaryDirectory() as tmp:
    path = str(Path(tmp) / "scene.trkb")
    scene.save(path)
    back = td.Tracks.load(path)
    ok(
        "bundle_roundtrip",
        back.n == scene.n
        and back.t_len == scene.t_len
        and back.positions() == scene.positions()
        and back.visibility() == scene.visibility(),
    )

# Self-evaluation is perfect: every point within threshold, zero TC.
report = td.evaluate(scene, scene)
ok("self_eval", report["apd_percent"] == 100.0 and report["tc"] == 0.0)

# Smoothing preserves constant depth tracks.
smoothed = td.smooth_depths(scene, passes=3)
flat = scene.depths()
ok("smooth_depths", len(smoothed.depths()) == len(flat))

print(f"all {checks} smoke tests passed")
