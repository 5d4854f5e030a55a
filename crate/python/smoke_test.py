"""Smoke test for the `pct` extension module.

Builds the extension with cargo unless PCT_MODULE_DIR points at a directory
that already holds an importable `pct` module, then exercises simulation,
projection, metrics, training and translation on a small beam.
"""

import importlib
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    module_dir = os.environ.get("PCT_MODULE_DIR")
    if not module_dir:
        subprocess.run(
            ["cargo", "build", "--release", "-p", "pct-py", "--features", "extension-module"],
            cwd=ROOT,
            check=True,
        )
        target = Path(os.environ.get("CARGO_TARGET_DIR", ROOT / "target")) / "release"
        built = next(p for p in (target / "libpct.so", target / "libpct.dylib", target / "pct.dll") if p.exists())
        module_dir = tempfile.mkdtemp(prefix="pct-smoke-")
        suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
        shutil.copy(built, Path(module_dir) / f"pct{suffix}")
    sys.path.insert(0, module_dir)
    return importlib.import_module("pct")


def main():
    pct = load_module()
    beam = pct.BeamModel(rows=16, cols=64, max_range=60.0)

    scans = pct.simulate(beam)
    assert len(scans) == 5 and all(len(s) > 0 for s in scans)
    scan = scans[0]
    assert len(scan.labels()) == len(scan)

    cloud = scan.cloud()
    assert len(pct.PointCloud.from_bin(cloud.to_bin())) == len(cloud)

    image = pct.project(cloud, beam)
    assert (image.rows, image.cols) == (16, 64)
    thinned = pct.degrade(image, keep_row_stride=2, seed=1)
    assert thinned.occupied_fraction() <= image.occupied_fraction()
    assert len(pct.backproject(image, beam)) == sum(image.occupancy())

    a = pct.PointCloud([[0, 0, 0], [1, 0, 0]])
    b = pct.PointCloud([[1, 2, 0], [0, 2, 0]])
    cost, assignment = pct.emd_exact(a, b)
    assert abs(cost - 4.0) < 1e-9 and sorted(assignment) == [0, 1]
    approx, _ = pct.emd_sinkhorn(a, b)
    assert abs(approx - cost) < 0.05 * cost
    assert pct.miou(scan.labels(), scan.labels()) == 1.0

    kept, indices, out_of_fov, degenerate = pct.fuse(cloud, image, beam)
    assert len(kept) == len(indices) and not degenerate and out_of_fov == 0
    relabeled = pct.transfer_labels(scan, kept)
    assert relabeled.labels() == [scan.labels()[i] for i in indices]

    options = [("steps", "2"), ("batch_size", "2"), ("train_points", "64"), ("seed", "3")]
    g_a, d_a, history = pct.train_atm(scans, [s.cloud() for s in scans], beam, options)
    assert g_a.role == "G_A" and d_a.role == "D_A" and len(history) == 8
    images = [pct.project(s.cloud(), beam) for s in scans]
    g_s, _, _ = pct.train_stm(images, [pct.degrade(i, keep_row_stride=2) for i in images], options)
    g_s = pct.Network.from_checkpoint(g_s.to_checkpoint())

    out = pct.translate(scan, g_a, g_s, beam)
    again = pct.translate(scan, g_a, g_s, beam)
    assert len(out) <= 2 * len(scan)
    assert out.points() == again.points() and out.labels() == again.labels()
    print(f"smoke test passed: {len(scan)} points translated to {len(out)}")


if __name__ == "__main__":
    main()
