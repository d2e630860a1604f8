#!/usr/bin/env python3
"""End-to-end smoke test for the cvton_py extension module.

Builds the extension if needed, then drives the full surface: config,
dataset generation, two-stage training, inference, warping, and both
metrics.  Everything runs on a tiny 32x24 configuration so the whole
script finishes in well under a minute.

Run from anywhere:  python3 python/smoke_test.py
"""

import json
import math
import pathlib
import random
import shutil
import subprocess
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]

SPEC_TOML = """
height = 32
width = 24
n_train = 4
n_test = 2
seed = 3
"""

CONFIG_TOML = """
[net]
height = 32
width = 24
seg_classes = 25
enc_stages = 2
enc_width = 6
tps_points = 3
max_offset = 0.4
gen_blocks = 3
gen_upsamples = 2
gen_width = 6
disc_width = 6
patch_size = 4
feat_width = 6
feat_stages = 3
width_cap = 12
torso_channels = [1]
patch_channels = [4, 5]

[train]
lr_bpgm = 1e-3
lr_g = 2e-4
lr_d = 8e-4
epochs_bpgm = 1
epochs_g = 1
batch_size = 2
seed = 11
"""


def ensure_module():
    """Build (if needed) and import the extension from the cargo tree."""
    lib = ROOT / "target" / "debug" / "libcvton_py.so"
    if not lib.exists():
        subprocess.run(["cargo", "build", "-p", "cvton-py"], cwd=ROOT, check=True)
    dest = ROOT / "python" / "cvton_py.so"
    if not dest.exists() or lib.stat().st_mtime > dest.stat().st_mtime:
        shutil.copyfile(lib, dest)
    sys.path.insert(0, str(ROOT / "python"))


ensure_module()
import cvton_py  # noqa: E402


def check(label, ok, detail=""):
    status = "ok" if ok else "FAILED"
    print(f"  {label}: {status} {detail}".rstrip())
    if not ok:
        sys.exit(f"smoke test failed at: {label}")


def main():
    print(f"cvton_py {cvton_py.__version__}")

    cfg = cvton_py.default_config()
    check("default config", "[net]" in cfg and "[train]" in cfg)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        data = tmp / "data"

        n_train, n_test = cvton_py.generate_dataset(str(data), SPEC_TOML)
        check("dataset", n_train == 4 and n_test == 2, f"({n_train} train, {n_test} test)")

        ckpt, first, last = cvton_py.train_pipeline(
            str(data), str(tmp / "run"), CONFIG_TOML
        )
        check(
            "training",
            pathlib.Path(ckpt).exists()
            and "l_per" in first
            and "l_per" in last
            and all(math.isfinite(v) for v in last.values()),
            f"final losses {{{', '.join(f'{k}={v:.4f}' for k, v in sorted(last.items()))}}}",
        )

        (gen, gen_shape), (warped, warped_shape) = cvton_py.try_on(
            ckpt, str(data), "test", 0, False, CONFIG_TOML
        )
        check(
            "inference",
            gen_shape == (3, 32, 24)
            and warped_shape == (3, 32, 24)
            and len(gen) == 3 * 32 * 24
            and all(math.isfinite(v) for v in gen),
            f"image {gen_shape}",
        )

        rng = random.Random(0)
        img = [rng.uniform(-1.0, 1.0) for _ in range(3 * 32 * 24)]
        out, _ = cvton_py.warp(img, (3, 32, 24), [0.0] * 18, 3)
        check("zero-offset warp is the identity", out == img)
        out, _ = cvton_py.warp(img, (3, 32, 24), [0.1] * 18, 3)
        check("nonzero warp moves pixels", out != img)

        other = [rng.uniform(-1.0, 1.0) for _ in range(3 * 32 * 24)]
        self_d = cvton_py.lpips(img, img, (3, 32, 24), CONFIG_TOML)
        cross_d = cvton_py.lpips(img, other, (3, 32, 24), CONFIG_TOML)
        check(
            "perceptual distance",
            self_d == 0.0 and cross_d > 0.0,
            f"self {self_d}, cross {cross_d:.4f}",
        )

        pair = gen + warped
        self_fid = cvton_py.fid(
            pair, (2, 3, 32, 24), pair, (2, 3, 32, 24), CONFIG_TOML
        )
        check("distribution distance of a set to itself", abs(self_fid) < 1e-6,
              f"{self_fid:.2e}")

        report = json.loads(
            cvton_py.evaluate(ckpt, str(data), "test", "paired", False, CONFIG_TOML)
        )
        check(
            "evaluation",
            report["n_samples"] == 2
            and math.isfinite(report["fid"])
            and report["fid"] >= 0.0,
            f"fid {report['fid']:.4f}, lpips {report['lpips_mean']:.4f}",
        )

    print("smoke test passed")


if __name__ == "__main__":
    main()
