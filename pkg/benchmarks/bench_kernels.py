"""Compare the compiled kernels with their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py``. Prints the median time per
call for each kernel on each available backend and whether the results
agree (bitwise for PCG and bmm, to 1e-12 for normals). Row softmax is shared
by both backends and is timed once for reference.
"""

import argparse
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from satlab import kernels

SEED_STATE, SEED_INC = 0x853C49E6748FEA9B, 0xDA3E39CB94B95BDB


def _median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def _cases():
    rng = np.random.default_rng(0)
    tokens, d, heads = 16, 64, 4
    # shapes met in one denoiser forward pass on a batch of 32 images
    a_proj = rng.standard_normal((1, 32 * tokens, d)).astype(np.float32)
    w_proj = rng.standard_normal((1, d, 4 * d)).astype(np.float32)
    q = rng.standard_normal((32 * heads, tokens, d // heads)).astype(np.float32)
    kt = rng.standard_normal((32 * heads, d // heads, tokens)).astype(np.float32)
    logits = rng.standard_normal((32 * heads * tokens, 2 * tokens)).astype(np.float32)

    def run(mod, name):
        if name == "pcg32_fill(2^16)":
            return mod.pcg32_fill(SEED_STATE, SEED_INC, 1 << 16)[0]
        if name == "normal_fill(2^16)":
            return mod.normal_fill(SEED_STATE, SEED_INC, 1 << 16)[0]
        if name == "bmm ffn 512x64x256":
            out = np.empty((1, a_proj.shape[1], w_proj.shape[2]), np.float32)
            mod.bmm(a_proj, w_proj, out)
            return out
        if name == "bmm qk^T 128x16x16x16":
            out = np.empty((q.shape[0], tokens, tokens), np.float32)
            mod.bmm(q, kt, out)
            return out
        raise KeyError(name)

    names = ["pcg32_fill(2^16)", "normal_fill(2^16)", "bmm ffn 512x64x256", "bmm qk^T 128x16x16x16"]

    def softmax():
        out = np.empty_like(logits)
        kernels.softmax_rows(logits, out)
        return out

    return names, run, softmax


def _training_step_seconds(pure):
    code = (
        "import time, numpy as np;"
        "from satlab.data import make_dataset;"
        "from satlab.train import train;"
        "from satlab.tensor import Rng;"
        "ds = make_dataset(64, seed=0);"
        "t = time.perf_counter();"
        "train(ds, epochs=1, lr=1e-3, rng=Rng(0, 1));"
        "print((time.perf_counter() - t) / 2)"
    )
    env = {"SATLAB_PURE_PYTHON": "1"} if pure else {}

    out = subprocess.run([sys.executable, "-c", code], env={**os.environ, **env},
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--skip-train", action="store_true", help="skip the end-to-end training step timing")
    args = parser.parse_args(argv)

    found = kernels.backends()
    names, run, softmax = _cases()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(found)}")
    print(f"{'kernel':26s}" + "".join(f"{b:>14s}" for b in found) + "   speedup  agree")
    for name in names:
        results = {b: run(mod, name) for b, mod in found.items()}
        times = {b: _median_time(lambda m=mod: run(m, name), args.repeat) for b, mod in found.items()}
        row = f"{name:26s}" + "".join(f"{times[b] * 1e3:12.3f}ms" for b in found)
        if "compiled" in found:
            speedup = times["python"] / times["compiled"]
            if name.startswith("normal"):
                agree = bool(np.allclose(results["python"], results["compiled"], rtol=0, atol=1e-12))
            else:
                agree = bool(np.array_equal(results["python"], results["compiled"]))
            row += f"  {speedup:7.1f}x  {agree}"
        print(row)
    print(f"{'softmax_rows 2048x32':26s}{_median_time(softmax, args.repeat) * 1e3:12.3f}ms  (shared)")
    if not args.skip_train:
        print("training step (batch 32):")
        for label, pure in (("compiled", False), ("python", True)):
            if label == "compiled" and "compiled" not in found:
                continue
            print(f"  {label:9s} {_training_step_seconds(pure) * 1e3:9.1f} ms/step")


if __name__ == "__main__":
    main()
