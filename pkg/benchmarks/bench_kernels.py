"""Time the numba kernels against their pure-numpy fallbacks.

Kernel timings call both implementations directly. The end-to-end timing
runs training steps in child processes with CTVOS_NUMBA=1 and CTVOS_NUMBA=0,
since the backend is chosen once at import.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--steps 20]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ctvos.numcore import _kernels as K

STEP_SNIPPET = """
import json, time, numpy as np
from ctvos import numcore as nc
from ctvos.numcore import _kernels
from ctvos.train import TrainConfig, build_batch, train_step, CTVOSModel
from ctvos.videogen import clip_from_entry, make_entries
clip = clip_from_entry(make_entries(1, 0)[0])
cfg = TrainConfig()
model = CTVOSModel(cfg.model_config(), seed=0)
state = nc.AdamState()
batch = build_batch(clip, cfg, np.random.default_rng(0))
train_step(batch, model, state, cfg, np.random.default_rng(0))  # warm-up / compile
t = time.perf_counter()
for i in range({steps}):
    train_step(batch, model, state, cfg, np.random.default_rng(i))
print(json.dumps({{"backend": _kernels.backend(), "ms": 1000 * (time.perf_counter() - t) / {steps}}}))
"""


def best_ms(fn, repeat):
    fn()
    return 1000 * min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for (n, c, h, w, k, s) in [(9, 3, 66, 66, 3, 2), (9, 32, 18, 18, 3, 2), (1, 64, 18, 18, 3, 1)]:
        xp = rng.normal(size=(n, c, h, w)).astype(np.float32)
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        cols = K.im2col_numpy(xp, k, k, s, oh, ow)
        label = f"{n}x{c}x{h}x{w} k{k} s{s}"
        rows.append((f"im2col {label}",
                     best_ms(lambda: K.im2col_numpy(xp, k, k, s, oh, ow), repeat),
                     best_ms(lambda: K.im2col_numba(xp, k, k, s, oh, ow), repeat) if K.HAS_NUMBA else None))
        rows.append((f"col2im {label}",
                     best_ms(lambda: K.col2im_numpy(cols, xp.shape, k, k, s, oh, ow), repeat),
                     best_ms(lambda: K.col2im_numba(cols, xp.shape, k, k, s, oh, ow), repeat) if K.HAS_NUMBA else None))
    for shape in [(64, 576), (256, 2304)]:
        x = rng.normal(size=shape).astype(np.float32)
        rows.append((f"softmax {shape[0]}x{shape[1]}",
                     best_ms(lambda: K.softmax_lastaxis_numpy(x), repeat),
                     best_ms(lambda: K.softmax_lastaxis_numba(x), repeat) if K.HAS_NUMBA else None))
    return rows


def step_ms(flag, steps):
    env = dict(os.environ, CTVOS_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args()

    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, a, b in kernel_rows(args.repeat):
        if b is None:
            print(f"{name:32s} {a:10.3f} {'n/a':>10s}")
        else:
            print(f"{name:32s} {a:10.3f} {b:10.3f} {a / b:7.2f}x")
    print()
    for flag in ("1", "0"):
        r = step_ms(flag, args.steps)
        print(f"train step, backend={r['backend']:6s} {r['ms']:8.1f} ms/step")


if __name__ == "__main__":
    main()
