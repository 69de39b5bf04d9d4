"""Self-supervised video object segmentation via cutout prediction and tagging.

A desk-scale implementation: a small reverse-mode tensor engine, a synthetic
moving-shapes corpus, the cutout/tagging training objective and first-frame
mask propagation.
"""

import os

# BLAS and numba thread pools are sized once, before numpy is first imported.
_threads = os.environ.get("CTVOS_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
