import os

# Pin BLAS to one thread before numpy loads: the arrays here are small
# enough that thread fan-out only adds latency, and single-threaded BLAS
# keeps results bit-reproducible regardless of the host's core count.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
