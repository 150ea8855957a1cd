"""littrack: two-stage reference-conditioned RL for planar velocity tracking.

Stage 1 trains an ideal tracking policy and a probabilistic one-step dynamics
model in a fixed (non-randomized) environment.  Stage 2 trains a robust policy
under full domain randomization, conditioned on imagined transitions: the ideal
policy's reference action plus an uncertainty-gated prediction of the next
observation.
"""

import os

# Pin BLAS to one thread before numpy loads: keeps small-matrix training fast
# and makes repeated runs byte-reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
