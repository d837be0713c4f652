"""Self-supervised contrastive adaptation of frozen patch descriptors
for two-view image matching: synthetic-warp supervision, a single
trainable transformer block, mutual-NN matching with phase-correlation
refinement, and epipolar evaluation."""

import os as _os

# Honor the thread-count variable before numpy initializes its pools.
_threads = _os.environ.get("EPIMATCH_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .errors import EpimatchError, InputError, PipelineError  # noqa: E402,F401
