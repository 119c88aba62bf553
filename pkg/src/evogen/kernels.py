"""Backend selection for the trimming kernels.

The compiled extension is used when it imports; set ``EVOGEN_PURE_PYTHON=1`` to
force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("EVOGEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

identity_to = _impl.identity_to
coverage_rows = _impl.coverage_rows
hamming_to = _impl.hamming_to
greedy_admit = _impl.greedy_admit

__all__ = ["BACKEND", "identity_to", "coverage_rows", "hamming_to", "greedy_admit"]
