"""Backend selection for the numeric hot loops.

The compiled Cython kernels are used when available; setting
``FLOWAD_PURE_PYTHON=1`` in the environment forces the pure-Python
reference implementation. Both backends share one loop structure and
produce bit-identical float64 results.
"""

import os
import warnings

_force_python = os.environ.get("FLOWAD_PURE_PYTHON", "0") not in ("", "0")

if _force_python:
    from . import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:  # extension not built
        from . import _pykernels as _impl

        BACKEND = "python"
        warnings.warn(
            "flowad compiled kernels unavailable; falling back to the slow "
            "pure-Python backend",
            RuntimeWarning,
            stacklevel=2,
        )

matmul = _impl.matmul
conv2d = _impl.conv2d
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weight = _impl.conv2d_grad_weight


def backends():
    """Return {name: module} for every importable backend (for benchmarks/tests)."""
    from . import _pykernels

    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["compiled"] = _ckernels
    except ImportError:
        pass
    return found
