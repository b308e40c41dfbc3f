"""Hot loops for closed-loop simulation.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``KPBC_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the pure-Python kernel with the same signature is selected.
``BACKEND`` names the active implementation.
"""

import os

from . import _zeta_py as python_kernels

try:
    from . import _zeta as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

KPBC, KPBC1, SPBC = 0, 1, 2

if compiled_kernels is not None and os.environ.get("KPBC_PURE_PYTHON", "") in ("", "0"):
    rk4_zeta = compiled_kernels.rk4_zeta
    BACKEND = "compiled"
else:
    rk4_zeta = python_kernels.rk4_zeta
    BACKEND = "python"


def get_kernel(backend=None):
    """Return ``rk4_zeta`` for ``"compiled"``, ``"python"`` or the active backend."""
    if backend is None:
        return rk4_zeta
    if backend == "python":
        return python_kernels.rk4_zeta
    if backend == "compiled":
        if compiled_kernels is None:
            raise ImportError("compiled kernels are not available")
        return compiled_kernels.rk4_zeta
    raise ValueError(f"unknown backend {backend!r}")
