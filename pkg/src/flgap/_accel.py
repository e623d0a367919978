"""Select the compiled kernel backend, falling back to numpy.

Set ``FLGAP_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py

if os.environ.get("FLGAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

adam_step = kernels.adam_step
relu_mask = kernels.relu_mask
hadamard_accumulate = kernels.hadamard_accumulate
