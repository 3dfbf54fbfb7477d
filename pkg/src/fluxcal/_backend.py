"""Select the likelihood kernel at import time.

The compiled ``_kernels`` extension is preferred.  Setting the environment
variable ``FLUXCAL_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
loglik_grad = _kernels_py.loglik_grad

if os.environ.get("FLUXCAL_PURE_PYTHON") != "1":
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        loglik_grad = _kernels.loglik_grad
