"""Backend selection for the IRLS kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``BIASREVERSAL_KERNELS=python`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("BIASREVERSAL_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        _impl = _compiled

linear_predictor = _impl.linear_predictor
newton_terms = _impl.newton_terms
