"""Backend selection for the row-wise kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded. Set ``CASPL_PURE_PYTHON=1`` to force the fallback.
"""
import os

if os.environ.get("CASPL_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        from . import _pykernels as _impl

BACKEND = "cython" if _impl.__name__.endswith("_ckernels") else "numpy"

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
log_softmax_rows = _impl.log_softmax_rows
log_softmax_rows_backward = _impl.log_softmax_rows_backward
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_backward = _impl.layer_norm_rows_backward
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
