"""Hot numerical kernels: conv3x3, 2x2 max pooling and the LSTM recurrence.

The compiled Cython module is used when it was built and imports cleanly;
otherwise the numpy fallback is used.  Set ``CHANADV_KERNELS=numpy`` to force
the fallback (``cython`` makes a missing extension an ImportError instead).
"""

import os

from . import _numpy

_choice = os.environ.get("CHANADV_KERNELS", "auto").lower()

if _choice == "numpy":
    _impl = _numpy
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _numpy

BACKEND = "cython" if _impl is not _numpy else "numpy"

conv3x3_forward = _impl.conv3x3_forward
conv3x3_backward = _impl.conv3x3_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
lstm_forward = _impl.lstm_forward
lstm_backward = _impl.lstm_backward


def backends():
    """Map of available backend name to module."""
    out = {"numpy": _numpy}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
