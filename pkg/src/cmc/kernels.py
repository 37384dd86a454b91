"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``CMC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
conv2d_forward = _kernels_py.conv2d_forward
conv2d_backward = _kernels_py.conv2d_backward

if os.environ.get("CMC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        conv2d_forward = _compiled.conv2d_forward
        conv2d_backward = _compiled.conv2d_backward
