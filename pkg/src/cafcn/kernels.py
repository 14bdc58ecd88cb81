"""Backend selection for the hot convolution/pooling kernels.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementation in ``_kernels_py`` takes over.  Setting the environment
variable ``CAFCN_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("CAFCN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = active.BACKEND

conv2d_forward = active.conv2d_forward
conv2d_grad_input = active.conv2d_grad_input
conv2d_grad_weight = active.conv2d_grad_weight
maxpool2_forward = active.maxpool2_forward
maxpool2_backward = active.maxpool2_backward


def available_backends():
    """Backend modules importable in this process, compiled first."""
    out = []
    if compiled_backend is not None:
        out.append(compiled_backend)
    out.append(python_backend)
    return out
