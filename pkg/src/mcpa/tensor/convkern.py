"""Backend selection for the convolution patch kernels.

The compiled extension is preferred when it imported cleanly; setting
``MCPA_CONV_BACKEND=numpy`` (or ``cython``) forces a choice. Both backends
produce bit-identical arrays, so the selection never changes numerics.
"""

import os

from . import _convkern_np

_requested = os.environ.get("MCPA_CONV_BACKEND", "").lower()

if _requested == "numpy":
    _impl = _convkern_np
else:
    try:
        from . import _convkern as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "MCPA_CONV_BACKEND=cython requested but the compiled extension "
                "is not available; reinstall the package with a C toolchain"
            )
        _impl = _convkern_np

BACKEND: str = _impl.BACKEND


def im2col(x, kh, kw, sh, sw, oh, ow):
    """Gather conv patches of padded NCHW input into (N, C*kh*kw, oh*ow)."""
    import numpy as np

    x = np.ascontiguousarray(x)
    return _impl.im2col(x, kh, kw, sh, sw, oh, ow)


def col2im(cols, n, c, hp, wp, kh, kw, sh, sw, oh, ow):
    """Scatter-add columns back onto the padded NCHW grid (adjoint of im2col)."""
    import numpy as np

    cols = np.ascontiguousarray(cols)
    return _impl.col2im(cols, n, c, hp, wp, kh, kw, sh, sw, oh, ow)
