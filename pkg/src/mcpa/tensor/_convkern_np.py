"""Pure-numpy im2col/col2im, the fallback when the compiled kernels are absent.

Layouts match the compiled extension exactly: columns are (N, C*kh*kw, oh*ow)
with the patch index varying as (c, ki, kj). col2im accumulates in (ki, kj)
order per output cell so both backends produce bit-identical sums.
"""

import numpy as np

BACKEND = "numpy"


def im2col(x, kh, kw, sh, sw, oh, ow):
    n, c, _, _ = x.shape
    cols = np.empty((n, c * kh * kw, oh * ow), dtype=x.dtype)
    view = cols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            view[:, :, ki, kj] = x[:, :, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw]
    return cols


def col2im(cols, n, c, hp, wp, kh, kw, sh, sw, oh, ow):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    view = cols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw] += view[:, :, ki, kj]
    return out
