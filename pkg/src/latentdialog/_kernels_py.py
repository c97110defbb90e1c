"""Pure NumPy reference kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and semantics. Inputs are C-contiguous 2-D float32/float64 arrays
(rows are independent); outputs match the input dtype.
"""

import numpy as np


def layer_norm_forward(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain + bias
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), rstd[:, 0].astype(x.dtype, copy=False)


def layer_norm_backward(dy, xhat, rstd, gain):
    n = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    # dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = dxhat.sum(axis=1, keepdims=True) / n
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / n
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx.astype(dy.dtype, copy=False), dgain, dbias


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - s)


def log_softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_backward(out, dy):
    return dy - np.exp(out) * dy.sum(axis=1, keepdims=True)


def merge_pair(ids, offsets, left, right, new_id):
    """Replace non-overlapping ``(left, right)`` runs inside each word, scanning left to right.

    ``ids`` is the concatenation of all words, ``offsets[i]:offsets[i+1]`` the
    span of word ``i``. Returns new ``(ids, offsets)``.
    """
    out = []
    new_offsets = [0]
    ids_l = ids.tolist()
    offs = offsets.tolist()
    for w in range(len(offs) - 1):
        i, end = offs[w], offs[w + 1]
        while i < end:
            if i + 1 < end and ids_l[i] == left and ids_l[i + 1] == right:
                out.append(new_id)
                i += 2
            else:
                out.append(ids_l[i])
                i += 1
        new_offsets.append(len(out))
    return np.asarray(out, dtype=np.int32), np.asarray(new_offsets, dtype=np.int64)
