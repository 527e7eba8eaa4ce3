"""Numpy implementations of the message-passing kernels.

Every function takes the CSR form (``ptr``, ``order``) and the padded form
(``padded``) of the same segmentation; this module only uses ``padded``.
Reductions run left to right over the padded columns so the results match
the compiled kernels bit for bit.
"""
import numpy as np


def _gather(values, padded, fill):
    valid = padded >= 0
    out = values[np.where(valid, padded, 0)]
    if values.ndim == 1:
        out[~valid] = fill
    else:
        out[~valid, :] = fill
    return out, valid


def _exclusive_products(vals):
    # vals: (S, D, ...) -> prefix/suffix products that exclude the own slot
    S, D = vals.shape[:2]
    pre = np.ones_like(vals)
    suf = np.ones_like(vals)
    if D > 1:
        pre[:, 1:] = np.cumprod(vals[:, :-1], axis=1)
        suf[:, :-1] = np.cumprod(vals[:, :0:-1], axis=1)[:, ::-1]
    return pre, suf


def loo_product(values, ptr, order, padded, init=None):
    """out[e] = init[s] * prod(values[e'] for e' in segment s, e' != e)."""
    E, K = values.shape
    out = np.empty((E, K))
    if padded.size == 0:
        return out
    vals, valid = _gather(values, padded, 1.0)
    pre, suf = _exclusive_products(vals)
    loo = pre * suf
    if init is not None:
        loo = init[:, None, :] * loo
    out[padded[valid]] = loo[valid]
    return out


def segment_product(values, ptr, order, padded, init):
    """out[s] = init[s] * prod(values[e] for e in segment s)."""
    S = len(ptr) - 1
    if padded.size == 0:
        return np.array(init, dtype=np.float64, copy=True)
    vals, _ = _gather(values, padded, 1.0)
    acc = np.ones((S, values.shape[1]))
    for j in range(vals.shape[1]):
        acc = acc * vals[:, j]
    return init * acc


def parity_loo(p1, ptr, order, padded, out):
    """Parity-check rule on P(x=1): 0.5 * (1 - prod_{e' != e} (1 - 2 p1[e']))."""
    if padded.size == 0:
        return out
    t, valid = _gather(1.0 - 2.0 * p1, padded, 1.0)
    pre, suf = _exclusive_products(t)
    res = 0.5 * (1.0 - pre * suf)
    out[padded[valid]] = res[valid]
    return out


def segment_sum(values, ptr, order, padded):
    """out[s] = sum of values[e] over segment s, in segment order."""
    S = len(ptr) - 1
    out = np.zeros((S,) + values.shape[1:])
    for j in range(padded.shape[1] if padded.ndim == 2 else 0):
        idx = padded[:, j]
        valid = idx >= 0
        out[valid] += values[idx[valid]]
    return out
