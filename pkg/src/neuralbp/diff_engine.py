"""Small reverse-mode autodiff on numpy arrays, plus the neural blocks built on it.

Operations record themselves on the innermost active :class:`Tape`.  Node
creation order is a topological order, so :meth:`Tape.backward` walks the
tape once in reverse.  Outside a tape (or when no input requires a gradient)
operations only compute values.

Everything is float64.
"""
from __future__ import annotations

import json
import struct

import numpy as np
from scipy.special import expit

from . import kernels

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717
LEAKY_SLOPE = 0.01

_TAPES: list = []


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Records operations while active (use as a context manager)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, seed=None):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for p, pg in zip(node.parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                p.grad = pg if p.grad is None else p.grad + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, parents, backward_fn) -> Tensor:
    out = Tensor(value)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        _TAPES[-1].nodes.append(out)
    return out


def constant(x) -> Tensor:
    """Copy of ``x`` cut off from the tape."""
    return Tensor(np.array(as_tensor(x).value))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} and {b.shape}") from exc


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(a, w) -> Tensor:
    a, w = as_tensor(a), as_tensor(w)
    if a.value.shape[-1] != w.value.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {w.shape}")
    av, wv = a.value, w.value
    if wv.ndim == 1:
        # matrix-vector product: the output drops the last axis
        return _record(av @ wv, (a, w), lambda g: (np.multiply.outer(g, wv), av.T @ g))
    return _record(av @ wv, (a, w), lambda g: (g @ wv.T, av.T @ g))


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as a single tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.value.shape[-1] != w.value.shape[0] or b.value.shape[-1] != w.value.shape[1]:
        raise ShapeMismatch(f"affine {x.shape} @ {w.shape} + {b.shape}")
    xv, wv = x.value, w.value
    return _record(xv @ wv + b.value, (x, w, b),
                   lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


# -- activations ------------------------------------------------------------

def selu(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    pos = v >= 0
    ex = SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(v, 0.0))
    out = np.where(pos, SELU_LAMBDA * v, ex - SELU_LAMBDA * SELU_ALPHA)
    d = np.where(pos, SELU_LAMBDA, ex)
    return _record(out, (x,), lambda g: (g * d,))


def leaky_relu(x, slope=LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    d = np.where(x.value >= 0, 1.0, slope)
    return _record(x.value * d, (x,), lambda g: (g * d,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.value)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.value)
    return _record(t, (x,), lambda g: (g * (1.0 - t * t),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(np.logaddexp(0.0, v), (x,), lambda g: (g * expit(v),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.value)
    return _record(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(np.log(v), (x,), lambda g: (g / v,))


def clamp(x, lo=-np.inf, hi=np.inf) -> Tensor:
    x = as_tensor(x)
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _record(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


ACTIVATIONS = {"selu": selu, "leaky_relu": leaky_relu, "tanh": tanh,
               "sigmoid": sigmoid, "softplus": softplus}


# -- structural -------------------------------------------------------------

def concat(xs, axis=1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def columns(x, start, stop) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)
    return _record(x.value[:, start:stop], (x,), back)


def column(x, j) -> Tensor:
    """Column ``j`` of a 2-D tensor as a 1-D tensor."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, j] = g
        return (full,)
    return _record(x.value[:, j], (x,), back)


def gather(x, idx) -> Tensor:
    """Rows ``x[idx]``; the backward pass scatter-adds."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)
    return _record(x.value[idx], (x,), back)


def expand(x, segments) -> Tensor:
    """Rows ``x[segments.owner]``: broadcast node rows onto their edges.

    The adjoint of :func:`segment_sum`, so the backward pass is a segment sum.
    """
    x = as_tensor(x)
    if x.shape[0] != segments.num_segments:
        raise ShapeMismatch(f"expand: {x.shape[0]} rows, {segments.num_segments} segments")
    return _record(x.value[segments.owner], (x,),
                   lambda g: (kernels.segment_sum(g, segments),))


def segment_sum(x, segments) -> Tensor:
    """Sum edge rows into their owning segment (canonical order per segment)."""
    x = as_tensor(x)
    owner = segments.owner
    if len(owner) != x.shape[0]:
        raise ShapeMismatch(f"segment_sum: {x.shape[0]} rows, {len(owner)} edges")
    return _record(kernels.segment_sum(x.value, segments), (x,), lambda g: (g[owner],))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, g),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, max(x.value.size, 1)
    return _record(np.asarray(x.value.mean() if x.value.size else 0.0), (x,),
                   lambda g: (np.full(shape, g / n),))


def bce(p, target, eps=1e-12) -> Tensor:
    """Mean binary cross entropy of probabilities ``p`` against targets in [0, 1]."""
    p = clamp(p, eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    ll = add(mul(log(p), t), mul(log(sub(1.0, p)), 1.0 - t))
    return mul(mean(ll), -1.0)


# -- parameters -------------------------------------------------------------

class ModelParams:
    """Named trainable tensors plus Adam moment buffers."""

    def __init__(self, meta=None):
        self.tensors: dict = {}
        self.m: dict = {}
        self.v: dict = {}
        self.step = 0
        self.meta = dict(meta or {})

    def add(self, name, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self):
        return {k: (np.zeros_like(t.value) if t.grad is None else t.grad)
                for k, t in self.tensors.items()}

    def num_parameters(self):
        return int(sum(t.value.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        out = ModelParams(self.meta)
        for k, t in self.tensors.items():
            out.add(k, t.value)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out


def init_affine(params, name, n_in, n_out, rng):
    bound = 1.0 / np.sqrt(max(n_in, 1))
    params.add(f"{name}.W", rng.uniform(-bound, bound, size=(n_in, n_out)))
    params.add(f"{name}.b", np.zeros(n_out))


def init_mlp2(params, name, n_in, n_hidden, n_out, rng):
    init_affine(params, f"{name}.0", n_in, n_hidden, rng)
    init_affine(params, f"{name}.1", n_hidden, n_out, rng)


def mlp2(params, name, x, activation="selu", out_activation=None) -> Tensor:
    """affine -> activation -> affine [-> out_activation]."""
    act = ACTIVATIONS[activation]
    h = act(affine(x, params[f"{name}.0.W"], params[f"{name}.0.b"]))
    y = affine(h, params[f"{name}.1.W"], params[f"{name}.1.b"])
    return ACTIVATIONS[out_activation](y) if out_activation else y


def init_gru(params, name, n_in, n_hidden, rng):
    """Gate order in the packed matrices: update z, reset r, candidate."""
    H = n_hidden
    bx = 1.0 / np.sqrt(max(n_in, 1))
    bh = 1.0 / np.sqrt(H)
    params.add(f"{name}.Wx", rng.uniform(-bx, bx, size=(n_in, 3 * H)))
    params.add(f"{name}.bx", np.zeros(3 * H))
    params.add(f"{name}.Uzr", rng.uniform(-bh, bh, size=(H, 2 * H)))
    params.add(f"{name}.Uh", rng.uniform(-bh, bh, size=(H, H)))


def gru_cell(params, name, h, x) -> Tensor:
    """z = s(x Wz + h Uz + bz), r = s(x Wr + h Ur + br),
    c = tanh(x Wc + (r*h) Uc + bc), h' = (1 - z)*h + z*c."""
    h = as_tensor(h)
    Uh = params[f"{name}.Uh"]
    H = Uh.shape[0]
    if h.shape[-1] != H:
        raise ShapeMismatch(f"gru hidden width {h.shape[-1]} != {H}")
    xw = affine(x, params[f"{name}.Wx"], params[f"{name}.bx"])
    zr = sigmoid(add(columns(xw, 0, 2 * H), matmul(h, params[f"{name}.Uzr"])))
    z = columns(zr, 0, H)
    r = columns(zr, H, 2 * H)
    c = tanh(add(columns(xw, 2 * H, 3 * H), matmul(mul(r, h), Uh)))
    return add(mul(sub(1.0, z), h), mul(z, c))


# -- optimisation -----------------------------------------------------------

def adam_step(params: ModelParams, grads=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; moments persist in ``params``."""
    grads = params.grads() if grads is None else grads
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.tensors.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.value)
        m = params.m.get(k)
        v = params.v.get(k)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        params.m[k], params.v[k] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def gradient_check(fn, params: ModelParams, n_coords=100, h=1e-4, rng=None,
                   floor=1e-6, names=None):
    """Compare tape gradients with central differences.

    ``fn(params)`` must return a scalar :class:`Tensor`.  Coordinates are
    drawn uniformly over all entries of the selected parameters.  The error
    for one coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    Returns ``(max_error, records)`` where each record is
    ``(name, flat_index, analytic, numeric, error)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = params.names() if names is None else list(names)
    params.zero_grad()
    with Tape() as tape:
        loss = fn(params)
        tape.backward(loss)
    analytic = {k: (np.zeros_like(params[k].value) if params[k].grad is None
                    else params[k].grad.copy()) for k in names}
    params.zero_grad()

    sizes = np.array([params[k].value.size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total_size = int(offsets[-1])
    picks = rng.choice(total_size, size=min(n_coords, total_size), replace=False)
    records = []
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        k = names[which]
        i = int(flat - offsets[which])
        val = params[k].value.reshape(-1)
        orig = val[i]
        val[i] = orig + h
        fp = float(fn(params).value)
        val[i] = orig - h
        fm = float(fn(params).value)
        val[i] = orig
        num = (fp - fm) / (2.0 * h)
        a = float(analytic[k].reshape(-1)[i])
        err = abs(a - num) / max(abs(a), abs(num), floor)
        records.append((k, i, a, num, err))
    worst = max((r[4] for r in records), default=0.0)
    return worst, records


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"NBPCKPT\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, include_optimizer=True):
    """Write params (and Adam moments) in the flat little-endian format.

    Layout: magic (8 bytes) | u32 version | u32 meta_len | meta JSON (utf-8)
    | u32 count | count x entry, where entry is u32 name_len | name (utf-8)
    | u32 ndim | ndim x u64 dims | prod(dims) x f64, row-major.
    Moment buffers are stored as entries named ``adam.m/<name>`` and
    ``adam.v/<name>``; the Adam step counter lives in the metadata.
    """
    entries = [(k, t.value) for k, t in params.tensors.items()]
    if include_optimizer:
        entries += [(f"adam.m/{k}", v) for k, v in params.m.items()]
        entries += [(f"adam.v/{k}", v) for k, v in params.v.items()]
    meta = dict(params.meta)
    meta["adam_step"] = params.step
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    step = int(meta.pop("adam_step", 0))
    params = ModelParams(meta)
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        if name.startswith("adam.m/"):
            params.m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            params.v[name[7:]] = arr
        else:
            params.add(name, arr)
    params.step = step
    return params
