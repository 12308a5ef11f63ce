"""A small reverse-mode autodiff core on dense float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires gradients; outside a tape (or with constant inputs)
they run as plain numpy and build no graph, which is what the samplers
rely on for speed.

Broadcasting is limited to a leading batch: the smaller operand of an
elementwise op must match a suffix of the larger one's shape (a bias row
against a batch of rows, say). Anything else is a :class:`ShapeMismatch`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NotScalar, ShapeMismatch

DTYPE = np.float64

_TAPES: list["Tape"] = []


class Array:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Array{tag} shape={self.shape} grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_array(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Operations recorded in execution order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Array] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Array, params: Iterable[Array] | None = None) -> dict:
        if loss.data.size != 1:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Array, np.ndarray]] = {}
        if loss._backward is None and loss.requires_grad:
            leaves[id(loss)] = (loss, grads.pop(id(loss)))
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._backward is None:
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + pg)
                    else:
                        leaves[key] = (parent, pg)
                elif key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {}
        for arr, g in leaves.values():
            arr.grad = g
            out[arr] = g
        if params is not None:
            for p in params:
                if p not in out:
                    p.grad = np.zeros_like(p.data)
                    out[p] = p.grad
        return out


def backward(loss: Array, params: Iterable[Array] | None = None, tape: Tape | None = None) -> dict:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns ``{leaf: gradient}``. Leaves listed in ``params`` that the loss
    does not reach get zero gradients.
    """
    if tape is None:
        if not _TAPES:
            raise RuntimeError("backward needs the tape the loss was recorded on")
        tape = _TAPES[-1]
    return tape.backward(loss, params)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _record(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Array:
    if _TAPES and any(p.requires_grad for p in parents):
        out = Array(data, requires_grad=True)
        out._parents = parents
        out._backward = backward_fn
        _TAPES[-1].nodes.append(out)
        return out
    return Array(data)


def _check_suffix(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are not batch-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


# Elementwise arithmetic


def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_suffix(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_suffix(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _check_suffix(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), bw)


def matmul(a, b) -> Array:
    """``(..., n, k) @ (k, m)`` or batched ``(..., n, k) @ (..., k, m)``."""
    a, b = as_array(a), as_array(b)
    ad, bd = a.data, b.data
    ok = ad.ndim >= 2 and bd.ndim >= 2 and ad.shape[-1] == bd.shape[-2]
    if ok and bd.ndim > 2:
        ok = ad.shape[:-2] == bd.shape[:-2]
    if not ok:
        raise ShapeMismatch(f"matmul: shapes {ad.shape} and {bd.shape} do not chain")

    # a shared weight matrix turns the batch into one large GEMM
    flat = bd.ndim == 2 and ad.ndim > 2

    def bw(g):
        ga = None
        if a.requires_grad:
            ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape) if flat else g @ np.swapaxes(bd, -1, -2)
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],)) if flat else ad @ bd
    return _record(out, (a, b), bw)


# Structural ops


def reshape(x: Array, shape: tuple) -> Array:
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: cannot view {old} as {shape}") from exc
    return _record(data, (x,), lambda g: (g.reshape(old),))


def transpose_last(x: Array) -> Array:
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x: Array, idx) -> Array:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[idx] = g
        return (out,)

    return _record(x.data[idx], (x,), bw)


def concat(xs: Sequence[Array], axis: int = -1) -> Array:
    xs = [as_array(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or x.shape[:ax] + x.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeMismatch(f"concat along {axis}: shapes {ref} and {x.shape}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bw)


def stack(xs: Sequence[Array], axis: int = 0) -> Array:
    xs = [as_array(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeMismatch(f"stack: shapes {xs[0].shape} and {x.shape}")
    n = len(xs)

    def bw(g):
        return tuple(np.squeeze(part, axis=axis) for part in np.split(g, n, axis=axis))

    return _record(np.stack([x.data for x in xs], axis=axis), tuple(xs), bw)


def expand(x: Array, lead: tuple) -> Array:
    """Repeat ``x`` over new leading dimensions ``lead``."""
    shape = x.shape
    data = np.broadcast_to(x.data, tuple(lead) + shape)

    def bw(g):
        return (g.reshape((-1,) + shape).sum(axis=0),)

    return _record(np.ascontiguousarray(data), (x,), bw)


def take_rows(table: Array, idx) -> Array:
    idx = np.asarray(idx, dtype=np.intp)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _record(table.data[idx], (table,), bw)


# Nonlinearities and normalization


def relu(x: Array) -> Array:
    mask = x.data > 0.0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Array, axis: int = -1) -> Array:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (x,), bw)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: features {d} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        flat_g = g.reshape(-1, d)
        ggamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gbeta = flat_g.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record(xhat * gd + beta.data, (x, gamma, beta), bw)


def attention(q: Array, k: Array, v: Array, heads: int = 1) -> Array:
    """Scaled dot-product multi-head attention on ``(B, L, D)`` inputs."""
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 3 or kd.ndim != 3 or vd.ndim != 3:
        raise ShapeMismatch(f"attention expects rank-3 inputs, got {qd.shape}, {kd.shape}, {vd.shape}")
    b, lq, dq = qd.shape
    if kd.shape[0] != b or vd.shape[0] != b or kd.shape[2] != dq or vd.shape[1] != kd.shape[1]:
        raise ShapeMismatch(f"attention: q {qd.shape}, k {kd.shape}, v {vd.shape}")
    lk, dv = kd.shape[1], vd.shape[2]
    if dq % heads or dv % heads:
        raise ShapeMismatch(f"attention: widths {dq}/{dv} not divisible by {heads} heads")
    dh, dvh = dq // heads, dv // heads
    scale = 1.0 / np.sqrt(dh)
    qh = qd.reshape(b, lq, heads, dh).transpose(0, 2, 1, 3)
    kh = kd.reshape(b, lk, heads, dh).transpose(0, 2, 1, 3)
    vh = vd.reshape(b, lk, heads, dvh).transpose(0, 2, 1, 3)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(b, lq, dv)

    def bw(g):
        gh = g.reshape(b, lq, heads, dvh).transpose(0, 2, 1, 3)
        gv = (p.transpose(0, 1, 3, 2) @ gh).transpose(0, 2, 1, 3).reshape(b, lk, dv)
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = (gs @ kh).transpose(0, 2, 1, 3).reshape(b, lq, dq)
        gk = (gs.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(b, lk, dq)
        return gq, gk, gv

    return _record(out, (q, k, v), bw)


# Reductions


def sum_all(x: Array) -> Array:
    shape = x.shape
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Array, axis: int | None = None) -> Array:
    shape = x.shape
    if axis is None:
        n = x.data.size
        return _record(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))
    n = shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record(x.data.mean(axis=axis), (x,), bw)


def max_reduce(x: Array, axis: int) -> Array:
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    shape = x.shape
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (x,), bw)


# Losses


def huber_loss(pred: Array, target, delta: float = 1.0) -> Array:
    """Mean Huber loss: 0.5 r^2 inside ``delta``, linear outside."""
    target = as_array(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"huber_loss: pred {pred.shape} vs target {target.shape}")
    r = pred.data - target.data
    a = np.abs(r)
    inside = a <= delta
    n = r.size
    val = np.where(inside, 0.5 * r * r, delta * (a - 0.5 * delta)).mean()

    def bw(g):
        dr = np.where(inside, r, delta * np.sign(r)) * (g / n)
        return dr, -dr

    return _record(np.asarray(val), (pred, target), bw)


def mse_loss(pred: Array, target) -> Array:
    target = as_array(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    r = pred.data - target.data
    n = r.size

    def bw(g):
        dr = r * (2.0 * g / n)
        return dr, -dr

    return _record(np.asarray((r * r).mean()), (pred, target), bw)


# Verification harness


def finite_diff_check(
    f: Callable[[Array], Array],
    x: Array,
    h: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps ``x`` (and whatever it closes over) to a scalar. With
    ``max_coords`` only that many coordinates, drawn from ``rng``, are probed.
    """
    was = x.requires_grad
    x.requires_grad = True
    with Tape() as tape:
        loss = f(x)
    g_ad = tape.backward(loss, [x])[x].ravel().copy()
    x.requires_grad = was

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    for i in coords:
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(x).data)
        flat[i] = keep - h
        fm = float(f(x).data)
        flat[i] = keep
        g_fd = (fp - fm) / (2.0 * h)
        err = abs(g_ad[i] - g_fd) / max(1e-12, abs(g_ad[i]) + abs(g_fd))
        worst = max(worst, err)
    return worst


# Optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_global_norm(grads: Sequence[np.ndarray], clip: float) -> tuple[list[np.ndarray], float]:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if clip is not None and total > clip:
        scale = clip / total
        return [g * scale for g in grads], total
    return list(grads), total


def adam_step(
    state: AdamState,
    params: dict[str, Array],
    grads: dict[str, np.ndarray],
    clip: float | None = 1.0,
) -> float:
    """Clip by global norm, then one bias-corrected Adam update in place.

    Returns the pre-clip gradient norm.
    """
    names = list(params)
    for name in names:
        if grads[name].shape != params[name].shape:
            raise ShapeMismatch(
                f"adam_step: grad {grads[name].shape} vs param {params[name].shape} for {name}"
            )
    clipped, total = clip_global_norm([grads[n] for n in names], clip)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in zip(names, clipped):
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        step = m / denom
        step *= state.lr / c1
        params[name].data -= step
    return total


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


# Checkpoints

CHECKPOINT_MAGIC = b"CPMCKPT1"


def save_checkpoint(path, arrays: dict, header: dict | None = None) -> None:
    """Write ``arrays`` as raw little-endian float64 behind a JSON manifest.

    Layout: magic, uint64 header length, JSON header, payload. The header
    holds ``manifest`` (name, shape, byte offset into the payload) plus any
    caller metadata.
    """
    import json

    manifest, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    head = dict(header or {})
    head["manifest"] = manifest
    raw = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(raw).to_bytes(8, "little"))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_checkpoint`: ``(arrays, header)``."""
    import json

    from .errors import CheckpointError

    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a CPMCKPT1 checkpoint")
    n = int.from_bytes(blob[8:16], "little")
    try:
        head = json.loads(blob[16 : 16 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(blob)[16 + n :]
    arrays = {}
    for entry in head["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[start : start + 8 * count], dtype="<f8").reshape(shape).astype(DTYPE)
    return arrays, head
