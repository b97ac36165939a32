"""Dense float tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays, float32 by default (float64 is accepted so
tests can run high-precision gradient checks through the same code).
While a Tape is active, every op that touches a tracked tensor appends a
node (inputs, output, backward rule) to the tape; the graph is acyclic by
construction because nodes are appended in execution order. Calling
``tape.backward(loss)`` sweeps the nodes in reverse, computes a fresh
gradient for every intermediate, and accumulates into the ``.grad``
buffer of each reachable leaf with ``requires_grad=True``. Running
backward twice therefore accumulates exactly twice the gradient.

Ops never mutate their inputs, and gradient buffers are only ever touched
by ``backward`` and ``zero_grad``.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        if self.ndim == 0:
            raise DimensionError("len() of a 0-d tensor")
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- bookkeeping ------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single element, got shape {self.shape}")

    def numpy(self) -> np.ndarray:
        """The raw value array (shared, do not mutate)."""
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        return out

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data.copy()
        out.requires_grad = self.requires_grad if requires_grad is None else requires_grad
        out.grad = None
        return out

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records ops for one forward pass; replays them in reverse.

    The tape owns the graph: nodes reference their tensors, but tensors
    never reference the tape, so dropping the tape frees the whole forward
    graph by reference counting alone (no gc cycles; long evaluation loops
    stay flat in memory).
    """

    def __init__(self):
        # each node: (inputs, needs, output, rule)
        self.nodes = []
        self.tracked = set()  # id(tensor) of every output recorded above

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractError("tapes must be exited in the order they were entered")
        return False

    def backward(self, loss: Tensor) -> None:
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self.tracked:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for inputs, needs, out, rule in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, need, ig in zip(inputs, needs, rule(g, needs)):
                if not need or ig is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    holders[key] = t
        for key, t in holders.items():
            if t.requires_grad and key not in self.tracked:
                g = np.asarray(grads[key], dtype=t.data.dtype)
                if g.shape != t.data.shape:
                    g = g.reshape(t.data.shape)
                t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=like.data.dtype)
    out.requires_grad = False
    out.grad = None
    return out


def constant(data, dtype=None) -> Tensor:
    """An untracked tensor, skipping the finite check (caller guarantees it)."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(np.asarray(data, dtype=np.float32 if dtype is None else dtype))
    out.requires_grad = False
    out.grad = None
    return out


def _from_op(data: np.ndarray, inputs: tuple, rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    tape = _active_tape()
    if tape is not None:
        needs = tuple(t.requires_grad or id(t) in tape.tracked for t in inputs)
        if any(needs):
            tape.tracked.add(id(out))
            tape.nodes.append((inputs, needs, out, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (the reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)

    def rule(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return _from_op(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)

    def rule(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(-g, b.data.shape) if needs[1] else None,
        )

    return _from_op(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)

    def rule(g, needs):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return _from_op(a.data * b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    def rule(g, needs):
        return (-g,)

    return _from_op(-a.data, (a,), rule)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def rule(g, needs):
        return (g * p * np.power(a.data, p - 1.0),)

    return _from_op(np.power(a.data, p), (a,), rule)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g, needs):
        return (g * out_data,)

    return _from_op(out_data, (a,), rule)


def log(a: Tensor) -> Tensor:
    def rule(g, needs):
        return (g / a.data,)

    return _from_op(np.log(a.data), (a,), rule)


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at exactly 0."""

    def rule(g, needs):
        return (g * np.sign(a.data),)

    return _from_op(np.abs(a.data), (a,), rule)


def relu(a: Tensor) -> Tensor:
    def rule(g, needs):
        return (g * (a.data > 0),)

    return _from_op(np.maximum(a.data, 0), (a,), rule)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from e

    def rule(g, needs):
        return (g.reshape(a.data.shape),)

    return _from_op(data, (a,), rule)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from e

    def rule(g, needs):
        return (_unbroadcast(g, a.data.shape),)

    return _from_op(data, (a,), rule)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing only (ints, slices, tuples thereof)."""
    data = a.data[key]
    if isinstance(data, np.ndarray) and not data.flags.c_contiguous:
        data = np.ascontiguousarray(data)

    def rule(g, needs):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _from_op(data, (a,), rule)


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    split_points = np.cumsum(sizes)[:-1]

    def rule(g, needs):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, split_points, axis=axis))

    return _from_op(data, parts, rule)


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=a.data.dtype)

    def rule(g, needs):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _from_op(data, (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=a.data.dtype)
    count = a.data.size // max(data.size, 1)

    def rule(g, needs):
        g = np.asarray(g) / a.data.dtype.type(count)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)

    return _from_op(data, (a,), rule)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-d or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    k = a.shape[-1]
    n = b.shape[-1]
    if a.ndim > 2 and b.ndim == 2:
        # one flat GEMM instead of a stack of small ones
        data = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        data = np.matmul(a.data, b.data)

    def rule(g, needs):
        ga = gb = None
        if needs[0]:
            if b.ndim == 2:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.data.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if needs[1]:
            if b.ndim == 2 and a.ndim >= 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return _from_op(data, (a, b), rule)


# -- convolution and pooling --------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """x: [N,C,H,W] -> cols [N*Ho*Wo, C*kh*kw] plus output geometry."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]          # [N,C,Ho,Wo,kh,kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), (n, c, hp, wp, ho, wo)


def _col2im(gcols: np.ndarray, geom, kh: int, kw: int, stride: int, padding: int, x_shape):
    """Scatter-add column gradients back to the input layout."""
    n, c, hp, wp, ho, wo = geom
    gx_pad = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    gwin = gcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            gx_pad[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gwin[:, :, :, :, i, j]
    if padding:
        gx_pad = gx_pad[:, :, padding : hp - padding, padding : wp - padding]
    return np.ascontiguousarray(gx_pad.reshape(x_shape))


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation.

    x: [C,H,W] or [N,C,H,W]. kernels: [C_out,C_in,kh,kw]. Symmetric zero
    padding, equal stride on both axes. Output spatial size follows
    floor((H + 2p - kh)/stride) + 1.
    """
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d kernels must be 4-d, got {kernels.shape}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    xs = x.data[None] if squeeze else x.data
    n, c, h, w = xs.shape
    c_out, c_in, kh, kw = kernels.shape
    if c != c_in:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernels expect {c_in}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if stride < 1 or padding < 0:
        raise DimensionError(f"bad stride/padding: {stride}/{padding}")

    cols, geom = _im2col(xs, kh, kw, stride, padding)
    _, _, _, _, ho, wo = geom
    wmat = kernels.data.reshape(c_out, c_in * kh * kw).T
    out = (cols @ wmat).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def rule(g, needs):
        gm = g[None] if squeeze else g
        gmat = np.ascontiguousarray(gm.transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gk = gx = None
        if needs[1]:
            gk = (cols.T @ gmat).T.reshape(kernels.data.shape)
        if needs[0]:
            gcols = gmat @ wmat.T
            gx = _col2im(gcols, geom, kh, kw, stride, padding, xs.shape)
            if squeeze:
                gx = gx[0]
        return gx, gk

    return _from_op(out, (x, kernels), rule)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped.

    Ties inside a window go to the first element in row-major window order.
    """
    if x.ndim not in (3, 4):
        raise DimensionError(f"max_pool2 input must be [C,H,W] or [N,C,H,W], got {x.shape}")
    squeeze = x.ndim == 3
    xs = x.data[None] if squeeze else x.data
    n, c, h, w = xs.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"max_pool2 needs spatial dims >= 2, got {h}x{w}")
    crop = xs[:, :, : 2 * h2, : 2 * w2]
    win = crop.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # argmax keeps the first maximum: row-major tie-break
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def rule(g, needs):
        gm = g[None] if squeeze else g
        gwin = np.zeros((n, c, h2, w2, 4), dtype=gm.dtype)
        np.put_along_axis(gwin, idx[..., None], gm[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        gx = np.zeros_like(xs)
        gx[:, :, : 2 * h2, : 2 * w2] = gcrop
        return (gx[0] if squeeze else gx,)

    return _from_op(out, (x,), rule)


# -- softmax and loss ----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g, needs):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _from_op(out, (x,), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy. logits: [n] or [N,n]; labels: int or [N] ints.

    Computed from shifted log-sum-exp, so large logits stay finite.
    """
    if logits.ndim not in (1, 2):
        raise DimensionError(f"cross_entropy logits must be 1-d or 2-d, got {logits.shape}")
    lab = np.asarray(labels)
    if logits.ndim == 1:
        lab = lab.reshape(1)
    if lab.ndim != 1 or lab.shape[0] != (1 if logits.ndim == 1 else logits.shape[0]):
        raise DimensionError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ContractError("labels must be integers")
    z = logits.data.reshape(lab.shape[0], -1)
    n_classes = z.shape[1]
    if lab.min() < 0 or lab.max() >= n_classes:
        bad = int(lab[(lab < 0) | (lab >= n_classes)][0])
        raise IndexError(f"label {bad} out of range for {n_classes} classes")
    if not np.all(np.isfinite(z)):
        raise ValueError("cross_entropy logits contain non-finite values")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(lab.shape[0])
    data = np.asarray(-logp[rows, lab].mean(), dtype=logits.data.dtype)

    def rule(g, needs):
        p = np.exp(logp)
        p[rows, lab] -= 1.0
        gx = p * (np.asarray(g) / lab.shape[0])
        return (gx.reshape(logits.data.shape).astype(logits.data.dtype, copy=False),)

    return _from_op(data, (logits,), rule)


# -- graph-structured helpers ---------------------------------------------------


def pair_differences(x: Tensor, idx_i: np.ndarray, idx_j: np.ndarray, scatter_t: np.ndarray) -> Tensor:
    """x[..., idx_i, :] - x[..., idx_j, :] over the vertex axis.

    `scatter_t` is the constant [V, P] matrix with +1 at (idx_i[p], p) and
    -1 at (idx_j[p], p); the backward pass is a single GEMM with it, which
    beats elementwise scatter-adds at these sizes.
    """
    data = np.ascontiguousarray(x.data[..., idx_i, :] - x.data[..., idx_j, :])

    def rule(g, needs):
        st = scatter_t.astype(g.dtype, copy=False)
        return (np.matmul(st, g),)

    return _from_op(data, (x,), rule)


def symmetric_from_pairs(vals: Tensor, n_vertices: int, idx_i: np.ndarray, idx_j: np.ndarray) -> Tensor:
    """Spread per-pair values [..., P] into a symmetric [..., V, V] matrix.

    Entry (i, j) and (j, i) both get vals[p] for pair p, bitwise equal by
    construction; the diagonal stays zero.
    """
    v = int(n_vertices)
    lead = vals.data.shape[:-1]
    data = np.zeros(lead + (v, v), dtype=vals.data.dtype)
    data[..., idx_i, idx_j] = vals.data
    data[..., idx_j, idx_i] = vals.data

    def rule(g, needs):
        return (np.ascontiguousarray(g[..., idx_i, idx_j] + g[..., idx_j, idx_i]),)

    return _from_op(data, (vals,), rule)
