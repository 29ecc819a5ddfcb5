"""Dense float tensors with reverse-mode autodiff, a counter-based RNG, and Adam.

Everything downstream (similarity volumes, graph aggregation, heads, losses)
is built from the small primitive set defined here.  Runtime arithmetic is
float32; gradient checks run the same graphs in float64 by constructing the
inputs with ``dtype=np.float64``.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """An operation precondition (scalar loss, finite values, ...) was violated."""


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for tensors created from non-float data."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in _FLOAT_DTYPES:
        raise ContractError(f"default dtype must be float32 or float64, got {dtype}")
    DEFAULT_DTYPE = dtype


class Rng:
    """Deterministic random stream on the counter-based Philox engine.

    The same (seed, stream) key yields the same sequence on every platform;
    ``child(stream)`` derives independent streams from one seed so that worlds,
    parameter inits, and schedules never share state.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ContractError("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def normal(self, shape=(), std: float = 1.0, dtype=None):
        dtype = dtype or DEFAULT_DTYPE
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, lo: float, hi: float, shape=(), dtype=None):
        dtype = dtype or DEFAULT_DTYPE
        return self._gen.uniform(lo, hi, shape).astype(dtype)

    def integers(self, lo: int, hi: int, shape=()):
        return self._gen.integers(lo, hi, size=shape)

    def choice(self, n: int, size: int, replace: bool = False):
        return self._gen.choice(n, size=size, replace=replace)

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)


class Tensor:
    """Row-major n-d float array that optionally records ops for backward().

    A node carries parents and a backward closure only when some input is
    connected to a ``requires_grad`` leaf, so inference paths build no graph.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def grad_array(self) -> np.ndarray:
        """Accumulated gradient; zeros if this leaf was never touched."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _tracked(*parents: Tensor) -> bool:
    return any(p.requires_grad or p._backward is not None for p in parents)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _tracked(*parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out

def _accum(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._backward is not None):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a finite scalar loss into every reachable leaf.

    Each recorded op is visited exactly once; leaf gradients accumulate, so
    call ``zero_grad`` between steps.
    """
    if loss.data.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        raise ContractError("loss is not finite")
    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None and id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    """a ** p for a fixed scalar exponent (a > 0 when p is fractional)."""
    a = _as_tensor(a)
    p = float(exponent)
    data = a.data**p

    def bw(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.maximum(a.data, b.data)
    pick_a = a.data >= b.data

    def bw(g):
        _accum(a, _unbroadcast(g * pick_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.data.shape))

    return _node(data, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = np.minimum(a.data, b.data)
    pick_a = a.data <= b.data

    def bw(g):
        _accum(a, _unbroadcast(g * pick_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~pick_a, b.data.shape))

    return _node(data, (a, b), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes where lo <= a <= hi."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _node(data, (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask)

    return _node(data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype)

    def bw(g):
        _accum(a, g * data * (1.0 - data))

    return _node(data, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _node(data, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _node(data, (a,), bw)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g / (2.0 * data))

    return _node(data, (a,), bw)


_ACTIVATIONS = {
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "identity": lambda t: t,
}


def activate(a, kind: str) -> Tensor:
    """Apply a named elementwise nonlinearity: relu | sigmoid | identity | exp."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation {kind!r}") from None
    return fn(_as_tensor(a))


# ---------------------------------------------------------------------------
# reductions, shaping, indexing


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum()

    def bw(g):
        _accum(a, np.full_like(a.data, g))

    return _node(np.asarray(data), (a,), bw)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    data = a.data.mean()

    def bw(g):
        _accum(a, np.full_like(a.data, g / n))

    return _node(np.asarray(data), (a,), bw)


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(old))

    return _node(data, (a,), bw)


def take(a, idx) -> Tensor:
    """Static indexing (ints, slices, integer arrays); repeats accumulate on backward."""
    a = _as_tensor(a)
    # np.ascontiguousarray would promote 0-d results to shape (1,)
    data = np.array(a.data[idx])

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _node(data, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(data, tuple(tensors), bw)


def stack_columns(columns) -> Tensor:
    """Stack equal-length 1-d tensors into an (n, k) matrix."""
    cols = [reshape(c, (-1, 1)) for c in columns]
    return concat(cols, axis=1)


def segment_sum(vals, seg_ids: np.ndarray, n_segments: int) -> Tensor:
    """out[s] = sum of vals[i] with seg_ids[i] == s, for a fixed index vector."""
    vals = _as_tensor(vals)
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    data = np.zeros(n_segments, dtype=vals.dtype)
    np.add.at(data, seg_ids, vals.data)

    def bw(g):
        _accum(vals, g[seg_ids])

    return _node(data, (vals,), bw)


# ---------------------------------------------------------------------------
# linear algebra kernels


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"inner extents differ: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(data, (a, b), bw)


def conv2d(x, kernels) -> Tensor:
    """Zero-padded same-size cross-correlation: (h,w,cin) * (kh,kw,cin,cout) -> (h,w,cout).

    Odd kernel extents only, so the output grid aligns with the input grid.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects (h,w,cin) and (kh,kw,cin,cout), got {x.data.shape}, {kernels.data.shape}")
    h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernels.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernels expect {kcin}")
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((h + 2 * ph, w + 2 * pw, cin), dtype=x.dtype)
    xp[ph : ph + h, pw : pw + w] = x.data
    out = np.zeros((h * w, cout), dtype=x.dtype)
    for di in range(kh):
        for dj in range(kw):
            patch = xp[di : di + h, dj : dj + w].reshape(h * w, cin)
            out += patch @ kernels.data[di, dj]
    data = out.reshape(h, w, cout)

    def bw(g):
        gf = g.reshape(h * w, cout)
        if kernels.requires_grad or kernels._backward is not None:
            gk = np.zeros_like(kernels.data)
            for di in range(kh):
                for dj in range(kw):
                    patch = xp[di : di + h, dj : dj + w].reshape(h * w, cin)
                    gk[di, dj] = patch.T @ gf
            _accum(kernels, gk)
        if x.requires_grad or x._backward is not None:
            gxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    gxp[di : di + h, dj : dj + w] += (gf @ kernels.data[di, dj].T).reshape(h, w, cin)
            _accum(x, gxp[ph : ph + h, pw : pw + w])

    return _node(data, (x, kernels), bw)


def spmm(rows: np.ndarray, cols: np.ndarray, vals, x, n_rows: int) -> Tensor:
    """Sparse (COO) times dense: out[r] += vals[e] * x[cols[e]] for each entry e."""
    vals, x = _as_tensor(vals), _as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = np.zeros((n_rows, x.data.shape[1]), dtype=x.dtype)
    np.add.at(data, rows, vals.data[:, None] * x.data[cols])

    def bw(g):
        if vals.requires_grad or vals._backward is not None:
            _accum(vals, (g[rows] * x.data[cols]).sum(axis=1))
        if x.requires_grad or x._backward is not None:
            gx = np.zeros_like(x.data)
            np.add.at(gx, cols, vals.data[:, None] * g[rows])
            _accum(x, gx)

    return _node(data, (vals, x), bw)


# ---------------------------------------------------------------------------
# optimization


class AdamError(ValueError):
    """A parameter update was rejected (non-finite gradient)."""


class Adam:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for k, p in self.params.items():
            g = p.grad_array()
            if not np.all(np.isfinite(g)):
                raise AdamError(f"non-finite gradient for parameter {k!r}; update rejected")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad_array().astype(np.float64)
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)


def adam_step(params: dict, optimizer: Adam) -> None:
    """Single optimizer step over a parameter dict (rejects NaN gradients)."""
    if set(params) != set(optimizer.params):
        raise ContractError("parameter registry does not match optimizer state")
    optimizer.step()


# ---------------------------------------------------------------------------
# gradient verification


def fd_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def fd_gradient_sampled(f, x: np.ndarray, indices, step: float = 1e-5) -> np.ndarray:
    """Central finite differences at selected flat indices of x."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        out[j] = (hi - lo) / (2.0 * step)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max over elements of |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
