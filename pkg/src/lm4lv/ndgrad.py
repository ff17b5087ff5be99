"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy float arrays (float32 for training, float64 for
gradient-check suites). Every op records its inputs and a backward closure on
the output tensor; ``backward()`` walks the recorded graph once, in reverse
topological order, accumulating gradients into leaf tensors. The graph is
rebuilt on every forward pass.

Broadcasting is deliberately limited to the forms the networks need: equal
shapes, scalars, and trailing-aligned shapes (e.g. bias rows, per-position
masks). General N-d broadcasting is out of scope.
"""

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (inference mode)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """Dense n-d float array participating in reverse-mode differentiation.

    ``data`` is always a contiguous numpy array; ``grad`` (same shape) is
    populated by ``backward()`` for tensors with ``requires_grad``. Non-leaf
    tensors additionally carry the op record: op kind, parent refs, and the
    backward closure (the saved context lives in the closure).
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode pass from a scalar tensor.

        Visits every reachable op record exactly once, in reverse
        topological order, accumulating (never overwriting) gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar tensor, got shape {self.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op!r})"

    # Operator sugar; scalars and plain arrays are treated as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use scale()")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def topo_order(root):
    """Topologically ordered list of op records reachable from ``root``.

    Iterative DFS (the graphs are deep at long sequence lengths). Order is
    deterministic given the graph structure.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        # copy: the incoming buffer may be a view reused by another branch
        tensor.grad = np.array(grad, dtype=tensor.data.dtype)
    else:
        tensor.grad += grad


def _make(data, op, parents, backward):
    out = Tensor(data)
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.op = op
    if out.requires_grad:
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype.name} vs {b.dtype.name}")


def _check_broadcast(sa, sb, op):
    """Permit equal, scalar, and trailing-aligned shapes only."""
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    for d_small, d_big in zip(reversed(small), reversed(big)):
        if d_small != d_big and d_small != 1 and d_big != 1:
            raise ValueError(f"{op}: shapes {sa} and {sb} are not trailing-aligned broadcastable")


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b):
    b = _wrap(b, a.dtype)
    _check_same_dtype(a, b, "add")
    _check_broadcast(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), backward)


def sub(a, b):
    b = _wrap(b, a.dtype)
    _check_same_dtype(a, b, "sub")
    _check_broadcast(a.shape, b.shape, "sub")
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, "sub", (a, b), backward)


def mul(a, b):
    b = _wrap(b, a.dtype)
    _check_same_dtype(a, b, "mul")
    _check_broadcast(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), backward)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)
    out_data = a.data * a.dtype.type(s)

    def backward(g):
        _accumulate(a, g * a.dtype.type(s))

    return _make(out_data, "scale", (a,), backward)


def relu(a):
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, "relu", (a,), backward)


def gelu(a):
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * a.dtype.type(_INV_SQRT2)))
    out_data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * a.dtype.type(_INV_SQRT_2PI)
        _accumulate(a, g * (cdf + x * pdf))

    return _make(out_data, "gelu", (a,), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, "exp", (a,), backward)


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(out_data, "log", (a,), backward)


def sqrt(a):
    if np.any(a.data < 0):
        raise ValueError("sqrt: input must be non-negative")
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, "sqrt", (a,), backward)


def clamp(a, lo, hi):
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(out_data, "clamp", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product, 2-d or stacked.

    Supported forms: (m,k)@(k,n); (...,m,k)@(k,n) with the 2-d operand shared
    across leading dims; (...,m,k)@(...,k,n) with identical leading dims.
    """
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dimensions disagree, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                n = g.shape[-1]
                _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, "matmul", (a, b), backward)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, "reshape", (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inverse))

    return _make(out_data, "transpose", (a,), backward)


def cat(tensors, axis):
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, "cat", tuple(tensors), backward)


def index_select(a, indices, axis=0):
    """Gather along ``axis``; backward scatter-adds (duplicates accumulate)."""
    indices = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, indices, axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        sel = (slice(None),) * axis + (indices,)
        np.add.at(a.grad, sel, g)

    return _make(out_data, "index_select", (a,), backward)


def broadcast_to(a, shape):
    """Expand along new leading axes and size-1 axes; backward sums them."""
    _check_broadcast(a.shape, tuple(shape), "broadcast_to")
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _make(out_data, "broadcast_to", (a,), backward)


def sum_all(a):
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        _accumulate(a, np.full_like(a.data, g))

    return _make(out_data, "sum", (a,), backward)


def mean_all(a):
    n = a.data.size
    out_data = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward(g):
        _accumulate(a, np.full_like(a.data, g / n))

    return _make(out_data, "mean", (a,), backward)


# ---------------------------------------------------------------------------
# normalization and attention helpers
# ---------------------------------------------------------------------------

def softmax_lastdim(a):
    """Row-max-stabilized softmax over the last dimension."""
    if a.shape[-1] < 1:
        raise ValueError("softmax_lastdim: last dimension must be >= 1")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return _make(out_data, "softmax", (a,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize the last dimension to mean 0 / var 1, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = centered * inv_std
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make(out_data, "layernorm", (x, gamma, beta), backward)


def apply_rope(x, cos, sin):
    """Rotary position embedding on consecutive dim pairs.

    ``x`` is (..., L, D) with D even; ``cos``/``sin`` are (L, D/2) rotation
    tables. Position 0 rows of the tables are (1, 0): the identity rotation.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"apply_rope: last dimension must be even, got {d}")
    pair_shape = x.shape[:-1] + (d // 2, 2)
    xp = x.data.reshape(pair_shape)
    x0, x1 = xp[..., 0], xp[..., 1]
    out = np.empty_like(xp)
    out[..., 0] = x0 * cos - x1 * sin
    out[..., 1] = x0 * sin + x1 * cos

    def backward(g):
        gp = g.reshape(pair_shape)
        g0, g1 = gp[..., 0], gp[..., 1]
        dx = np.empty_like(xp)
        dx[..., 0] = g0 * cos + g1 * sin
        dx[..., 1] = -g0 * sin + g1 * cos
        _accumulate(x, dx.reshape(x.shape))

    return _make(out.reshape(x.shape), "rope", (x,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets, mask):
    """Mean NLL over masked positions of ``logits`` (L, V).

    ``targets`` are int token ids, ``mask`` is 0/1 per position. Positions
    with mask 0 contribute nothing to the value or gradient; an all-zero mask
    yields exactly 0.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.intp)
    mask_arr = np.asarray(mask, dtype=logits.dtype)
    if targets.shape != (n,) or mask_arr.shape != (n,):
        raise ValueError(f"cross_entropy: targets/mask must have shape ({n},)")
    if np.any((targets < 0) | (targets >= v)):
        raise ValueError(f"cross_entropy: target id outside [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(n), targets]
    n_masked = mask_arr.sum()
    denom = max(float(n_masked), 1.0)
    out_data = np.asarray((nll * mask_arr).sum() / denom, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(z - lse[:, None])
        probs[np.arange(n), targets] -= 1.0
        probs *= (mask_arr / denom)[:, None]
        _accumulate(logits, g * probs)

    return _make(out_data, "cross_entropy", (logits,), backward)


def _masked_elem_weights(pred, mask):
    mask_arr = np.asarray(mask, dtype=pred.dtype)
    if mask_arr.shape == pred.shape:
        weights = mask_arr
    elif mask_arr.shape == pred.shape[:-1]:
        weights = np.broadcast_to(mask_arr[..., None], pred.shape)
    else:
        raise ValueError(
            f"mask shape {mask_arr.shape} matches neither {pred.shape} nor {pred.shape[:-1]}")
    return weights, max(float(weights.sum()), 1.0)


def mse_l2(pred, target, mask):
    """Per-element mean squared error over masked positions.

    ``mask`` is per-position (pred.shape[:-1]) or per-element (pred.shape);
    the divisor is the number of masked elements. All-zero mask yields 0.
    """
    _check_same_dtype(pred, target, "mse_l2")
    if pred.shape != target.shape:
        raise ValueError(f"mse_l2: shape mismatch {pred.shape} vs {target.shape}")
    weights, denom = _masked_elem_weights(pred, mask)
    diff = pred.data - target.data
    out_data = np.asarray((weights * diff * diff).sum() / denom, dtype=pred.dtype)

    def backward(g):
        d = g * 2.0 * weights * diff / denom
        _accumulate(pred, d)
        _accumulate(target, -d)

    return _make(out_data, "mse_l2", (pred, target), backward)


def l1_masked(pred, target, mask):
    """Per-element mean absolute error over masked positions."""
    _check_same_dtype(pred, target, "l1_masked")
    if pred.shape != target.shape:
        raise ValueError(f"l1_masked: shape mismatch {pred.shape} vs {target.shape}")
    weights, denom = _masked_elem_weights(pred, mask)
    diff = pred.data - target.data
    out_data = np.asarray((weights * np.abs(diff)).sum() / denom, dtype=pred.dtype)

    def backward(g):
        d = g * weights * np.sign(diff) / denom
        _accumulate(pred, d)
        _accumulate(target, -d)

    return _make(out_data, "l1_masked", (pred, target), backward)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def adamw_step(param, grad, m, v, step, lr, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
    """One in-place AdamW update with bias correction. ``step`` is 1-based."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """AdamW over named parameters; lr is supplied per step by the caller."""

    def __init__(self, named_params, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.0):
        self.named_params = list(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr):
        self.step_count += 1
        for name, p in self.named_params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            adamw_step(p.data, grad, self.m[name], self.v[name], self.step_count,
                       lr, self.betas, self.eps, self.weight_decay)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


def warmup_cosine_lr(step, warmup_steps, total_steps, base_lr):
    """Linear ramp 0 -> base_lr over warmup, cosine decay to 0 at total_steps."""
    if step >= total_steps:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
