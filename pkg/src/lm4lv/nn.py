"""Network building blocks shared by the vision codec and the text backbone.

Everything is built on the ndgrad engine: modules are plain objects holding
parameter tensors and exposing ``named_params`` for optimizers, checkpoints,
and freeze/hash checks.
"""

import hashlib

import numpy as np

from . import ndgrad as ng


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""


def iter_batches(n_items, batch_size, epochs, rng):
    """Yield (epoch, step, index array) over shuffled epochs; deterministic."""
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n_items)
        for lo in range(0, n_items - batch_size + 1, batch_size):
            yield epoch, step, order[lo:lo + batch_size]
            step += 1


def total_steps(n_items, batch_size, epochs):
    return (n_items // batch_size) * epochs


def params_digest(named_params):
    """Order-independent SHA-256 over parameter names, shapes, and bytes."""
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(str(p.shape).encode())
        h.update(str(p.dtype).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def set_requires_grad(named_params, flag):
    for _, p in named_params:
        p.requires_grad = flag


class Linear:
    def __init__(self, rng, d_in, d_out, std=0.02, dtype=np.float32):
        self.w = ng.Tensor(rng.normal(0.0, std, (d_in, d_out)), requires_grad=True, dtype=dtype)
        self.b = ng.Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return ng.add(ng.matmul(x, self.w), self.b)

    def named_params(self, prefix):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class LayerNorm:
    def __init__(self, d, dtype=np.float32):
        self.gamma = ng.Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = ng.Tensor(np.zeros(d), requires_grad=True, dtype=dtype)

    def __call__(self, x):
        return ng.layernorm(x, self.gamma, self.beta)

    def named_params(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]


class Mlp:
    """Two-layer GELU MLP with the conventional 4x expansion."""

    def __init__(self, rng, d, hidden=None, dtype=np.float32):
        hidden = 4 * d if hidden is None else hidden
        self.fc1 = Linear(rng, d, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, d, dtype=dtype)

    def __call__(self, x):
        return self.fc2(ng.gelu(self.fc1(x)))

    def named_params(self, prefix):
        return self.fc1.named_params(prefix + ".fc1") + self.fc2.named_params(prefix + ".fc2")


def rope_tables(max_len, head_dim, base=10000.0, dtype=np.float32):
    """Cosine/sine rotation tables, (max_len, head_dim/2) each."""
    freqs = base ** (-np.arange(head_dim // 2, dtype=np.float64) * 2.0 / head_dim)
    angles = np.arange(max_len, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def causal_bias(length, dtype=np.float32):
    """Additive attention bias: 0 on/below the diagonal, -1e9 above."""
    mask = np.triu(np.full((length, length), -1e9, dtype=dtype), k=1)
    return mask


class Attention:
    def __init__(self, rng, d, heads, dtype=np.float32):
        if d % heads != 0:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.wq = Linear(rng, d, d, dtype=dtype)
        self.wk = Linear(rng, d, d, dtype=dtype)
        self.wv = Linear(rng, d, d, dtype=dtype)
        self.wo = Linear(rng, d, d, dtype=dtype)

    def __call__(self, x, causal=False, rope=None):
        """x is (B, L, D). ``rope`` is an optional (cos, sin) table pair."""
        b, length, d = x.shape
        scale = 1.0 / np.sqrt(self.head_dim)

        def split(t):
            t = ng.reshape(t, (b, length, self.heads, self.head_dim))
            return ng.transpose(t, (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        if rope is not None:
            cos, sin = rope
            q = ng.apply_rope(q, cos[:length], sin[:length])
            k = ng.apply_rope(k, cos[:length], sin[:length])
        scores = ng.scale(ng.matmul(q, ng.transpose(k, (0, 1, 3, 2))), scale)
        if causal:
            scores = ng.add(scores, ng.Tensor(causal_bias(length, x.dtype)))
        attn = ng.softmax_lastdim(scores)
        out = ng.transpose(ng.matmul(attn, v), (0, 2, 1, 3))
        return self.wo(ng.reshape(out, (b, length, d)))

    def named_params(self, prefix):
        out = []
        for tag, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out += lin.named_params(f"{prefix}.{tag}")
        return out


class Block:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, d, heads, dtype=np.float32):
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.attn = Attention(rng, d, heads, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.mlp = Mlp(rng, d, dtype=dtype)

    def __call__(self, x, causal=False, rope=None):
        x = ng.add(x, self.attn(self.ln1(x), causal=causal, rope=rope))
        return ng.add(x, self.mlp(self.ln2(x)))

    def named_params(self, prefix):
        return (self.ln1.named_params(prefix + ".ln1")
                + self.attn.named_params(prefix + ".attn")
                + self.ln2.named_params(prefix + ".ln2")
                + self.mlp.named_params(prefix + ".mlp"))


def sincos_2d(grid, dim, dtype=np.float32):
    """Fixed 2-d sine-cosine position table for a grid x grid patch layout."""
    if dim % 4 != 0:
        raise ValueError(f"position dim {dim} must be divisible by 4")
    half = dim // 2

    def axis_table(positions):
        freqs = 10000.0 ** (-np.arange(half // 2, dtype=np.float64) * 2.0 / half)
        angles = positions[:, None] * freqs[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    coords = np.arange(grid, dtype=np.float64)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    table = np.concatenate([axis_table(ys.reshape(-1)), axis_table(xs.reshape(-1))], axis=1)
    return table.astype(dtype)
