import numpy as np
import pytest

from lm4lv import ndgrad as ng


def finite_diff_grad(func, leaves, h=1e-4):
    """Central-difference gradients of a scalar-valued ``func``.

    ``func`` rebuilds the graph from the current leaf data on every call and
    returns a float. Leaves must be float64 tensors for the stated accuracy.
    """
    grads = []
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = func()
            flat[i] = orig - h
            f_minus = func()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2 * h)
        grads.append(g.reshape(leaf.shape))
    return grads


def check_gradients(build_loss, leaves, rtol=1e-3, atol=1e-6, h=1e-4):
    """Assert reverse-mode grads of ``build_loss()`` match finite differences."""
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    loss.backward()
    fd = finite_diff_grad(lambda: float(build_loss().data), leaves, h=h)
    for leaf, g_fd in zip(leaves, fd):
        assert leaf.grad is not None, "missing gradient"
        np.testing.assert_allclose(leaf.grad, g_fd, rtol=rtol, atol=atol)


def random_projection_loss(out, rng):
    """Fixed random scalar projection of an op output, as a test loss."""
    r = rng.standard_normal(out.shape).astype(out.dtype)
    return ng.sum_all(ng.mul(out, ng.Tensor(r)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def leaf(rng, *shape):
    return ng.Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)
