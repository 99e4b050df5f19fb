"""Shared test oracles, independent of the library's backward pass."""

import numpy as np

from resample_forge.autodiff import Tensor


def numeric_grad(f, tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() w.r.t. tensor.data.

    f rebuilds its graph on every call (eager taping), so mutating the
    leaf data between calls is enough to probe the forward function.
    """
    base = tensor.data.copy()
    grad = np.zeros_like(base)
    flat = tensor.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f().item()
        flat[i] = orig - step
        f_minus = f().item()
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * step)
    tensor.data[...] = base
    return grad


def check_grads(f, tensors, rtol: float = 1e-4, atol: float = 1e-7,
                step: float = 1e-5) -> None:
    """Assert analytic gradients of scalar f() match central differences."""
    for t in tensors:
        t.grad = None
    out = f()
    out.backward()
    for t in tensors:
        assert t.grad is not None, "missing gradient"
        numeric = numeric_grad(f, t, step=step)
        np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol)
