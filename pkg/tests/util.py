"""Shared test helpers: the central finite-difference gradient oracle."""

import numpy as np

from digs.tape import GradientTape


def numeric_gradient(eval_loss, param_data, eps=1e-6):
    """Central finite differences of `eval_loss()` w.r.t. `param_data` in place."""
    grad = np.zeros_like(param_data)
    flat = param_data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = eval_loss()
        flat[i] = orig - eps
        fm = eval_loss()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def assert_gradients_match(build_loss, params, eps=1e-6, rtol=1e-3, atol=1e-6):
    """Compare tape gradients of build_loss() against central differences.

    `build_loss` must rebuild the forward graph from the params' current
    .data each call and return a scalar Tensor.  The FD oracle never touches
    the tape; it only re-evaluates the forward value.
    """
    tape = GradientTape()
    for p in params:
        p.zero_grad()
    loss = build_loss()
    tape.backward(loss)
    for p in params:
        fd = numeric_gradient(lambda: float(build_loss().data), p.data, eps=eps)
        got = p.grad
        err = np.abs(got - fd)
        tol = atol + rtol * np.abs(fd)
        assert np.all(err <= tol), (
            f"gradient mismatch for {p.name or 'param'}: "
            f"max err {err.max():.3e}, worst fd {fd.reshape(-1)[np.argmax(err)]:.3e}"
        )
