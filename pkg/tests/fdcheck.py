"""Central finite-difference gradient checker (64-bit mode).

Used by every per-op gradient test and by the gradient-soundness gate:
analytic gradients from the tape must match central differences with
step 1e-4 to relative tolerance 1e-3 (atol 1e-6 absorbs exact zeros).
"""

from __future__ import annotations

import numpy as np

from luasr.tensor import Tensor, backward

FD_STEP = 1e-4
FD_RTOL = 1e-3
FD_ATOL = 1e-6


def numerical_grad(f, tensors, which, step=FD_STEP):
    """Central-difference dL/d(tensors[which]) with every input float64."""
    t = tensors[which]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(*tensors).item()
        flat[i] = orig - step
        lo = f(*tensors).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_grads(f, arrays, rtol=FD_RTOL, atol=FD_ATOL, step=FD_STEP):
    """Assert analytic grads of scalar-valued f(*tensors) match central FD.

    `arrays` are numpy float64 inputs; every one is treated as a leaf that
    requires grad.  Returns the analytic gradients for further inspection.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    loss = f(*tensors)
    backward(loss)
    analytic = []
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"input {i}: no gradient populated"
        num = numerical_grad(f, tensors, i, step=step)
        np.testing.assert_allclose(
            t.grad, num, rtol=rtol, atol=atol,
            err_msg=f"input {i}: analytic vs finite-difference mismatch")
        analytic.append(t.grad)
    return analytic
