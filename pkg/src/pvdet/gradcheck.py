"""Finite-difference verification of the reverse pass."""

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad


def finite_diff_check(f, x, eps=None, max_elements=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be smooth at ``x``
    (keep inputs away from max-pool ties and other kinks). The analytic
    gradient runs in the precision ``x`` carries; the numeric side always
    evaluates in float64 so the oracle is more accurate than the
    implementation it checks. ``eps`` defaults to cbrt(float64 epsilon)
    scaled per element, near-optimal for central differences. For large
    inputs ``max_elements`` limits probing to the elements with the
    largest analytic gradients, where relative error is meaningful (a
    backward pass that wrongly zeroes gradients still fails: its "top"
    elements are then noise and the numeric side exposes them); the full
    sweep is used otherwise.

    Relative error per element is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8). Returns the max over probed
    elements; the caller asserts on it.
    """
    x0 = np.array(x.data, copy=True)
    if eps is None:
        eps = float(np.finfo(np.float64).eps) ** (1.0 / 3.0)

    probe = Tensor(x0, requires_grad=True)
    with Tape():
        out = f(probe)
        if out.size != 1:
            raise ValueError("finite_diff_check needs a scalar-valued function")
        backward(out)
    analytic = probe.grad.reshape(-1).astype(np.float64)

    flat = x0.reshape(-1).astype(np.float64)
    n = flat.size
    if max_elements is not None and max_elements < n:
        indices = np.argsort(-np.abs(analytic))[:max_elements]
    else:
        indices = np.arange(n)

    def eval_at(values):
        with no_grad():
            return float(f(Tensor(values.reshape(x0.shape), dtype=np.float64)).data)

    max_err = 0.0
    work = flat.copy()
    for i in indices:
        h = eps * max(1.0, abs(float(flat[i])))
        work[i] = flat[i] + h
        fp = eval_at(work)
        work[i] = flat[i] - h
        fm = eval_at(work)
        work[i] = flat[i]
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err > max_err:
            max_err = err
    return max_err
