"""Central finite-difference gradient checking used across the test suite."""

import numpy as np

from labmlm.tape import Tape, TapeTensor, backward


def numeric_grad(f, tensors, t_index, h=1e-5, coords=None):
    """Central differences of scalar f w.r.t. tensors[t_index].

    `coords` restricts the check to a subset of flat indices (useful for big
    parameter sets); default is every coordinate.
    """
    t = tensors[t_index]
    flat = t.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = {}
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out


def assert_grads_close(f, tensors, rel_tol=1e-4, h=1e-5, coords_per_tensor=None, rng=None):
    """Compare tape gradients of scalar f() against central differences.

    f must rebuild the graph from `tensors` on every call. Relative error uses
    max(|analytic|, |numeric|, 1e-6) in the denominator; the floor absorbs
    finite-difference noise at coordinates whose true gradient is zero.
    """
    with Tape():
        loss = f()
    for t in tensors:
        t.grad = None
    backward(loss)
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]

    for ti, t in enumerate(tensors):
        n = t.data.size
        if coords_per_tensor is not None and n > coords_per_tensor:
            assert rng is not None
            coords = rng.choice(n, size=coords_per_tensor, replace=False)
        else:
            coords = range(n)
        num = numeric_grad(f, tensors, ti, h=h, coords=coords)
        a = np.zeros(n) if analytic[ti] is None else analytic[ti].reshape(-1)
        for i, gnum in num.items():
            ga = a[i]
            denom = max(abs(ga), abs(gnum), 1e-6)
            rel = abs(ga - gnum) / denom
            assert rel < rel_tol, (
                f"tensor {ti} ({t.name or t.shape}) coord {i}: "
                f"analytic={ga:.10g} numeric={gnum:.10g} rel={rel:.3g}"
            )
