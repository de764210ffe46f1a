"""Central finite-difference gradient checker."""
import numpy as np

from .tensor import Tensor


def grad_check(f, point, h=1e-5, max_coords=None, rng=None):
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over coordinates.

    ``f`` maps the tensor(s) in ``point`` to a scalar Tensor. ``point`` is a
    Tensor, a list of Tensors, or an array (wrapped as a single Tensor).
    With ``max_coords`` only that many coordinates per tensor are probed,
    chosen by ``rng``.
    """
    single_array = not isinstance(point, (Tensor, list, tuple))
    tensors = [Tensor(point, requires_grad=True)] if single_array else (
        [point] if isinstance(point, Tensor) else list(point))
    call = (lambda: f(tensors[0])) if single_array or isinstance(point, Tensor) else f
    for t in tensors:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    loss = call()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(call().data)
            flat[i] = orig - h
            fm = float(call().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    for t in tensors:
        t.grad = None
    return worst
