"""Shared test utilities: finite-difference gradient oracle and PSNR."""

import numpy as np

from ssmiqa.tensor import Tensor


def numeric_grad(fn, arrays, wrt, h=1e-5):
    """Central finite differences of a scalar fn against arrays[wrt].

    ``fn`` takes a list of numpy arrays and returns a float. Every entry of
    arrays[wrt] is perturbed by +-h.
    """
    x = arrays[wrt]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(arrays)
        flat[i] = orig - h
        fm = fn(arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build_loss, arrays, rtol=1e-4, h=1e-5):
    """Compare analytic grads of a tensor-built scalar loss to central diffs.

    ``build_loss`` takes a list of Tensors (one per array) and returns a
    scalar Tensor. Returns the worst relative error observed.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(tensors)
    loss.backward()

    def fn(arrs):
        ts = [Tensor(a) for a in arrs]
        return float(build_loss(ts).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(fn, [a.copy() for a in arrays], i, h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-6)
        rel = np.abs(ana - num) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    assert worst <= rtol, f"gradient mismatch: worst rel err {worst:.3e} > {rtol}"
    return worst


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio between two arrays in [0, peak]."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
