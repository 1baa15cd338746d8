"""Shared numeric helpers for the test suite."""

import numpy as np


def central_diff_scalar(f, x, h=1e-6):
    """Central difference of f at scalar x; f may return an array."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def num_grad(f, x, h=1e-6):
    """Numerical gradient of a scalar-valued f with respect to array x.

    Perturbs one element at a time with a central difference. Mutates x
    in place during probing but restores every element before returning.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def force_flat_masks(model):
    """Push every masked layer to the flat limit: static sigmas to the
    upper clamp, dynamic modules to bias-only outputs that clamp high."""
    from gmconv import masks
    from gmconv.layers import StaticGMConvLayer

    for _, layer in model.masked_layer_items():
        if isinstance(layer, StaticGMConvLayer):
            layer.sigma.data[...] = masks.SIGMA_MAX
        else:
            layer.sigma_module.w0.data[:] = 0.0
            layer.sigma_module.w1.data[:] = 0.0
            layer.sigma_module.b1.data[:] = 2e6  # softplus(2e6) = 2e6, clamps to max


def copy_shared_params(src_model, dst_model):
    """Copy every parameter whose name exists in both models (the conv
    and dense weights a masked model shares with its plain twin)."""
    src = dict(src_model.named_parameters())
    for name, t in dst_model.named_parameters():
        if name in src:
            t.data[...] = src[name].data
