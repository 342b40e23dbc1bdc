"""Central finite-difference verification of analytic backward passes."""
from __future__ import annotations

import numpy as np


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)`` with a floor so all-zero pairs compare as equal."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def gradcheck(layer, x, eps=1e-5, seed=0, check_input=True):
    """Largest relative error between ``layer.backward`` and finite differences.

    The scalar objective is ``sum(layer.forward(x) * r)`` for a fixed random ``r``,
    so every output element contributes.  Compares the input gradient and the
    gradient of every entry in ``layer.params``.
    """
    x = np.array(x, dtype=np.float64)
    y = layer.forward(x)
    r = np.random.default_rng(seed).normal(size=y.shape)
    layer.zero_grad()
    dx = layer.backward(r)
    analytic = {k: layer.grads[k].copy() for k in layer.params}

    def objective():
        return float(np.sum(layer.forward(x) * r))

    errors = []
    if check_input and dx is not None:
        errors.append(relative_error(dx, numeric_gradient(objective, x, eps)))
    for k, p in layer.params.items():
        errors.append(relative_error(analytic[k], numeric_gradient(objective, p, eps)))
    return max(errors)


def gradcheck_function(forward, backward, inputs, eps=1e-5, seed=0):
    """Gradcheck for a functional pair.

    ``forward(*inputs) -> y``; ``backward(dy, *inputs) -> tuple of gradients``
    aligned with ``inputs``.  Returns the maximum relative error.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    y = forward(*inputs)
    r = np.random.default_rng(seed).normal(size=np.shape(y))
    grads = backward(r, *inputs)

    def objective():
        return float(np.sum(forward(*inputs) * r))

    return max(relative_error(g, numeric_gradient(objective, a, eps))
               for g, a in zip(grads, inputs) if g is not None)


# --------------------------------------------------------------------------
# Fixed-seed suite over every layer type

TOLERANCE = 1e-4


def _away_from_kink(x, margin=1e-3):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _loss_check(loss, rng):
    pred = rng.uniform(0.1, 0.9, size=(3, 4))
    target = rng.uniform(0.0, 1.0, size=(3, 4))
    _, g = loss(pred, target)
    return relative_error(g, numeric_gradient(lambda: loss(pred, target)[0], pred))


def suite_cases():
    """``(name, check)`` pairs; each ``check()`` returns the worst relative error."""
    from . import functional as F
    from .layers import LSTM, BatchNorm3d, Conv3d, ConvTranspose3d, Dense, ReLU, Sigmoid, Tanh

    def layer_case(factory, shape, transform=None, setup=None):
        def check():
            rng = np.random.default_rng(7)
            layer = factory(rng)
            if setup is not None:
                setup(layer)
            x = rng.normal(size=shape)
            if transform is not None:
                x = transform(x)
            return gradcheck(layer, x, eps=1e-6, seed=1)
        return check

    def bn_eval(bn):
        bn.params["gamma"][:] = [0.7, 1.3]
        bn.buffers["running_mean"][:] = [0.1, -0.2]
        bn.buffers["running_var"][:] = [1.5, 0.5]
        bn.eval()

    return [
        ("conv3d", layer_case(lambda r: Conv3d(2, 3, 3, 1, rng=r), (2, 2, 4, 4, 4))),
        ("conv3d_stride2", layer_case(lambda r: Conv3d(2, 2, 3, 2, rng=r), (1, 2, 5, 4, 4))),
        ("tconv3d", layer_case(lambda r: ConvTranspose3d(2, 3, 3, 1, rng=r), (2, 2, 3, 3, 3))),
        ("tconv3d_stride2", layer_case(
            lambda r: ConvTranspose3d(2, 2, 3, 2, output_padding=1, rng=r), (1, 2, 3, 3, 3))),
        ("batchnorm_train", layer_case(lambda r: BatchNorm3d(3), (2, 3, 2, 2, 3))),
        ("batchnorm_eval", layer_case(lambda r: BatchNorm3d(2), (2, 2, 2, 2, 2), setup=bn_eval)),
        ("dense", layer_case(lambda r: Dense(5, 4, rng=r), (3, 5))),
        ("relu", layer_case(lambda r: ReLU(), (2, 2, 3, 3, 3), transform=_away_from_kink)),
        ("sigmoid", layer_case(lambda r: Sigmoid(), (2, 3, 2, 2, 2))),
        ("tanh", layer_case(lambda r: Tanh(), (2, 3, 2, 2, 2))),
        ("lstm_T3", layer_case(lambda r: LSTM(4, 3, rng=r), (3, 2, 4))),
        ("mse_loss", lambda: _loss_check(F.mse_loss, np.random.default_rng(11))),
        ("bce_loss", lambda: _loss_check(F.bce_loss, np.random.default_rng(12))),
    ]


def run_suite(tol=TOLERANCE):
    """Run every case; returns a list of ``(name, error, passed)``."""
    out = []
    for name, check in suite_cases():
        err = check()
        out.append((name, err, bool(err <= tol)))
    return out
