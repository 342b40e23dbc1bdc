"""Forward and backward kernels for the layers used by the volumetric networks.

Tensors are channel-first ``(N, C, D, H, W)`` float64 arrays.  Convolutions are
computed channel-last internally with chunked im2col so that peak memory stays
bounded on a 32^3 grid with a full batch.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import DegenerateBatch, ShapeMismatch

# Upper bound on im2col elements materialized at once (~32 MB of float64).
_COL_BUDGET = 1 << 22


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int,
                               output_padding: int = 0) -> int:
    return (size - 1) * stride - 2 * padding + k + output_padding


def _check5(x, name="input"):
    if x.ndim != 5:
        raise ShapeMismatch(f"{name} must be 5-D (N, C, D, H, W), got shape {x.shape}")


def _pad_channel_last(x, padding):
    xl = x.transpose(0, 2, 3, 4, 1)
    if padding == 0:
        return np.ascontiguousarray(xl)
    p = padding
    return np.pad(xl, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))


def _chunks(n, rows_per_sample, cols):
    step = max(1, _COL_BUDGET // max(1, rows_per_sample * cols))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _im2col(xl, k, stride, out_dims):
    """Patches of a padded channel-last tensor, one row per output position."""
    do, ho, wo = out_dims
    s = stride
    v = sliding_window_view(xl, (k, k, k), axis=(1, 2, 3))
    v = v[:, : s * (do - 1) + 1 : s, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    return v.reshape(xl.shape[0] * do * ho * wo, -1)


def _conv_forward_cl(xl, w, stride, out_dims):
    """Channel-last correlation of padded ``xl`` with ``w`` of shape (O, C, k, k, k)."""
    n = xl.shape[0]
    o, c, k = w.shape[0], w.shape[1], w.shape[2]
    wm = w.reshape(o, -1).T
    rows = int(np.prod(out_dims))
    out = np.empty((n,) + tuple(out_dims) + (o,))
    for sl in _chunks(n, rows, c * k ** 3):
        cols = _im2col(xl[sl], k, stride, out_dims)
        out[sl] = (cols @ wm).reshape((-1,) + tuple(out_dims) + (o,))
    return out


def _conv_weight_grad_cl(xl, gl, k, stride):
    """dL/dw for a correlation whose padded channel-last input is ``xl``.

    ``gl`` is the channel-last output gradient (N, Do, Ho, Wo, O).
    """
    n = xl.shape[0]
    out_dims = gl.shape[1:4]
    o = gl.shape[4]
    c = xl.shape[4]
    rows = int(np.prod(out_dims))
    acc = np.zeros((c * k ** 3, o))
    for sl in _chunks(n, rows, c * k ** 3):
        cols = _im2col(xl[sl], k, stride, out_dims)
        acc += cols.T @ gl[sl].reshape(-1, o)
    return acc.T.reshape(o, c, k, k, k)


def _conv_input_grad_cl(gl, w, stride, padded_dims):
    """Scatter an output gradient back onto the padded channel-last input grid."""
    n = gl.shape[0]
    do, ho, wo = gl.shape[1:4]
    o, c, k = w.shape[0], w.shape[1], w.shape[2]
    s = stride
    dxp = np.zeros((n,) + tuple(padded_dims) + (c,))
    wm = w.reshape(o, c * k ** 3)
    rows = do * ho * wo
    for sl in _chunks(n, rows, c * k ** 3):
        tmp = (gl[sl].reshape(-1, o) @ wm).reshape(-1, do, ho, wo, c, k, k, k)
        dst = dxp[sl]
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    dst[:, kd : kd + s * (do - 1) + 1 : s,
                        kh : kh + s * (ho - 1) + 1 : s,
                        kw : kw + s * (wo - 1) + 1 : s] += tmp[..., kd, kh, kw]
    return dxp


def _crop_channel_first(dxp, padding, dims):
    p = padding
    d, h, w = dims
    return np.ascontiguousarray(
        dxp[:, p : p + d, p : p + h, p : p + w].transpose(0, 4, 1, 2, 3))


def _check_conv_args(x, w, b, cin_axis):
    _check5(x)
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[2] != w.shape[4]:
        raise ShapeMismatch(f"weights must have shape (., ., k, k, k), got {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeMismatch(
            f"input has {x.shape[1]} channels but weights expect {w.shape[cin_axis]}")
    if b is not None and b.shape != (w.shape[1 - cin_axis],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match weights {w.shape}")


# --------------------------------------------------------------------------
# 3D convolution

def conv3d(x, w, b=None, stride=1, padding=0):
    """Strided 3D cross-correlation.

    Parameters
    ----------
    x : ndarray (N, Cin, D, H, W)
    w : ndarray (Cout, Cin, k, k, k)
    b : ndarray (Cout,) or None
    """
    _check_conv_args(x, w, b, cin_axis=1)
    k = w.shape[2]
    dims = tuple(conv_output_size(s, k, stride, padding) for s in x.shape[2:])
    if min(dims) < 1:
        raise ShapeMismatch(f"kernel {k} does not fit input {x.shape[2:]} with padding {padding}")
    out = _conv_forward_cl(_pad_channel_last(x, padding), w, stride, dims)
    if b is not None:
        out += b
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d_backward(dy, x, w, stride=1, padding=0):
    """Gradients ``(dx, dw, db)`` of :func:`conv3d` given the output gradient ``dy``."""
    k = w.shape[2]
    gl = np.ascontiguousarray(dy.transpose(0, 2, 3, 4, 1))
    xl = _pad_channel_last(x, padding)
    dw = _conv_weight_grad_cl(xl, gl, k, stride)
    dxp = _conv_input_grad_cl(gl, w, stride, xl.shape[1:4])
    dx = _crop_channel_first(dxp, padding, x.shape[2:])
    db = dy.sum(axis=(0, 2, 3, 4))
    return dx, dw, db


# --------------------------------------------------------------------------
# 3D transposed convolution (adjoint of conv3d for the same weights)

def conv_transpose3d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed 3D convolution.

    ``w`` has shape (Cin, Cout, k, k, k), the same array a :func:`conv3d` mapping
    Cout -> Cin would use; without bias the operator is that convolution's adjoint.
    ``output_padding`` (< stride) extends the far edge so a stride-2 layer can
    restore an even input size.
    """
    _check_conv_args(x, w, b, cin_axis=0)
    if output_padding < 0 or output_padding >= max(stride, 1):
        raise ShapeMismatch("output_padding must be smaller than stride")
    k = w.shape[2]
    dims = tuple(conv_transpose_output_size(s, k, stride, padding, output_padding)
                 for s in x.shape[2:])
    if min(dims) < 1:
        raise ShapeMismatch(f"transposed conv yields empty output for input {x.shape[2:]}")
    gl = np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))
    padded = tuple(d + 2 * padding for d in dims)
    yp = _conv_input_grad_cl(gl, w, stride, padded)
    y = _crop_channel_first(yp, padding, dims)
    if b is not None:
        y += b[None, :, None, None, None]
    return y


def conv_transpose3d_backward(dy, x, w, stride=1, padding=0):
    """Gradients ``(dx, dw, db)`` of :func:`conv_transpose3d`."""
    k = w.shape[2]
    dyl = _pad_channel_last(dy, padding)
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 4, 1))
    in_dims = x.shape[2:]
    dx = _conv_forward_cl(dyl, w, stride, in_dims)
    dw = _conv_weight_grad_cl(dyl, xl, k, stride)
    db = dy.sum(axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3)), dw, db


# --------------------------------------------------------------------------
# Batch normalization over (N, D, H, W) per channel

def batchnorm3d_train(x, gamma, beta, eps=1e-8):
    """Returns ``(y, cache, batch_mean, batch_var)``; variance is the biased estimate."""
    _check5(x)
    m = x.shape[0] * int(np.prod(x.shape[2:]))
    if m < 2:
        raise DegenerateBatch("batch norm in train mode needs N*D*H*W >= 2")
    axes = (0, 2, 3, 4)
    mean = x.mean(axis=axes)
    xc = x - mean[None, :, None, None, None]
    var = np.mean(xc * xc, axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None, None]
    y = xhat * gamma[None, :, None, None, None] + beta[None, :, None, None, None]
    return y, (xhat, inv_std, gamma), mean, var


def batchnorm3d_train_backward(dy, cache):
    xhat, inv_std, gamma = cache
    axes = (0, 2, 3, 4)
    m = dy.shape[0] * int(np.prod(dy.shape[2:]))
    dbeta = dy.sum(axis=axes)
    dgamma = np.sum(dy * xhat, axis=axes)
    dxhat = dy * gamma[None, :, None, None, None]
    sum_dxhat = dxhat.sum(axis=axes)[None, :, None, None, None]
    sum_dxhat_xhat = np.sum(dxhat * xhat, axis=axes)[None, :, None, None, None]
    dx = (inv_std[None, :, None, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


def batchnorm3d_eval(x, gamma, beta, running_mean, running_var, eps=1e-8):
    _check5(x)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma * inv_std)[None, :, None, None, None]
    xhat = (x - running_mean[None, :, None, None, None]) * inv_std[None, :, None, None, None]
    y = xhat * gamma[None, :, None, None, None] + beta[None, :, None, None, None]
    return y, (xhat, scale)


def batchnorm3d_eval_backward(dy, cache):
    xhat, scale = cache
    axes = (0, 2, 3, 4)
    return dy * scale, np.sum(dy * xhat, axis=axes), dy.sum(axis=axes)


# --------------------------------------------------------------------------
# Elementwise activations

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


# --------------------------------------------------------------------------
# Dense

def dense(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b


def dense_backward(dy, x, w):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


# --------------------------------------------------------------------------
# LSTM.  Gate blocks in the 4H axis are ordered (input, forget, output, cell).

def lstm_cell(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step; returns ``(h, c, cache)``."""
    hidden = h_prev.shape[1]
    if (wx.shape != (x.shape[1], 4 * hidden) or wh.shape != (hidden, 4 * hidden)
            or b.shape != (4 * hidden,) or c_prev.shape != h_prev.shape
            or x.shape[0] != h_prev.shape[0]):
        raise ShapeMismatch(
            f"lstm: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"wx {wx.shape}, wh {wh.shape}, b {b.shape}")
    a = x @ wx + h_prev @ wh + b
    i = sigmoid(a[:, :hidden])
    f = sigmoid(a[:, hidden : 2 * hidden])
    o = sigmoid(a[:, 2 * hidden : 3 * hidden])
    g = np.tanh(a[:, 3 * hidden :])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, o, g, tc)


def lstm_cell_backward(dh, dc, cache, wx, wh):
    """Backward of one step given gradients flowing into ``h`` and ``c``."""
    x, h_prev, c_prev, i, f, o, g, tc = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dc_prev = dc * f
    da = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)],
                        axis=1)
    dx = da @ wx.T
    dh_prev = da @ wh.T
    return dx, dh_prev, dc_prev, x.T @ da, h_prev.T @ da, da.sum(axis=0)


def lstm_forward(xs, h0, c0, wx, wh, b):
    """Unroll over ``xs`` of shape (T, N, F); returns hidden states (T, N, H) and caches."""
    h, c = h0, c0
    hs, caches = [], []
    for t in range(xs.shape[0]):
        h, c, cache = lstm_cell(xs[t], h, c, wx, wh, b)
        hs.append(h)
        caches.append(cache)
    return np.stack(hs), caches


def lstm_backward(dhs, caches, wx, wh):
    """Backpropagation through time.

    ``dhs`` (T, N, H) holds the loss gradient w.r.t. every emitted hidden state.
    Returns ``(dxs, dwx, dwh, db, dh0, dc0)``.
    """
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(wx.shape[1])
    dh_next = np.zeros_like(dhs[0])
    dc_next = np.zeros_like(dhs[0])
    dxs = [None] * len(caches)
    for t in reversed(range(len(caches))):
        dx, dh_next, dc_next, gwx, gwh, gb = lstm_cell_backward(
            dhs[t] + dh_next, dc_next, caches[t], wx, wh)
        dxs[t] = dx
        dwx += gwx
        dwh += gwh
        db += gb
    return np.stack(dxs), dwx, dwh, db, dh_next, dc_next


# --------------------------------------------------------------------------
# Losses; each returns (value, gradient w.r.t. pred)

def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = diff.size
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


BCE_CLAMP = 1e-7


def bce_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"bce: pred {pred.shape} vs target {target.shape}")
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = -np.sum(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)) / n
    grad = -(target / p - (1.0 - target) / (1.0 - p)) / n
    return float(loss), grad
