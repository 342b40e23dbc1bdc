"""Stateful layers: each caches what its backward pass needs and accumulates
parameter gradients into ``grads``.  Networks are explicit lists of layers."""
from __future__ import annotations

import numpy as np

from . import functional as F


class Layer:
    """Base layer: ``params``/``grads`` share keys; ``buffers`` hold non-learned state."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _accumulate(self, name, g):
        self.grads[name] = self.grads[name] + g

    def __call__(self, x):
        return self.forward(x)


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv3d(Layer):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, rng=None, input_grad=True):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        # the first layer of a network has no use for dL/dx
        self.input_grad = input_grad
        self.params["w"] = he_uniform(rng, (cout, cin, k, k, k), cin * k ** 3)
        self.params["b"] = np.zeros(cout)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return F.conv3d(x, self.params["w"], self.params["b"], self.stride, self.padding)

    def backward(self, dy):
        dx, dw, db = F.conv3d_backward(dy, self._x, self.params["w"], self.stride, self.padding)
        self._accumulate("w", dw)
        self._accumulate("b", db)
        return dx if self.input_grad else None


class ConvTranspose3d(Layer):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, output_padding=0, rng=None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError("kernel size must be odd")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.output_padding = output_padding
        # each output voxel receives about cin * k^3 / stride^3 contributions
        fan_in = max(1, cin * k ** 3 // stride ** 3)
        self.params["w"] = he_uniform(rng, (cin, cout, k, k, k), fan_in)
        self.params["b"] = np.zeros(cout)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return F.conv_transpose3d(x, self.params["w"], self.params["b"], self.stride,
                                  self.padding, self.output_padding)

    def backward(self, dy):
        dx, dw, db = F.conv_transpose3d_backward(dy, self._x, self.params["w"], self.stride,
                                                 self.padding)
        self._accumulate("w", dw)
        self._accumulate("b", db)
        return dx


class BatchNorm3d(Layer):
    def __init__(self, channels, momentum=0.1, eps=1e-8):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self.zero_grad()

    def forward(self, x):
        g, b = self.params["gamma"], self.params["beta"]
        if self.training:
            y, self._cache, mean, var = F.batchnorm3d_train(x, g, b, self.eps)
            m = x.shape[0] * int(np.prod(x.shape[2:]))
            unbiased = var * m / (m - 1)
            mom = self.momentum
            self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mean
            self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * unbiased
            self._mode = "train"
        else:
            y, self._cache = F.batchnorm3d_eval(x, g, b, self.buffers["running_mean"],
                                                self.buffers["running_var"], self.eps)
            self._mode = "eval"
        return y

    def backward(self, dy):
        if self._mode == "train":
            dx, dg, db = F.batchnorm3d_train_backward(dy, self._cache)
        else:
            dx, dg, db = F.batchnorm3d_eval_backward(dy, self._cache)
        self._accumulate("gamma", dg)
        self._accumulate("beta", db)
        return dx


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return F.relu(x)

    def backward(self, dy):
        return F.relu_backward(dy, self._x)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = F.sigmoid(x)
        return self._y

    def backward(self, dy):
        return F.sigmoid_backward(dy, self._y)


class Tanh(Layer):
    def forward(self, x):
        self._y = F.tanh(x)
        return self._y

    def backward(self, dy):
        return F.tanh_backward(dy, self._y)


class Dense(Layer):
    def __init__(self, fin, fout, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = he_uniform(rng, (fin, fout), fin)
        self.params["b"] = np.zeros(fout)
        self.zero_grad()

    def forward(self, x):
        self._x = x
        return F.dense(x, self.params["w"], self.params["b"])

    def backward(self, dy):
        dx, dw, db = F.dense_backward(dy, self._x, self.params["w"])
        self._accumulate("w", dw)
        self._accumulate("b", db)
        return dx


class LSTM(Layer):
    """Single LSTM layer over a sequence ``(T, N, F)`` from zero initial state.

    Returns every hidden state ``(T, N, H)``.
    """

    def __init__(self, fin, hidden, rng=None, forget_bias=1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.params["wx"] = rng.uniform(-bound, bound, size=(fin, 4 * hidden))
        self.params["wh"] = rng.uniform(-bound, bound, size=(hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        self.params["b"] = b
        self.zero_grad()

    def forward(self, xs):
        n = xs.shape[1]
        h0 = np.zeros((n, self.hidden))
        hs, self._caches = F.lstm_forward(xs, h0, h0.copy(), self.params["wx"],
                                          self.params["wh"], self.params["b"])
        return hs

    def backward(self, dhs):
        dxs, dwx, dwh, db, _, _ = F.lstm_backward(dhs, self._caches, self.params["wx"],
                                                  self.params["wh"])
        self._accumulate("wx", dwx)
        self._accumulate("wh", dwh)
        self._accumulate("b", db)
        return dxs


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for layer in getattr(self, "layers", []):
            layer.zero_grad()

    def train(self, mode=True):
        self.training = mode
        for layer in getattr(self, "layers", []):
            layer.train(mode)
        return self

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}", layer


def named_tensors(named_layers):
    """Flatten ``(name, layer)`` pairs into ``{name.param: array}`` for params and buffers."""
    params, buffers = {}, {}
    for lname, layer in named_layers:
        for k, v in layer.params.items():
            params[f"{lname}.{k}"] = v
        for k, v in layer.buffers.items():
            buffers[f"{lname}.{k}"] = v
    return params, buffers
