from __future__ import annotations

import numpy as np

from ..exceptions import ShapeMismatch


def adam_step(w, g, m, v, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.  ``t`` is the 1-based step count.

    Returns new ``(w, m, v)``; inputs are not modified.
    """
    if not (w.shape == g.shape == m.shape == v.shape):
        raise ShapeMismatch(f"adam: w {w.shape}, g {g.shape}, m {m.shape}, v {v.shape}")
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return w - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a fixed list of ``(name, layer)`` pairs.

    Parameters are updated in place inside ``layer.params`` so that layers
    keep referencing the same arrays.  ``layer_lr`` maps layer names to their own
    learning rate; other layers use ``lr``.
    """

    def __init__(self, named_layers, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, layer_lr=None):
        self.named_layers = list(named_layers)
        self.lr = lr
        self.layer_lr = dict(layer_lr or {})
        unknown = set(self.layer_lr) - {n for n, _ in self.named_layers}
        if unknown:
            raise ValueError(f"layer_lr names unknown layers: {sorted(unknown)}")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for lname, layer in self.named_layers:
            for k, p in layer.params.items():
                self.m[f"{lname}.{k}"] = np.zeros_like(p)
                self.v[f"{lname}.{k}"] = np.zeros_like(p)

    def zero_grad(self):
        for _, layer in self.named_layers:
            layer.zero_grad()

    def step(self):
        self.t += 1
        for lname, layer in self.named_layers:
            lr = self.layer_lr.get(lname, self.lr)
            for k, p in layer.params.items():
                name = f"{lname}.{k}"
                new_w, self.m[name], self.v[name] = adam_step(
                    p, layer.grads[k], self.m[name], self.v[name], self.t,
                    lr, self.beta1, self.beta2, self.eps)
                p[...] = new_w

    def state_dict(self, prefix="opt"):
        out = {f"{prefix}.t": np.array(float(self.t))}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state, prefix="opt"):
        self.t = int(state[f"{prefix}.t"])
        for name in self.m:
            self.m[name] = np.array(state[f"{prefix}.m.{name}"], dtype=np.float64)
            self.v[name] = np.array(state[f"{prefix}.v.{name}"], dtype=np.float64)
