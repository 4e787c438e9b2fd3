"""Small numpy networks with hand-written backward passes.

Everything runs in float64 so gradients can be checked against finite
differences. Parameters live in plain ``dict[str, ndarray]`` so the
optimizer, serializer and gradient checker need no knowledge of layers.
"""

from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class LSTMStack:
    """Stacked LSTM; only the last hidden state of the top layer is exposed."""

    def __init__(self, n_in: int, hidden: int, layers: int, prefix: str = "lstm"):
        self.n_in, self.hidden, self.layers, self.prefix = n_in, hidden, layers, prefix

    def init(self, rng, params: Params) -> None:
        H = self.hidden
        for k in range(self.layers):
            d = self.n_in if k == 0 else H
            params[f"{self.prefix}{k}.Wx"] = _glorot(rng, d, 4 * H)
            params[f"{self.prefix}{k}.Wh"] = _glorot(rng, H, 4 * H)
            b = np.zeros(4 * H)
            b[H : 2 * H] = 1.0  # forget gate
            params[f"{self.prefix}{k}.b"] = b

    def forward(self, params: Params, x: np.ndarray):
        B, T, _ = x.shape
        H = self.hidden
        caches = []
        inp = x
        for k in range(self.layers):
            Wx = params[f"{self.prefix}{k}.Wx"]
            Wh = params[f"{self.prefix}{k}.Wh"]
            b = params[f"{self.prefix}{k}.b"]
            xa = inp @ Wx + b  # (B, T, 4H)
            hs = np.zeros((B, T + 1, H))
            cs = np.zeros((B, T + 1, H))
            gates = np.empty((B, T, 4 * H))
            for t in range(T):
                a = xa[:, t] + hs[:, t] @ Wh
                ifo = sigmoid(a[:, : 3 * H])
                g = np.tanh(a[:, 3 * H :])
                gates[:, t, : 3 * H] = ifo
                gates[:, t, 3 * H :] = g
                c = ifo[:, H : 2 * H] * cs[:, t] + ifo[:, :H] * g
                cs[:, t + 1] = c
                hs[:, t + 1] = ifo[:, 2 * H : 3 * H] * np.tanh(c)
            caches.append((inp, hs, cs, gates))
            inp = hs[:, 1:]
        return inp[:, -1], caches

    def backward(self, params: Params, caches, dh_last: np.ndarray, grads: Params) -> None:
        H = self.hidden
        dh_seq = None
        for k in reversed(range(self.layers)):
            inp, hs, cs, gates = caches[k]
            B, T, _ = inp.shape
            Wx = params[f"{self.prefix}{k}.Wx"]
            Wh = params[f"{self.prefix}{k}.Wh"]
            da_all = np.empty((B, T, 4 * H))
            dh_next = np.zeros((B, H))
            dc_next = np.zeros((B, H))
            for t in reversed(range(T)):
                dh = dh_next
                if dh_seq is not None:
                    dh = dh + dh_seq[:, t]
                elif t == T - 1:
                    dh = dh + dh_last
                i = gates[:, t, :H]
                f = gates[:, t, H : 2 * H]
                o = gates[:, t, 2 * H : 3 * H]
                g = gates[:, t, 3 * H :]
                tc = np.tanh(cs[:, t + 1])
                dc = dh * o * (1 - tc * tc) + dc_next
                da = da_all[:, t]
                da[:, :H] = dc * g * i * (1 - i)
                da[:, H : 2 * H] = dc * cs[:, t] * f * (1 - f)
                da[:, 2 * H : 3 * H] = dh * tc * o * (1 - o)
                da[:, 3 * H :] = dc * i * (1 - g * g)
                dc_next = dc * f
                dh_next = da @ Wh.T
            flat = da_all.reshape(B * T, 4 * H)
            grads[f"{self.prefix}{k}.Wx"] = inp.reshape(B * T, -1).T @ flat
            grads[f"{self.prefix}{k}.Wh"] = hs[:, :-1].reshape(B * T, H).T @ flat
            grads[f"{self.prefix}{k}.b"] = flat.sum(axis=0)
            dh_seq = da_all @ Wx.T


class DenseStack:
    """Fully connected tanh layers."""

    def __init__(self, sizes: list[int], prefix: str = "dense"):
        self.sizes, self.prefix = sizes, prefix

    def init(self, rng, params: Params) -> None:
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.prefix}{k}.W"] = _glorot(rng, a, b)
            params[f"{self.prefix}{k}.b"] = np.zeros(b)

    def forward(self, params: Params, x: np.ndarray):
        acts = [x]
        for k in range(len(self.sizes) - 1):
            x = np.tanh(x @ params[f"{self.prefix}{k}.W"] + params[f"{self.prefix}{k}.b"])
            acts.append(x)
        return x, acts

    def backward(self, params: Params, acts, dout: np.ndarray, grads: Params) -> np.ndarray:
        for k in reversed(range(len(self.sizes) - 1)):
            da = dout * (1 - acts[k + 1] ** 2)
            grads[f"{self.prefix}{k}.W"] = acts[k].T @ da
            grads[f"{self.prefix}{k}.b"] = da.sum(axis=0)
            dout = da @ params[f"{self.prefix}{k}.W"].T
        return dout


class SequenceNet:
    """History encoder (stacked LSTM) + present-record encoder (dense) -> one logit."""

    arch = "sequence"

    def __init__(self, n_hist: int, n_present: int, hidden: int = 32, lstm_layers: int = 3,
                 dense: int = 16, dense_layers: int = 3):
        self.config = dict(n_hist=n_hist, n_present=n_present, hidden=hidden,
                           lstm_layers=lstm_layers, dense=dense, dense_layers=dense_layers)
        self.lstm = LSTMStack(n_hist, hidden, lstm_layers)
        self.enc = DenseStack([n_present] + [dense] * dense_layers)
        self.n_joint = hidden + dense

    def init(self, rng) -> Params:
        params: Params = {}
        self.lstm.init(rng, params)
        self.enc.init(rng, params)
        params["out.W"] = _glorot(rng, self.n_joint, 1)
        params["out.b"] = np.zeros(1)
        return params

    def encode_history(self, params: Params, hist: np.ndarray) -> np.ndarray:
        return self.lstm.forward(params, hist)[0]

    def score(self, params: Params, h_enc: np.ndarray, present: np.ndarray) -> np.ndarray:
        d, _ = self.enc.forward(params, present)
        z = np.concatenate([h_enc, d], axis=1) @ params["out.W"] + params["out.b"]
        return z[:, 0]

    def forward(self, params: Params, inputs):
        hist, present = inputs
        h, lcache = self.lstm.forward(params, hist)
        d, acts = self.enc.forward(params, present)
        joint = np.concatenate([h, d], axis=1)
        z = joint @ params["out.W"] + params["out.b"]
        return z[:, 0], (lcache, acts, joint)

    def backward(self, params: Params, cache, dz: np.ndarray) -> Params:
        lcache, acts, joint = cache
        grads: Params = {}
        dz = dz[:, None]
        grads["out.W"] = joint.T @ dz
        grads["out.b"] = dz.sum(axis=0)
        djoint = dz @ params["out.W"].T
        H = self.lstm.hidden
        self.enc.backward(params, acts, djoint[:, H:], grads)
        self.lstm.backward(params, lcache, djoint[:, :H], grads)
        return grads


class LogisticNet:
    arch = "logistic"

    def __init__(self, n_in: int):
        self.config = dict(n_in=n_in)

    def init(self, rng) -> Params:
        return {"W": rng.normal(0, 0.01, size=(self.config["n_in"], 1)), "b": np.zeros(1)}

    def forward(self, params: Params, inputs):
        (x,) = inputs
        return (x @ params["W"] + params["b"])[:, 0], x

    def backward(self, params: Params, cache, dz: np.ndarray) -> Params:
        x = cache
        return {"W": x.T @ dz[:, None], "b": np.array([dz.sum()])}


def weighted_bce(z: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted mean binary cross-entropy on logits; returns (loss, dloss/dz)."""
    softplus = np.logaddexp(0.0, z)
    per = softplus - y * z
    wsum = w.sum()
    loss = float((w * per).sum() / wsum)
    dz = w * (sigmoid(z) - y) / wsum
    return loss, dz


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def numerical_gradient(loss_fn, params: Params, h: float = 1e-5) -> Params:
    """Central finite differences of ``loss_fn(params)`` for every parameter entry."""
    grads = {}
    for k in sorted(params):
        p = params[k]
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[k] = g
    return grads
