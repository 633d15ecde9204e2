"""Small numpy networks with hand-written backprop, float64 throughout."""
from __future__ import annotations

import copy
import json
import struct
from pathlib import Path

import numpy as np

LN_EPS = 1e-6
COV_FLOOR = 1e-6


class NetworkError(RuntimeError):
    pass


def elu(z):
    # expm1(min(z, 0)) <= z exactly when z > 0, so the max picks the right branch
    return np.maximum(z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Mlp:
    """Feed-forward net: ELU hidden layers, linear output.

    With ``layer_norm=True`` the first hidden layer is normalised (learned
    gain and shift) and passed through tanh instead of ELU.
    """

    def __init__(self, sizes, layer_norm=False, rng=None, zero_last=False):
        if len(sizes) < 2:
            raise NetworkError("need at least input and output sizes")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.layer_norm = bool(layer_norm) and len(sizes) > 2
        self.params: list[np.ndarray] = []
        self.names: list[str] = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            if zero_last and i == n_layers - 1:
                W = np.zeros((fan_in, fan_out))
            else:
                W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self._add(f"W{i}", W)
            self._add(f"b{i}", np.zeros(fan_out))
        if self.layer_norm:
            self._add("ln_g", np.ones(self.sizes[1]))
            self._add("ln_b", np.zeros(self.sizes[1]))
        self._cache = None

    def _add(self, name, arr):
        self.names.append(name)
        self.params.append(np.asarray(arr, dtype=np.float64))

    def param(self, name) -> np.ndarray:
        return self.params[self.names.index(name)]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def clone(self) -> "Mlp":
        other = copy.copy(self)
        other.params = [p.copy() for p in self.params]
        other.names = list(self.names)
        other._cache = None
        return other

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise NetworkError(f"expected input width {self.sizes[0]}, got {h.shape[1]}")
        cache = [h]
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i == self.n_layers - 1:
                h = z
                cache.append(None)
            elif i == 0 and self.layer_norm:
                zc = z - z.mean(axis=1, keepdims=True)
                inv = 1.0 / np.sqrt(np.einsum("ij,ij->i", zc, zc)[:, None] / zc.shape[1] + LN_EPS)
                zh = zc * inv
                h = np.tanh(zh * self.param("ln_g") + self.param("ln_b"))
                cache.append(("ln", zh, inv, h))
            else:
                h = elu(z)
                cache.append(("elu", z))
            cache.append(h)
        self._cache = (single, cache)
        return h[0] if single else h

    __call__ = forward

    def backward(self, upstream):
        """Gradients of ``sum(upstream * output)``.

        Returns ``(param_grads, input_grad)`` for the most recent forward.
        """
        if self._cache is None:
            raise NetworkError("backward called before forward")
        single, cache = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            h_in = cache[2 * i]
            act = cache[2 * i + 1]
            if act is not None and act[0] == "elu":
                g = g * elu_grad(act[1])
            elif act is not None:
                _, zh, inv, h = act
                gy = g * (1.0 - h * h)
                grads[self.names.index("ln_g")] = np.sum(gy * zh, axis=0)
                grads[self.names.index("ln_b")] = np.sum(gy, axis=0)
                gzh = gy * self.param("ln_g")
                g = inv * (gzh - gzh.mean(axis=1, keepdims=True)
                           - zh * np.mean(gzh * zh, axis=1, keepdims=True))
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, (g[0] if single else g)


class GaussianPolicy:
    """Diagonal Gaussian policy; the backbone emits means and raw variances.

    The variance is ``softplus(raw) + COV_FLOOR``; the variance head is
    initialised so every state starts with standard deviation ``init_std``.
    """

    def __init__(self, state_dim, action_dim, hidden=(256, 256, 256), layer_norm=True,
                 init_std=0.3, rng=None):
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.init_std = float(init_std)
        self.backbone = Mlp([state_dim, *hidden, 2 * action_dim], layer_norm=layer_norm, rng=rng)
        last = self.backbone.n_layers - 1
        W, b = self.backbone.param(f"W{last}"), self.backbone.param(f"b{last}")
        W[:, action_dim:] = 0.0
        b[action_dim:] = softplus_inv(init_std ** 2 - COV_FLOOR)
        self._cache = None

    @property
    def params(self):
        return self.backbone.params

    def clone(self) -> "GaussianPolicy":
        other = copy.copy(self)
        other.backbone = self.backbone.clone()
        other._cache = None
        return other

    def distribution(self, s):
        out = self.backbone.forward(s)
        d = self.action_dim
        raw = out[..., d:]
        var = softplus(raw) + COV_FLOOR
        return out[..., :d], np.sqrt(var), raw

    def sample(self, s, noise):
        """Reparameterised draw ``a = mu(s) + sigma(s) * noise`` and its log density."""
        mean, std, raw = self.distribution(s)
        noise = np.asarray(noise, dtype=np.float64)
        a = mean + std * noise
        logp = (-0.5 * np.sum(noise ** 2, axis=-1) - np.sum(np.log(std), axis=-1)
                - 0.5 * self.action_dim * np.log(2.0 * np.pi))
        self._cache = (noise, std, raw)
        return a, logp

    def log_prob(self, s, a):
        mean, std, _ = self.distribution(s)
        z = (np.asarray(a, float) - mean) / std
        return (-0.5 * np.sum(z ** 2, axis=-1) - np.sum(np.log(std), axis=-1)
                - 0.5 * self.action_dim * np.log(2.0 * np.pi))

    def backward(self, d_action, d_mean=None):
        """Backprop ``d_action`` (and an optional extra gradient on the mean)
        through the last :meth:`sample`. Returns ``(param_grads, state_grad)``."""
        if self._cache is None:
            raise NetworkError("backward called before sample")
        noise, std, raw = self._cache
        d_action = np.asarray(d_action, float)
        gm = d_action if d_mean is None else d_action + d_mean
        d_var = d_action * noise / (2.0 * std)
        g_raw = d_var * sigmoid(raw)
        return self.backbone.backward(np.concatenate([gm, g_raw], axis=-1))


def sample_action(policy: GaussianPolicy, s, noise):
    return policy.sample(s, noise)


class Adam:
    """Adaptive-moment optimiser; updates the arrays it was given in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, ascend=False):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        sign = 1.0 if ascend else -1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p += sign * scale * m / (np.sqrt(v) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out


class TargetCopy:
    """Slow-moving copy of a network's parameters."""

    def __init__(self, net):
        self.net = net.clone()

    @property
    def params(self):
        return self.net.params

    def update(self, live, tau):
        ema_update(self, live, tau)

    def __getattr__(self, name):
        net = self.__dict__.get("net")
        if net is None:
            raise AttributeError(name)
        return getattr(net, name)


def ema_update(target: TargetCopy, live, tau: float) -> TargetCopy:
    if not 0.0 < tau <= 1.0:
        raise NetworkError("tau must lie in (0, 1]")
    live_params = live.params if hasattr(live, "params") else live
    for t, p in zip(target.params, live_params):
        if tau == 1.0:
            t[...] = p
        else:
            t *= 1.0 - tau
            t += tau * p
    return target


def numerical_gradient(loss, params, coords, h=1e-5):
    """Central differences of ``loss()`` at the listed ``(param_idx, flat_idx)``."""
    out = np.empty(len(coords))
    for k, (pi, fi) in enumerate(coords):
        arr = params[pi].reshape(-1)
        old = arr[fi]
        arr[fi] = old + h
        up = loss()
        arr[fi] = old - h
        down = loss()
        arr[fi] = old
        out[k] = (up - down) / (2.0 * h)
    return out


def sample_coords(params, rng, per_param=16):
    coords = []
    for pi, p in enumerate(params):
        n = p.size
        picks = np.arange(n) if n <= per_param else rng.choice(n, per_param, replace=False)
        coords.extend((pi, int(fi)) for fi in picks)
    return coords


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, float)
    numeric = np.asarray(numeric, float)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(loss, grads_fn, params, rng, per_param=16, h=1e-5) -> float:
    """Relative error between analytic gradients and central differences on a
    random subset of coordinates of every parameter array."""
    grads = grads_fn()
    coords = sample_coords(params, rng, per_param)
    analytic = np.array([grads[pi].reshape(-1)[fi] for pi, fi in coords])
    numeric = numerical_gradient(loss, params, coords, h)
    return relative_error(analytic, numeric)


# checkpoint file: magic, u32 version, u64 header length, JSON header, raw <f8 data
CKPT_MAGIC = b"OTPCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"version": CKPT_VERSION, "arrays": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise NetworkError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise NetworkError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    body = data[20 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=n,
                                          offset=e["offset"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]
