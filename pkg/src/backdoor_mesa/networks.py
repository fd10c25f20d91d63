"""Fixed-architecture networks with hand-written forward and backward passes.

Three models are provided:

* :class:`GeneratorNet` maps noise to a flattened trigger. Two affine layers
  are each followed by batch normalization and a leaky ReLU; the last affine
  layer goes through ``tanh`` and is mapped onto per-pixel bounds, so every
  output lies inside the valid pixel box whatever the parameters are.
* :class:`StatsNet` scores (trigger, noise) pairs for the mutual information
  lower bound.
* :class:`ClassifierNet` is the small convolutional victim model.

``forward`` returns ``(output, cache)``; ``backward`` consumes that cache.
Images are NHWC float64 arrays.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Optional, Tuple

import numpy as np

from .numeric import ContractError, Params

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # valid for 0 <= slope <= 1
    return np.maximum(x, slope * x)


def leaky_relu_grad(x: np.ndarray, dy: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    out = dy * slope
    np.copyto(out, dy, where=x > 0)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _check_cache(cache, owner: str):
    if cache is None:
        raise ContractError(f"{owner}.backward called without a forward cache")


class _Net:
    kind = "net"

    params: Params
    buffers: Params

    def arch(self) -> dict:
        raise NotImplementedError

    def zero_grads(self) -> Params:
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())

    def copy(self):
        clone = self.__class__.__new__(self.__class__)
        clone.__dict__.update(self.__dict__)
        clone.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        clone.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return clone

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# --------------------------------------------------------------------------- #
# generator
# --------------------------------------------------------------------------- #

def _bn_forward(x, gamma, beta, run_mean, run_var, train: bool, update: bool):
    if train:
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        if update:
            n = x.shape[0]
            unbiased = var * n / max(n - 1, 1)
            run_mean *= 1.0 - BN_MOMENTUM
            run_mean += BN_MOMENTUM * mu
            run_var *= 1.0 - BN_MOMENTUM
            run_var += BN_MOMENTUM * unbiased
    else:
        mu, var = run_mean, run_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, train)


def _bn_backward(dy, gamma, cache):
    xhat, inv, train = cache
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    n = dy.shape[0]
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


class GeneratorNet(_Net):
    """Three-layer perceptron from noise to a trigger in the box ``[low, high]``."""

    kind = "generator"

    def __init__(self, noise_dim: int, hidden: int, low, high, rng: np.random.Generator | None = None):
        low = np.asarray(low, dtype=np.float64).reshape(-1)
        high = np.asarray(high, dtype=np.float64).reshape(-1)
        if low.shape != high.shape or np.any(high <= low):
            raise ContractError("output bounds must satisfy low < high elementwise")
        if noise_dim <= 0 or hidden <= 0:
            raise ContractError("dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.noise_dim = int(noise_dim)
        self.hidden = int(hidden)
        self.out_dim = int(low.size)
        self.low = low
        self.high = high
        n, h, d = self.noise_dim, self.hidden, self.out_dim
        self.params = OrderedDict(
            W1=_uniform_init(rng, n, (n, h)), b1=_uniform_init(rng, n, (h,)),
            g1=np.ones(h), be1=np.zeros(h),
            W2=_uniform_init(rng, h, (h, h)), b2=_uniform_init(rng, h, (h,)),
            g2=np.ones(h), be2=np.zeros(h),
            W3=_uniform_init(rng, h, (h, d)), b3=_uniform_init(rng, h, (d,)),
        )
        self.buffers = OrderedDict(
            rm1=np.zeros(h), rv1=np.ones(h), rm2=np.zeros(h), rv2=np.ones(h),
        )

    def arch(self) -> dict:
        return {"noise_dim": self.noise_dim, "hidden": self.hidden,
                "low": self.low.tolist(), "high": self.high.tolist()}

    @property
    def mid(self):
        return 0.5 * (self.high + self.low)

    @property
    def half(self):
        return 0.5 * (self.high - self.low)

    def forward(self, z: np.ndarray, mode: str = "train", update_stats: bool = True):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.noise_dim:
            raise ContractError(f"noise must have shape [B, {self.noise_dim}], got {z.shape}")
        if z.shape[0] == 0:
            raise ContractError("empty noise batch")
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        p, buf = self.params, self.buffers
        train = mode == "train"
        a1 = z @ p["W1"] + p["b1"]
        n1, bn1 = _bn_forward(a1, p["g1"], p["be1"], buf["rm1"], buf["rv1"], train, update_stats)
        h1 = leaky_relu(n1)
        a2 = h1 @ p["W2"] + p["b2"]
        n2, bn2 = _bn_forward(a2, p["g2"], p["be2"], buf["rm2"], buf["rv2"], train, update_stats)
        h2 = leaky_relu(n2)
        a3 = h2 @ p["W3"] + p["b3"]
        t = np.tanh(a3)
        out = self.mid + self.half * t
        return out, (z, n1, bn1, h1, n2, bn2, h2, t)

    def backward(self, cache, dout: np.ndarray) -> Params:
        _check_cache(cache, "GeneratorNet")
        z, n1, bn1, h1, n2, bn2, h2, t = cache
        p = self.params
        da3 = dout * self.half * (1.0 - t * t)
        g = OrderedDict()
        dW3 = h2.T @ da3
        db3 = da3.sum(axis=0)
        dh2 = da3 @ p["W3"].T
        dn2 = leaky_relu_grad(n2, dh2)
        da2, dg2, dbe2 = _bn_backward(dn2, p["g2"], bn2)
        dW2 = h1.T @ da2
        db2 = da2.sum(axis=0)
        dh1 = da2 @ p["W2"].T
        dn1 = leaky_relu_grad(n1, dh1)
        da1, dg1, dbe1 = _bn_backward(dn1, p["g1"], bn1)
        g["W1"] = z.T @ da1
        g["b1"] = da1.sum(axis=0)
        g["g1"], g["be1"] = dg1, dbe1
        g["W2"], g["b2"] = dW2, db2
        g["g2"], g["be2"] = dg2, dbe2
        g["W3"], g["b3"] = dW3, db3
        return g

    def sample(self, z: np.ndarray) -> np.ndarray:
        """Eval-mode forward pass; does not touch running statistics."""
        return self.forward(z, mode="eval", update_stats=False)[0]


# --------------------------------------------------------------------------- #
# statistics network
# --------------------------------------------------------------------------- #

class StatsNet(_Net):
    """T(x, z): two input branches summed into a shared hidden layer, then a scalar."""

    kind = "stats"

    def __init__(self, x_dim: int, z_dim: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.x_dim, self.z_dim, self.hidden = int(x_dim), int(z_dim), int(hidden)
        h = self.hidden
        self.params = OrderedDict(
            Wx=_uniform_init(rng, x_dim, (x_dim, h)),
            Wz=_uniform_init(rng, z_dim, (z_dim, h)),
            b0=_uniform_init(rng, x_dim, (h,)),
            W1=_uniform_init(rng, h, (h, h)), b1=_uniform_init(rng, h, (h,)),
            W2=_uniform_init(rng, h, (h, 1)), b2=_uniform_init(rng, h, (1,)),
        )
        self.buffers = OrderedDict()

    def arch(self) -> dict:
        return {"x_dim": self.x_dim, "z_dim": self.z_dim, "hidden": self.hidden}

    def forward(self, x: np.ndarray, z: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if x.ndim != 2 or z.ndim != 2 or x.shape[0] != z.shape[0]:
            raise ContractError(f"batch mismatch between x {x.shape} and z {z.shape}")
        if x.shape[1] != self.x_dim or z.shape[1] != self.z_dim:
            raise ContractError("input widths do not match the network")
        p = self.params
        a0 = x @ p["Wx"] + z @ p["Wz"] + p["b0"]
        h0 = leaky_relu(a0)
        a1 = h0 @ p["W1"] + p["b1"]
        h1 = leaky_relu(a1)
        out = (h1 @ p["W2"] + p["b2"])[:, 0]
        return out, (x, z, a0, h0, a1, h1)

    def backward(self, cache, dout: np.ndarray, need_inputs: bool = True):
        """Return ``(param_grads, dx, dz)`` for upstream gradient ``dout`` of shape [B]."""
        _check_cache(cache, "StatsNet")
        x, z, a0, h0, a1, h1 = cache
        p = self.params
        d = np.asarray(dout, dtype=np.float64).reshape(-1, 1)
        g = OrderedDict()
        dW2 = h1.T @ d
        db2 = d.sum(axis=0)
        da1 = leaky_relu_grad(a1, d @ p["W2"].T)
        dW1 = h0.T @ da1
        db1 = da1.sum(axis=0)
        da0 = leaky_relu_grad(a0, da1 @ p["W1"].T)
        g["Wx"] = x.T @ da0
        g["Wz"] = z.T @ da0
        g["b0"] = da0.sum(axis=0)
        g["W1"], g["b1"] = dW1, db1
        g["W2"], g["b2"] = dW2, db2
        if not need_inputs:
            return g, None, None
        return g, da0 @ p["Wx"].T, da0 @ p["Wz"].T


# --------------------------------------------------------------------------- #
# classifier
# --------------------------------------------------------------------------- #

_OFFSETS = [(i, j) for i in range(3) for j in range(3)]
_POOL = [(0, 0), (0, 1), (1, 0), (1, 1)]


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 'same' patches of NHWC ``x`` as rows ordered (kh, kw, channel)."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c))
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9 * c))
    for k, (i, j) in enumerate(_OFFSETS):
        cols[..., k * c:(k + 1) * c] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, 9 * c)


def _conv_input_grad(dout: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Gradient of a 3x3 'same' convolution with respect to its input."""
    wf = W[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, W.shape[2])
    b, h, w, _ = dout.shape
    return (_im2col(dout) @ wf).reshape(b, h, w, -1)


def _conv_input_grad_patch(dout, W, rows, cols, ph: int, pw: int) -> np.ndarray:
    """Input gradient of a 3x3 'same' convolution restricted to one window per sample."""
    wf = W[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, W.shape[2])
    b, h, w, c = dout.shape
    dp = np.zeros((b, h + 2, w + 2, c))
    dp[:, 1:-1, 1:-1, :] = dout
    ry = np.asarray(rows)[:, None] + np.arange(ph + 2)
    rx = np.asarray(cols)[:, None] + np.arange(pw + 2)
    win = dp[np.arange(b)[:, None, None], ry[:, :, None], rx[:, None, :]]
    stacked = np.concatenate([win[:, i:i + ph, j:j + pw, :] for i, j in _OFFSETS], axis=-1)
    return stacked @ wf


def _conv_forward(x, W, bias):
    b, h, w, _ = x.shape
    cols = _im2col(x)
    out = cols @ W.reshape(-1, W.shape[-1]) + bias
    return out.reshape(b, h, w, -1), cols


def _pool_forward(x):
    """2x2 max pooling; ties go to the first window position in row-major order."""
    parts = [x[:, i::2, j::2, :] for i, j in _POOL]
    out = parts[0]
    for q in parts[1:]:
        out = np.maximum(out, q)
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for q in parts:
        m = (q == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, masks, shape):
    dx = np.zeros(shape)
    for (i, j), m in zip(_POOL, masks):
        dx[:, i::2, j::2, :] = dout * m
    return dx


class ClassifierNet(_Net):
    """conv3x3-ReLU-maxpool, conv3x3-ReLU-maxpool, affine-ReLU, affine -> K logits."""

    kind = "classifier"

    def __init__(self, image_shape=(16, 16, 3), n_classes: int = 10, channels=(8, 16), hidden: int = 64,
                 rng: np.random.Generator | None = None):
        h, w, c = image_shape
        if h % 4 or w % 4:
            raise ContractError("image height and width must be divisible by 4")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_shape = (int(h), int(w), int(c))
        self.n_classes = int(n_classes)
        self.channels = (int(channels[0]), int(channels[1]))
        self.hidden = int(hidden)
        c1, c2 = self.channels
        flat = (h // 4) * (w // 4) * c2
        self.params = OrderedDict(
            C1=_uniform_init(rng, 9 * c, (3, 3, c, c1)), cb1=_uniform_init(rng, 9 * c, (c1,)),
            C2=_uniform_init(rng, 9 * c1, (3, 3, c1, c2)), cb2=_uniform_init(rng, 9 * c1, (c2,)),
            F1=_uniform_init(rng, flat, (flat, hidden)), fb1=_uniform_init(rng, flat, (hidden,)),
            F2=_uniform_init(rng, hidden, (hidden, n_classes)), fb2=_uniform_init(rng, hidden, (n_classes,)),
        )
        self.buffers = OrderedDict()

    def arch(self) -> dict:
        return {"image_shape": list(self.image_shape), "n_classes": self.n_classes,
                "channels": list(self.channels), "hidden": self.hidden}

    def forward(self, images: np.ndarray):
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise ContractError(f"expected images of shape [B, {', '.join(map(str, self.image_shape))}], got {x.shape}")
        p = self.params
        c1, cols1 = _conv_forward(x, p["C1"], p["cb1"])
        r1 = np.maximum(c1, 0.0)
        q1, arg1 = _pool_forward(r1)
        c2, cols2 = _conv_forward(q1, p["C2"], p["cb2"])
        r2 = np.maximum(c2, 0.0)
        q2, arg2 = _pool_forward(r2)
        flat = q2.reshape(x.shape[0], -1)
        a3 = flat @ p["F1"] + p["fb1"]
        h3 = np.maximum(a3, 0.0)
        logits = h3 @ p["F2"] + p["fb2"]
        cache = (x.shape, cols1, c1, arg1, q1.shape, cols2, c2, arg2, q2.shape, flat, a3, h3)
        return logits, cache

    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = [self.forward(images[i:i + batch_size])[0].argmax(axis=1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def backward(self, cache, dlogits: np.ndarray, need_params: bool = True, need_input: bool = False,
                 input_patch=None):
        """Return ``(param_grads or None, input_grad or None)``.

        With ``input_patch=(rows, cols, ph, pw)`` the input gradient is only
        formed on one ``ph x pw`` window per image (top-left corners ``rows``,
        ``cols``) and has shape ``[B, ph, pw, C]``.
        """
        _check_cache(cache, "ClassifierNet")
        xshape, cols1, c1, arg1, q1shape, cols2, c2, arg2, q2shape, flat, a3, h3 = cache
        p = self.params
        g = OrderedDict() if need_params else None
        dh3 = dlogits @ p["F2"].T
        da3 = dh3 * (a3 > 0)
        dflat = da3 @ p["F1"].T
        dq2 = dflat.reshape(q2shape)
        dr2 = _pool_backward(dq2, arg2, c2.shape)
        dc2 = (dr2 * (c2 > 0)).reshape(-1, c2.shape[-1])
        dq1 = _conv_input_grad(dc2.reshape(c2.shape), p["C2"])
        dr1 = _pool_backward(dq1, arg1, c1.shape)
        dc1 = (dr1 * (c1 > 0)).reshape(-1, c1.shape[-1])
        if need_params:
            g["C1"] = (cols1.T @ dc1).reshape(p["C1"].shape)
            g["cb1"] = dc1.sum(axis=0)
            g["C2"] = (cols2.T @ dc2).reshape(p["C2"].shape)
            g["cb2"] = dc2.sum(axis=0)
            g["F1"] = flat.T @ da3
            g["fb1"] = da3.sum(axis=0)
            g["F2"] = h3.T @ dlogits
            g["fb2"] = dlogits.sum(axis=0)
        dx = None
        if input_patch is not None:
            dx = _conv_input_grad_patch(dc1.reshape(c1.shape), p["C1"], *input_patch)
        elif need_input:
            dx = _conv_input_grad(dc1.reshape(c1.shape), p["C1"])
        return g, dx


def build(kind: str, arch: dict, rng: Optional[np.random.Generator] = None) -> _Net:
    """Construct an untrained network from an architecture descriptor."""
    if kind == GeneratorNet.kind:
        return GeneratorNet(arch["noise_dim"], arch["hidden"], arch["low"], arch["high"], rng)
    if kind == StatsNet.kind:
        return StatsNet(arch["x_dim"], arch["z_dim"], arch["hidden"], rng)
    if kind == ClassifierNet.kind:
        return ClassifierNet(tuple(arch["image_shape"]), arch["n_classes"], tuple(arch["channels"]),
                             arch["hidden"], rng)
    raise ContractError(f"unknown network kind {kind!r}")


NETWORK_KINDS: Dict[str, type] = {c.kind: c for c in (GeneratorNet, StatsNet, ClassifierNet)}
