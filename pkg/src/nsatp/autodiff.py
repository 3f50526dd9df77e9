"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array together with a gradient buffer and the
record of the operation that produced it (parent tensors plus a local
gradient closure).  Calling :func:`backward` on a scalar result walks the
recorded graph once in reverse topological order and accumulates
gradients into every tensor that requires them.  The graph is rebuilt on
every forward pass; a second backward through the same graph is refused.

Shapes follow the convention that the last axis holds channels and the
second-to-last holds time (or a flattened spatial index).  Every op
accepts optional leading batch axes.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "add",
    "mul",
    "matmul",
    "linear",
    "conv1d",
    "conv2d",
    "relu",
    "exp",
    "reciprocal",
    "softmax_rows",
    "layer_norm",
    "mlp_forward",
    "mse_loss",
    "reshape",
    "transpose",
    "concat",
    "pad_rows",
    "take_rows",
    "pad_grid",
    "crop_grid",
    "roll_grid",
    "backward",
    "Adam",
    "seeded_rng",
    "glorot_uniform",
    "save_checkpoint",
    "load_checkpoint",
    "numerical_gradient",
    "max_relative_error",
    "CHECKPOINT_SCHEMA",
]

CHECKPOINT_SCHEMA = "nsatp-ckpt/1"


class Tensor:
    """Dense float64 array node in the autodiff graph."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def __repr__(self):
        kind = "param" if self.requires_grad and not self._parents else "tensor"
        return f"Tensor(shape={self.values.shape}, {kind})"

    # operator sugar; floats and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, mul(_lift(other), _lift(-1.0)))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def parameter(values, requires_grad=True):
    return Tensor(values, requires_grad=requires_grad)


def constant(values):
    return Tensor(values, requires_grad=False)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, parents, backward_fn):
    out = Tensor(values)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(values, op_name):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{op_name}: non-finite input")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    out_values = a.values + b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    return _node(out_values, (a, b), bwd)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out_values = a.values * b.values

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    return _node(out_values, (a, b), bwd)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    out_values = np.matmul(a.values, b.values)

    def bwd(g):
        ga = np.matmul(g, b.values.swapaxes(-1, -2))
        gb = np.matmul(a.values.swapaxes(-1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.values.shape))
        _accumulate(b, _unbroadcast(gb, b.values.shape))

    return _node(out_values, (a, b), bwd)


def linear(x, weight, bias=None):
    """Affine map on the last axis: ``x @ weight + bias``.

    x: [... x d_in], weight: [d_in x d_out], bias: [d_out] or None.
    """
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------------------
# convolutions (same-size output, zero padding, odd kernels)


def conv1d(x, kernels):
    """Temporal convolution with same zero-padding.

    x: [... x T x C_in], kernels: [M x C_in x C_out] with M odd.
    Y[t] = sum_k X[t + k - M//2] . kernels[k], positions outside [0, T)
    contribute zero.
    """
    x, kernels = _lift(x), _lift(kernels)
    m, c_in, c_out = kernels.values.shape
    if m % 2 == 0:
        raise ValueError("kernel must be odd for same padding")
    if x.values.shape[-1] != c_in:
        raise ValueError(f"conv1d: input has {x.values.shape[-1]} channels, kernels expect {c_in}")
    t = x.values.shape[-2]
    pad = m // 2
    pad_spec = [(0, 0)] * (x.values.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.values, pad_spec)
    out_values = np.zeros(x.values.shape[:-1] + (c_out,))
    for k in range(m):
        out_values += np.matmul(xp[..., k : k + t, :], kernels.values[k])

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernels.values)
        g2 = g.reshape(-1, c_out)
        for k in range(m):
            gxp[..., k : k + t, :] += np.matmul(g, kernels.values[k].T)
            gk[k] = xp[..., k : k + t, :].reshape(-1, c_in).T @ g2
        _accumulate(x, gxp[..., pad : pad + t, :])
        _accumulate(kernels, gk)

    return _node(out_values, (x, kernels), bwd)


def conv2d(x, kernels):
    """Spatial convolution with same zero-padding.

    x: [... x H x W x C_in], kernels: [M x N x C_in x C_out], M and N odd.
    """
    x, kernels = _lift(x), _lift(kernels)
    m, n, c_in, c_out = kernels.values.shape
    if m % 2 == 0 or n % 2 == 0:
        raise ValueError("kernel must be odd for same padding")
    if x.values.shape[-1] != c_in:
        raise ValueError(f"conv2d: input has {x.values.shape[-1]} channels, kernels expect {c_in}")
    h, w = x.values.shape[-3], x.values.shape[-2]
    ph, pw = m // 2, n // 2
    pad_spec = [(0, 0)] * (x.values.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x.values, pad_spec)
    out_values = np.zeros(x.values.shape[:-1] + (c_out,))
    for a in range(m):
        for b in range(n):
            out_values += np.matmul(xp[..., a : a + h, b : b + w, :], kernels.values[a, b])

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernels.values)
        g2 = g.reshape(-1, c_out)
        for a in range(m):
            for b in range(n):
                gxp[..., a : a + h, b : b + w, :] += np.matmul(g, kernels.values[a, b].T)
                gk[a, b] = xp[..., a : a + h, b : b + w, :].reshape(-1, c_in).T @ g2
        _accumulate(x, gxp[..., ph : ph + h, pw : pw + w, :])
        _accumulate(kernels, gk)

    return _node(out_values, (x, kernels), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and losses


def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    x = _lift(x)
    _check_finite(x.values, "relu")
    mask = x.values > 0.0
    out_values = np.where(mask, x.values, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return _node(out_values, (x,), bwd)


def exp(x):
    x = _lift(x)
    _check_finite(x.values, "exp")
    out_values = np.exp(x.values)

    def bwd(g):
        _accumulate(x, g * out_values)

    return _node(out_values, (x,), bwd)


def reciprocal(x):
    x = _lift(x)
    out_values = 1.0 / x.values

    def bwd(g):
        _accumulate(x, -g * out_values * out_values)

    return _node(out_values, (x,), bwd)


def softmax_rows(x):
    """Softmax along the last axis; each output row sums to one."""
    x = _lift(x)
    _check_finite(x.values, "softmax_rows")
    shifted = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out_values).sum(axis=-1, keepdims=True)
        _accumulate(x, out_values * (g - inner))

    return _node(out_values, (x,), bwd)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply
    a learned per-channel affine."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    _check_finite(x.values, "layer_norm")
    m = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - m
    v = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv
    out_values = xhat * gain.values + bias.values

    def bwd(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.values.shape))
        _accumulate(bias, _unbroadcast(g, bias.values.shape))
        gx_hat = g * gain.values
        mean_g = gx_hat.mean(axis=-1, keepdims=True)
        mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (gx_hat - mean_g - xhat * mean_gx))

    return _node(out_values, (x, gain, bias), bwd)


def mlp_forward(x, layers):
    """Fully connected stack with ReLU between layers (none after the last).

    layers: sequence of (weight, bias) pairs.
    """
    if not layers:
        raise ValueError("mlp_forward: no layers")
    out = x
    last = len(layers) - 1
    for i, (weight, bias) in enumerate(layers):
        out = linear(out, weight, bias)
        if i < last:
            out = relu(out)
    return out


def mse_loss(pred, target):
    """Mean squared error over all elements; returns a scalar tensor."""
    pred, target = _lift(pred), _lift(target)
    _check_finite(pred.values, "mse_loss")
    _check_finite(target.values, "mse_loss")
    if pred.values.shape != target.values.shape:
        raise ValueError(
            f"mse_loss: shape mismatch {pred.values.shape} vs {target.values.shape}"
        )
    diff = pred.values - target.values
    out_values = np.array((diff * diff).mean())
    scale = 2.0 / diff.size

    def bwd(g):
        _accumulate(pred, g * scale * diff)
        _accumulate(target, -g * scale * diff)

    return _node(out_values, (pred, target), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    x = _lift(x)
    shape = tuple(shape)
    out_values = x.values.reshape(shape)

    def bwd(g):
        _accumulate(x, g.reshape(x.values.shape))

    return _node(out_values, (x,), bwd)


def transpose(x, axes):
    x = _lift(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_values = x.values.transpose(axes)

    def bwd(g):
        _accumulate(x, g.transpose(inverse))

    return _node(out_values, (x,), bwd)


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    out_values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, np.moveaxis(moved[lo:hi], 0, axis))

    return _node(out_values, tuple(tensors), bwd)


def pad_rows(x, extra):
    """Append ``extra`` zero rows along the time axis (axis -2)."""
    x = _lift(x)
    if extra < 0:
        raise ValueError("pad_rows: extra must be >= 0")
    t = x.values.shape[-2]
    pad_spec = [(0, 0)] * (x.values.ndim - 2) + [(0, extra), (0, 0)]
    out_values = np.pad(x.values, pad_spec)

    def bwd(g):
        _accumulate(x, g[..., :t, :])

    return _node(out_values, (x,), bwd)


def take_rows(x, start, stop):
    """Slice rows [start, stop) along the time axis (axis -2)."""
    x = _lift(x)
    out_values = x.values[..., start:stop, :]

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[..., start:stop, :] = g
        _accumulate(x, gx)

    return _node(out_values, (x,), bwd)


def pad_grid(x, h_to, w_to):
    """Zero-pad the two grid axes of [... x H x W x C] up to (h_to, w_to)."""
    x = _lift(x)
    h, w = x.values.shape[-3], x.values.shape[-2]
    if h_to < h or w_to < w:
        raise ValueError("pad_grid: target smaller than input")
    pad_spec = [(0, 0)] * (x.values.ndim - 3) + [(0, h_to - h), (0, w_to - w), (0, 0)]
    out_values = np.pad(x.values, pad_spec)

    def bwd(g):
        _accumulate(x, g[..., :h, :w, :])

    return _node(out_values, (x,), bwd)


def crop_grid(x, h, w):
    """Keep the top-left (h, w) block of the grid axes."""
    x = _lift(x)

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[..., :h, :w, :] = g
        _accumulate(x, gx)

    return _node(x.values[..., :h, :w, :], (x,), bwd)


def roll_grid(x, shift_h, shift_w):
    """Cyclically roll the grid axes of [... x H x W x C]."""
    x = _lift(x)
    out_values = np.roll(x.values, (shift_h, shift_w), axis=(-3, -2))

    def bwd(g):
        _accumulate(x, np.roll(g, (-shift_h, -shift_w), axis=(-3, -2)))

    return _node(out_values, (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Run reverse-mode accumulation from a scalar ``loss``.

    Gradients are accumulated into ``tensor.grad`` of every reachable
    tensor with ``requires_grad``.  The recorded graph is single-use:
    calling backward through any already-consumed node raises until the
    forward pass is re-run.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.values.shape}")

    # depth-first topological order over the grad-relevant subgraph
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed and node._backward_fn is not None:
            raise RuntimeError("backward: graph already consumed; re-run the forward pass")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        node._consumed = True
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
    # drop interior gradient buffers; only leaves keep theirs for the optimizer
    for node in order:
        if node._backward_fn is not None:
            node.grad = None


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.values) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.values) for name, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.values -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# parameter initialization


def seeded_rng(seed, name):
    """Deterministic per-tensor random stream.

    Streams are keyed by (seed, name) through a stable hash, so adding or
    removing other parameters never shifts an existing tensor's draw.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence((int(seed) & (2**63 - 1), key)))


def glorot_uniform(rng, shape):
    """Scaled uniform init; fans follow the kernel layout [..., C_in, C_out]."""
    shape = tuple(shape)
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = int(np.prod(shape[:-2], dtype=np.int64)) if len(shape) > 2 else 1
        fan_in = shape[-2] * receptive
        fan_out = shape[-1] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config=None):
    """Write parameters as JSON: {name: {shape, values}} under a schema tag.

    float64 values survive the round trip exactly (shortest-repr encoding).
    """
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "params": {
            name: {"shape": list(p.values.shape), "values": p.values.reshape(-1).tolist()}
            for name, p in sorted(params.items())
        },
    }
    if config is not None:
        payload["config"] = config
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns (params, config) where params maps name -> Tensor.
    """
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    schema = payload.get("schema")
    if schema != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema: {schema!r}")
    params = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
        params[name] = parameter(arr)
    return params, payload.get("config")


# ---------------------------------------------------------------------------
# finite-difference verification


def numerical_gradient(f, tensor, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``tensor``.

    ``f`` must re-run the forward pass from current parameter values.
    """
    grad = np.zeros_like(tensor.values)
    flat_v = tensor.values.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_v.size):
        saved = flat_v[i]
        flat_v[i] = saved + h
        up = float(f())
        flat_v[i] = saved - h
        down = float(f())
        flat_v[i] = saved
        flat_g[i] = (up - down) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor=1e-6):
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())
