"""Dense feed-forward nets, reverse-mode gradients and Adam, in numpy float64.

A :class:`DenseNet` may hold several independent members with identical
layer sizes (one per agent). Parameters live in one ``(members, P)`` array,
so Adam, gradient clipping and soft target updates are single vector
operations, and the forward/backward passes are batched ``matmul`` over the
member axis. Member ``i`` behaves exactly like a stand-alone net.
"""

from __future__ import annotations

import math
import struct
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid", "tanh", "topk")
# softness of the relaxed top-k head, in pre-activation units
TOPK_TEMPERATURE = 0.5


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "identity":
        return z
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _derivative(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "identity":
        return np.ones_like(z)
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    raise ValueError(f"unknown activation {name!r}")


def _kth_pair(z: np.ndarray, k: np.ndarray):
    """Indices of the k-th and (k+1)-th largest entries along the last axis.

    ``k`` holds one value per member (leading axis); ties go to the lower
    index. ``z`` carries a trailing ``-inf`` pad, so k equal to the real width
    selects the pad as the (k+1)-th entry.
    """
    order = np.argsort(-z, axis=-1, kind="stable")
    shape = (-1,) + (1,) * (z.ndim - 1)
    kk = np.broadcast_to(k.reshape(shape) - 1, z.shape[:-1] + (1,))
    return np.take_along_axis(order, kk, -1), np.take_along_axis(order, kk + 1, -1)


def _pad(x: np.ndarray, value: float) -> np.ndarray:
    return np.concatenate([x, np.full(x.shape[:-1] + (1,), value)], axis=-1)


def _topk_activate(z: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``sigmoid((z - theta) / T)`` with ``theta`` midway between the k-th and
    (k+1)-th largest entries, so exactly the top k land above one half.

    When k is the full width every entry is selected and the output is 1.
    """
    zp = _pad(z, -np.inf)
    hi, lo = _kth_pair(zp, k)
    theta = 0.5 * (np.take_along_axis(zp, hi, -1) + np.take_along_axis(zp, lo, -1))
    return _activate("sigmoid", (z - theta) / TOPK_TEMPERATURE)


def _topk_vjp(z: np.ndarray, a: np.ndarray, delta: np.ndarray, k: np.ndarray) -> np.ndarray:
    s = _pad(delta * a * (1.0 - a) / TOPK_TEMPERATURE, 0.0)
    total = 0.5 * s.sum(axis=-1, keepdims=True)
    hi, lo = _kth_pair(_pad(z, -np.inf), k)
    for idx in (hi, lo):
        np.put_along_axis(s, idx, np.take_along_axis(s, idx, -1) - total, -1)
    return s[..., :-1]


class DenseNet:
    """Multi-layer perceptron with a split output head.

    ``head`` lists ``(activation, width)`` pairs applied to consecutive
    slices of the output layer, e.g. ``(("identity", 4), ("sigmoid", 1))``.
    A ``"topk"`` slice is a relaxed top-k selector; ``topk[m][j]`` is the k of
    member ``m``'s ``j``-th such slice.
    """

    def __init__(self, sizes: Sequence[int], hidden_activation: str = "relu",
                 head: Sequence[tuple[str, int]] | None = None, members: int = 1,
                 rng: np.random.Generator | None = None, out_bound: float | None = None,
                 topk: Sequence[Sequence[int]] | None = None):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        if hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {hidden_activation!r}")
        head = tuple((str(a), int(w)) for a, w in (head or (("identity", sizes[-1]),)))
        if sum(w for _, w in head) != sizes[-1]:
            raise ValueError("head widths must add up to the output size")
        for name, _ in head:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        widths = [w for name, w in head if name == "topk"]
        self.topk = None
        if widths:
            if topk is None:
                raise ValueError("topk head needs k values")
            self.topk = np.array(topk, dtype=int).reshape(int(members), len(widths))
            if np.any(self.topk < 1) or np.any(self.topk > np.array(widths)):
                raise ValueError("topk k must satisfy 1 <= k <= slice width")
        self.sizes = sizes
        self.hidden_activation = hidden_activation
        self.head = head
        self.members = int(members)

        self._layout = []
        offset = 0
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            self._layout.append((w, b, fan_in, fan_out))
        self.num_params = offset
        self.theta = np.zeros((self.members, offset))
        if rng is not None:
            self.initialize(rng, out_bound)

    # -- parameters -------------------------------------------------------

    def initialize(self, rng: np.random.Generator, out_bound: float | None = None) -> None:
        """Uniform in +-1/sqrt(fan_in) for weights and biases, member by member.

        ``out_bound`` overrides the range of the output layer, so a fresh net
        can start with near-zero outputs.
        """
        last = len(self._layout) - 1
        for e in range(self.members):
            for i, (w, b, fan_in, fan_out) in enumerate(self._layout):
                bound = 1.0 / np.sqrt(fan_in)
                if i == last and out_bound is not None:
                    bound = out_bound
                self.theta[e, w] = rng.uniform(-bound, bound, fan_in * fan_out)
                self.theta[e, b] = rng.uniform(-bound, bound, fan_out)

    def weight(self, layer: int) -> np.ndarray:
        w, _, fan_in, fan_out = self._layout[layer]
        return self.theta[:, w].reshape(self.members, fan_in, fan_out)

    def bias(self, layer: int) -> np.ndarray:
        return self.theta[:, self._layout[layer][1]]

    @property
    def num_layers(self) -> int:
        return len(self._layout)

    def clone(self) -> "DenseNet":
        out = DenseNet(self.sizes, self.hidden_activation, self.head, self.members, topk=self.topk)
        out.theta[...] = self.theta
        return out

    def member(self, index: int) -> "DenseNet":
        topk = None if self.topk is None else self.topk[index:index + 1]
        out = DenseNet(self.sizes, self.hidden_activation, self.head, 1, topk=topk)
        out.theta[0] = self.theta[index]
        return out

    @classmethod
    def stack(cls, nets: Sequence["DenseNet"]) -> "DenseNet":
        first = nets[0]
        topk = None if first.topk is None else np.concatenate([n.topk for n in nets])
        out = cls(first.sizes, first.hidden_activation, first.head, len(nets), topk=topk)
        for i, net in enumerate(nets):
            if net.sizes != first.sizes:
                raise ValueError("can only stack nets with identical sizes")
            out.theta[i] = net.theta[0]
        return out

    # -- forward / backward ------------------------------------------------

    def _head_slices(self):
        start = j = 0
        for name, width in self.head:
            k = None
            if name == "topk":
                k, j = self.topk[:, j], j + 1
            yield name, slice(start, start + width), k
            start += width

    def _head_activate(self, z):
        parts = []
        for name, sl, k in self._head_slices():
            parts.append(_topk_activate(z[..., sl], k) if k is not None else _activate(name, z[..., sl]))
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)

    def _head_vjp(self, z, a, delta):
        parts = []
        for name, sl, k in self._head_slices():
            if k is not None:
                parts.append(_topk_vjp(z[..., sl], a[..., sl], delta[..., sl], k))
            else:
                parts.append(delta[..., sl] * _derivative(name, z[..., sl], a[..., sl]))
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)

    def forward(self, x: np.ndarray):
        """Batched pass. ``x`` has shape ``(members, batch, in)``.

        Returns ``(output, cache)``; the cache feeds :meth:`backward`.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[0] != self.members or x.shape[2] != self.sizes[0]:
            raise ValueError(f"expected input (members={self.members}, batch, {self.sizes[0]}), got {x.shape}")
        cache = []
        a = x
        last = self.num_layers - 1
        for layer in range(self.num_layers):
            z = np.matmul(a, self.weight(layer)) + self.bias(layer)[:, None, :]
            out = self._head_activate(z) if layer == last else _activate(self.hidden_activation, z)
            cache.append((a, z, out))
            a = out
        return a, cache

    def __call__(self, x) -> np.ndarray:
        """Convenience forward for single-member nets on 1-D or 2-D input."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 3:
            return self.forward(x)[0]
        if self.members != 1:
            raise ValueError("use forward() with a member axis for multi-member nets")
        squeeze = x.ndim == 1
        batch = x.reshape(1, -1, self.sizes[0])
        out = self.forward(batch)[0][0]
        return out[0] if squeeze else out

    def backward(self, cache, grad_out: np.ndarray, param_grad: bool = True,
                 grad_pre: np.ndarray | None = None):
        """Reverse-mode pass. Returns ``(grad_theta, grad_input)``.

        With ``param_grad=False`` only the input gradient is formed and
        ``grad_theta`` is ``None``. ``grad_pre`` is an extra gradient on the
        output layer's pre-activations (e.g. from a penalty on them).
        """
        grad = np.empty_like(self.theta) if param_grad else None
        delta = np.asarray(grad_out, dtype=float)
        last = self.num_layers - 1
        for layer in range(last, -1, -1):
            a_in, z, out = cache[layer]
            if layer == last:
                dz = self._head_vjp(z, out, delta)
                if grad_pre is not None:
                    dz = dz + grad_pre
            else:
                dz = delta * _derivative(self.hidden_activation, z, out)
            if param_grad:
                w_sl, b_sl, _, _ = self._layout[layer]
                grad[:, w_sl] = np.matmul(a_in.transpose(0, 2, 1), dz).reshape(self.members, -1)
                grad[:, b_sl] = dz.sum(axis=1)
            delta = np.matmul(dz, self.weight(layer).transpose(0, 2, 1))
        return grad, delta

    # -- serialisation ----------------------------------------------------

    def to_bytes(self, member: int = 0) -> bytes:
        """Flat little-endian layout.

        Header: uint32 layer count L, then L uint32 layer sizes. Body: for
        each layer the row-major ``(in, out)`` weight matrix followed by the
        bias vector, as float64.
        """
        header = struct.pack(f"<I{len(self.sizes)}I", len(self.sizes), *self.sizes)
        return header + self.theta[member].astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, hidden_activation: str = "relu",
                   head: Sequence[tuple[str, int]] | None = None,
                   topk: Sequence[int] | None = None) -> "DenseNet":
        (count,) = struct.unpack_from("<I", blob, 0)
        sizes = struct.unpack_from(f"<{count}I", blob, 4)
        net = cls(sizes, hidden_activation, head, topk=None if topk is None else [topk])
        body = np.frombuffer(blob, dtype="<f8", offset=4 + 4 * count)
        if body.size != net.num_params:
            raise ValueError("parameter count does not match header")
        net.theta[0] = body
        return net


def mse(pred: np.ndarray, target: np.ndarray):
    """Per-member mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    count = diff[0].size
    return (diff ** 2).reshape(diff.shape[0], -1).mean(axis=1), 2.0 * diff / count


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale each member's gradient row so its L2 norm is at most ``max_norm``."""
    norms = np.sqrt(np.einsum("ij,ij->i", grad, grad))[:, None]
    if np.all(norms <= max_norm):
        return grad
    return grad * np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))


class Adam:
    """Adam with bias correction over a ``(members, P)`` parameter array.

    ``step`` optionally clips each member's gradient to an L2 norm first.
    """

    def __init__(self, shape, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self._tmp = np.empty(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, max_norm: float | None = None) -> None:
        if grad.shape != self.m.shape:
            raise ValueError("gradient shape does not match optimizer state")
        if max_norm is not None:
            grad = clip_grad_norm(grad, max_norm)
        self.t += 1
        tmp = self._tmp
        self.m *= self.beta1
        np.multiply(grad, 1.0 - self.beta1, out=tmp)
        self.m += tmp
        self.v *= self.beta2
        np.square(grad, out=tmp)
        tmp *= 1.0 - self.beta2
        self.v += tmp
        # lr/c1 * m / (sqrt(v/c2) + eps) == lr*sqrt(c2)/c1 * m / (sqrt(v) + eps*sqrt(c2))
        root_c2 = math.sqrt(1.0 - self.beta2 ** self.t)
        c1 = 1.0 - self.beta1 ** self.t
        np.sqrt(self.v, out=tmp)
        tmp += self.eps * root_c2
        np.divide(self.m, tmp, out=tmp)
        tmp *= self.lr * root_c2 / c1
        params -= tmp

    def state_copy(self) -> "Adam":
        out = Adam(self.m.shape, self.lr, self.beta1, self.beta2, self.eps)
        out.m[...] = self.m
        out.v[...] = self.v
        out.t = self.t
        return out


def soft_update(target: DenseNet, online: DenseNet, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    if target.theta.shape != online.theta.shape:
        raise ValueError("target and online nets differ in shape")
    # target += tau * (online - target)
    diff = np.subtract(online.theta, target.theta)
    diff *= tau
    target.theta += diff


def gradient_check(net: DenseNet, x: np.ndarray, rng: np.random.Generator,
                   h: float = 1e-5, floor: float = 1e-7) -> float:
    """Max relative error between backprop and central differences.

    Checks every parameter and every input entry of ``net`` under the scalar
    loss ``sum(w * net(x))`` with a random projection ``w``.
    """
    x = np.array(x, dtype=float)
    out, cache = net.forward(x)
    proj = rng.standard_normal(out.shape)
    g_theta, g_x = net.backward(cache, proj)

    def loss() -> float:
        return float((net.forward(x)[0] * proj).sum())

    worst = 0.0
    flat = net.theta.reshape(-1)
    for i, analytic in enumerate(g_theta.reshape(-1)):
        keep = flat[i]
        flat[i] = keep + h
        up = loss()
        flat[i] = keep - h
        down = loss()
        flat[i] = keep
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    xf = x.reshape(-1)
    for i, analytic in enumerate(g_x.reshape(-1)):
        keep = xf[i]
        xf[i] = keep + h
        up = loss()
        xf[i] = keep - h
        down = loss()
        xf[i] = keep
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst
