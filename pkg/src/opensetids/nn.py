"""
A small reverse-mode autodiff engine over numpy arrays.

Only what the payload encoder, the linear classifier and the per-class VAEs
need is here: valid 1-D convolution, batch normalization, dense layers, a
few activations, cross-entropy / MSE / Gaussian KL losses, SGD and Adam.

Arithmetic is done in float64. Parameter values are always kept exactly
representable in float32, so writing them out as single precision and
reading them back is lossless.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import BackwardBeforeForward, ShapeMismatch

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def round_f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, idx):
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(i, (slice, int)) for i in parts)

        def back(g):
            out = np.zeros_like(self.data)
            if basic:  # basic indexing never repeats an element
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)
        return _record(self.data[idx], (self,), back)

    def reshape(self, *shape):
        src = self.data.shape
        return _record(self.data.reshape(*shape), (self,), lambda g: (g.reshape(src),))

    def sum(self):
        src = self.data.shape
        return _record(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, src).copy(),))

    def mean(self):
        n = self.data.size
        src = self.data.shape
        return _record(self.data.mean(), (self,), lambda g: (np.full(src, g / n),))

    def exp(self):
        out = np.exp(self.data)
        return _record(out, (self,), lambda g: (g * out,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _record(out, (self,), lambda g: (g * 0.5 / out,))


class Parameter(Tensor):
    """Trainable leaf whose value is held at float32 precision."""

    __slots__ = ()

    def __init__(self, value, name: str = ""):
        super().__init__(round_f32(value), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        value = round_f32(value)
        if value.shape != self.data.shape:
            raise ShapeMismatch(f"{self.name}: cannot assign {value.shape} to {self.data.shape}")
        self.data = value

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=axis)))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable Parameter."""
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardBeforeForward("loss has no recorded computation to differentiate")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if parent.requires_grad and pg is not None:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# --------------------------------------------------------------------------
# layer ops


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


def conv1d(x, weight: Tensor, bias: Tensor | None, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation over [batch, channels, length]."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeMismatch(f"conv1d input must be [batch, channels, length], got {x.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[1] != c_in:
        raise ShapeMismatch(f"conv1d expects {c_in} input channels, got {x.shape[1]}")
    if x.shape[2] < k:
        raise ShapeMismatch(f"conv1d input length {x.shape[2]} shorter than kernel {k}")
    if stride < 1:
        raise ValueError("stride must be positive")
    length_out = conv_output_length(x.shape[2], k, stride)
    windows = sliding_window_view(x.data, k, axis=2)[:, :, ::stride, :]
    out = np.einsum("bclk,ock->bol", windows, weight.data)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def back(g):
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            span = stride * (length_out - 1) + 1
            for kk in range(k):
                gx[:, :, kk:kk + span:stride] += np.einsum("bol,oc->bcl", g, weight.data[:, :, kk])
        gw = np.einsum("bol,bclk->ock", g, windows)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return grads

    return _record(out, parents, back)


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear expects [batch, {weight.shape[1]}], got {x.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def back(g):
        grads = [g @ weight.data if x.requires_grad else None, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record(out, parents, back)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _record(np.where(pos, x.data, slope * x.data), (x,),
                   lambda g: (np.where(pos, g, slope * g),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _record(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    s = softmax_array(x.data)
    return _record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"logits {logits.shape} / targets {targets.shape} mismatch")
    n_classes = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise IndexError(f"target index out of range [0, {n_classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(targets.size)
    loss = -log_probs[rows, targets].mean()

    def back(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (g * grad / targets.size,)

    return _record(loss, (logits,), back)


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    return _record(np.mean(diff ** 2), (a, b),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def gaussian_kl(mu, var) -> Tensor:
    """KL(N(mu, var) || N(0, 1)) summed over latents, averaged over the batch."""
    mu, var = as_tensor(mu), as_tensor(var)
    batch = mu.shape[0] if mu.data.ndim > 1 else 1
    kl = 0.5 * np.sum(var.data + mu.data ** 2 - 1.0 - np.log(var.data)) / batch
    return _record(kl, (mu, var),
                   lambda g: (g * mu.data / batch, g * 0.5 * (1.0 - 1.0 / var.data) / batch))


# --------------------------------------------------------------------------
# modules


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update((name, np.array(b, dtype=np.float64)) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for name, p in params.items():
            p.assign(state[name])
        for name in buffers:
            owner, attr = self._resolve(name)
            current = getattr(owner, attr)
            value = round_f32(state[name])
            if value.shape != current.shape:
                raise ShapeMismatch(f"{name}: {value.shape} vs {current.shape}")
            setattr(owner, attr, value)

    def _resolve(self, dotted: str):
        owner = self
        *path, attr = dotted.split(".")
        for part in path:
            owner = owner[int(part)] if isinstance(owner, (list, tuple)) else getattr(owner, part)
        return owner, attr

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (n_out, n_in), n_in), "weight")
        self.bias = Parameter(_uniform(rng, (n_out,), n_in), "bias")

    def __call__(self, x) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel
        self.stride = stride
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kernel), fan_in), "weight")
        self.bias = Parameter(_uniform(rng, (c_out,), fan_in), "bias")

    def __call__(self, x) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride)


class BatchNorm1d(Module):
    """Per-channel normalization over the batch and length axes."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), "gamma")
        self.beta = Parameter(np.zeros(channels), "beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x) -> Tensor:
        return batch_norm(x, self, self.training)


def batch_norm(x, bn: BatchNorm1d, training: bool) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 3 or x.shape[1] != bn.gamma.shape[0]:
        raise ShapeMismatch(f"batch_norm expects [batch, {bn.gamma.shape[0]}, length], got {x.shape}")
    gamma = bn.gamma.data[None, :, None]
    beta = bn.beta.data[None, :, None]
    n = x.shape[0] * x.shape[2]
    if training:
        mean = x.data.mean(axis=(0, 2), keepdims=True)
        var = x.data.var(axis=(0, 2), keepdims=True)
        unbiased = var * n / (n - 1) if n > 1 else var
        m = bn.momentum
        bn.running_mean = round_f32((1 - m) * bn.running_mean + m * mean.ravel())
        bn.running_var = round_f32((1 - m) * bn.running_var + m * unbiased.ravel())
    else:
        mean = bn.running_mean[None, :, None]
        var = bn.running_var[None, :, None]
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mean) * inv_std
    out = gamma * xhat + beta

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gamma
        if training:
            gx = inv_std / n * (n * gxhat
                                - gxhat.sum(axis=(0, 2), keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True))
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    return _record(out, (x, bn.gamma, bn.beta), back)


# --------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float = 0.01):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        for p in self.params:
            p.assign(p.data - self.lr * p.grad)


class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.assign(p.data - (self.lr / c1) * m / denom)


def make_optimizer(params, method: str = "adam", lr: float = 1e-3,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    method = method.lower()
    if method == "sgd":
        return SGD(params, lr)
    if method == "adam":
        return Adam(params, lr, betas, eps)
    raise ValueError(f"unknown optimizer {method!r}; choose 'sgd' or 'adam'")
