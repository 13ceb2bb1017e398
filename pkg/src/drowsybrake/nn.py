"""Small numpy neural-network kernel.

Dense layers, a stacked tanh recurrent layer, dropout, MSE / binary
cross-entropy losses, an L2 penalty and Adam.  Every layer caches what it
needs during ``forward`` and accumulates parameter gradients during
``backward``; the caller zeroes gradients between steps.

Layers default to float64; the Q-networks opt into float32 for speed.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .fileio import atomic_write

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")
FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Raised when a loss or network output stops being finite."""


class Param:
    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True, dtype=np.float64):
        self.name = name
        self.value = np.asarray(value, dtype=dtype)
        self.grad = np.zeros_like(self.value)
        self.decay = decay

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


def glorot_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    return q * np.sign(np.diag(r))


def sigmoid(z):
    out = np.empty_like(z, dtype=z.dtype if z.dtype.kind == "f" else np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Module:
    training = True

    def parameters(self) -> list[Param]:
        return []

    def children(self) -> list["Module"]:
        return []

    def train(self, mode: bool = True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad.fill(0.0)

    def __call__(self, x):
        return self.forward(x)


class Dense(Module):
    """Fully connected layer ``act(x @ W + b)`` over a batch of rows."""

    def __init__(self, n_in: int, n_out: int, activation: str = "identity",
                 rng: np.random.Generator | None = None, name: str = "dense", dtype=np.float64):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self.W = Param(f"{name}.W", glorot_uniform(rng, n_in, n_out), dtype=dtype)
        self.b = Param(f"{name}.b", np.zeros(n_out), decay=False, dtype=dtype)
        self._x = self._y = None

    def parameters(self):
        return [self.W, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input with {self.n_in} columns, got shape {x.shape}")
        z = x @ self.W.value
        z += self.b.value
        if self.activation == "relu":
            y = np.maximum(z, 0.0, out=z)
        elif self.activation == "tanh":
            y = np.tanh(z)
        elif self.activation == "sigmoid":
            y = sigmoid(z)
        else:
            y = z
        self._x, self._y = x, y
        return y

    def backward(self, dy):
        y = self._y
        if self.activation == "relu":
            dz = dy * (y > 0)
        elif self.activation == "tanh":
            dz = dy * (1.0 - y * y)
        elif self.activation == "sigmoid":
            dz = dy * y * (1.0 - y)
        else:
            dz = dy
        self.W.grad += self._x.T @ dz
        self.b.grad += dz.sum(axis=0)
        return dz @ self.W.value.T


class Recurrent(Module):
    """Elman layer: ``h_t = tanh(x_t W_in + h_{t-1} W_h + b)`` with ``h_0 = 0``.

    Input is ``(batch, steps, features)``; the output keeps every hidden state,
    ``(batch, steps, hidden)``, so layers can be stacked.
    """

    def __init__(self, n_in: int, n_hidden: int, rng: np.random.Generator | None = None,
                 name: str = "rnn"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_hidden = n_in, n_hidden
        self.W_in = Param(f"{name}.W_in", glorot_uniform(rng, n_in, n_hidden))
        self.W_h = Param(f"{name}.W_h", orthogonal(rng, n_hidden))
        self.b = Param(f"{name}.b", np.zeros(n_hidden), decay=False)
        self._x = self._h = None

    def parameters(self):
        return [self.W_in, self.W_h, self.b]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.n_in:
            raise ValueError(f"expected (batch, steps, {self.n_in}) input, got {x.shape}")
        B, T, _ = x.shape
        if T == 0:
            raise ValueError("empty sequence")
        xin = x @ self.W_in.value + self.b.value
        h = np.zeros((B, T, self.n_hidden))
        prev = np.zeros((B, self.n_hidden))
        for t in range(T):
            prev = np.tanh(xin[:, t] + prev @ self.W_h.value)
            h[:, t] = prev
        self._x, self._h = x, h
        return h

    def backward(self, dh):
        x, h = self._x, self._h
        B, T, _ = x.shape
        dx = np.empty_like(x)
        carry = np.zeros((B, self.n_hidden))
        Wh = self.W_h.value
        for t in range(T - 1, -1, -1):
            dz = (dh[:, t] + carry) * (1.0 - h[:, t] ** 2)
            h_prev = h[:, t - 1] if t > 0 else np.zeros((B, self.n_hidden))
            self.W_in.grad += x[:, t].T @ dz
            self.W_h.grad += h_prev.T @ dz
            self.b.grad += dz.sum(axis=0)
            dx[:, t] = dz @ self.W_in.value.T
            carry = dz @ Wh.T
        return dx


class LastStep(Module):
    """Select the final time step of a ``(batch, steps, features)`` tensor."""

    def forward(self, x):
        self._shape = x.shape
        return x[:, -1, :]

    def backward(self, dy):
        dx = np.zeros(self._shape)
        dx[:, -1, :] = dy
        return dx


class Dropout(Module):
    """Inverted dropout; the identity map in inference mode."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def dense_forward(layer: Dense, x) -> np.ndarray:
    return layer.forward(np.atleast_2d(x))


def rnn_forward(cells: Sequence[Recurrent], sequence) -> np.ndarray:
    """Run stacked recurrent cells over one ``(steps, features)`` sequence and
    return the last layer's final hidden state."""
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError("sequence must be a non-empty (steps, features) matrix")
    h = seq[None]
    for cell in cells:
        h = cell.forward(h)
    return h[0, -1]


# -- losses ---------------------------------------------------------------

def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_with_logits(logits, labels):
    z = logits
    y = labels.reshape(z.shape)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(loss)), (sigmoid(z) - y) / z.size


LOSSES: dict[str, Callable] = {"mse": mse_loss, "bce": bce_with_logits}


def l2_penalty(params: Iterable[Param], lam: float, accumulate: bool = True) -> float:
    """``lam * sum(w**2)`` over decaying parameters (biases are exempt)."""
    if lam == 0.0:
        return 0.0
    total = 0.0
    for p in params:
        if not p.decay:
            continue
        total += float(np.sum(p.value * p.value))
        if accumulate:
            p.grad += 2.0 * lam * p.value
    return lam * total


class Adam:
    """Adam over a flat copy of the parameters.

    On construction the parameter values and gradients are moved into two
    contiguous buffers (each ``Param`` keeps a view), so one step is a handful
    of vectorised in-place operations.
    """

    def __init__(self, params: Sequence[Param], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        dtype = self.params[0].value.dtype if self.params else np.float64
        total = sum(p.value.size for p in self.params)
        self.flat = np.empty(total, dtype=dtype)
        self.flat_grad = np.zeros(total, dtype=dtype)
        offset = 0
        for p in self.params:
            n, shape = p.value.size, p.value.shape
            self.flat[offset:offset + n] = p.value.ravel()
            self.flat_grad[offset:offset + n] = p.grad.ravel()
            p.value = self.flat[offset:offset + n].reshape(shape)
            p.grad = self.flat_grad[offset:offset + n].reshape(shape)
            offset += n
        self.m = np.zeros_like(self.flat)
        self.v = np.zeros_like(self.flat)
        self._tmp = np.empty_like(self.flat)
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        g, m, v, tmp = self.flat_grad, self.m, self.v, self._tmp
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        if self.learning_rate == 0.0:
            return
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / math.sqrt(c2)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.learning_rate / c1
        self.flat -= tmp


def backward_and_step(model: Module, batch, loss_kind, adam: Adam, l2: float = 0.0) -> float:
    """One optimisation step on ``batch = (inputs, targets)``.

    ``loss_kind`` is ``"mse"``, ``"bce"`` or a callable mapping the model
    output to ``(loss, d_output)``.  Returns the loss before the update.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    out = model.forward(x)
    if callable(loss_kind):
        loss, dout = loss_kind(out)
    else:
        loss, dout = LOSSES[loss_kind](out, y)
    loss += l2_penalty(model.parameters(), l2)
    if not math.isfinite(loss):
        raise DivergenceError("divergence: non-finite loss")
    model.backward(dout)
    adam.step()
    return loss


# -- weight files -----------------------------------------------------------

def save_weights(path, params: Sequence[Param]):
    lines = [f"format_version={FORMAT_VERSION}", f"tensors={len(params)}"]
    for p in params:
        v = np.atleast_2d(p.value) if p.value.ndim < 2 else p.value
        shape = "x".join(str(s) for s in p.value.shape)
        lines.append(f"tensor={p.name} shape={shape}")
        for row in v.reshape(v.shape[0], -1):
            lines.append(" ".join(format(float(a), ".17g") for a in row))
    atomic_write(path, "\n".join(lines) + "\n")


def read_weights(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        text = fh.read().splitlines()
    if not text or text[0].strip() != f"format_version={FORMAT_VERSION}":
        raise ValueError(f"{path}: unsupported weight file header")
    n = int(text[1].split("=", 1)[1])
    out: dict[str, np.ndarray] = {}
    i = 2
    for _ in range(n):
        head = dict(kv.split("=", 1) for kv in text[i].split())
        shape = tuple(int(s) for s in head["shape"].split("x"))
        rows = 1 if len(shape) < 2 else shape[0]
        block = [[float(a) for a in line.split()] for line in text[i + 1:i + 1 + rows]]
        out[head["tensor"]] = np.array(block, dtype=np.float64).reshape(shape)
        i += 1 + rows
    return out


def load_weights(path, params: Sequence[Param]):
    stored = read_weights(path)
    for p in params:
        if p.name not in stored:
            raise KeyError(f"{path}: missing tensor {p.name}")
        if stored[p.name].shape != p.value.shape:
            raise ValueError(f"{path}: shape mismatch for {p.name}")
        p.value[...] = stored[p.name]


def copy_params(src: Sequence[Param], dst: Sequence[Param]):
    for s, d in zip(src, dst):
        d.value[...] = s.value

