"""Residual-form value network, policy network, AdamW and checkpoint I/O.

The value is ``V(z) = 0.5 * ||r(z)||^2`` where ``r`` is a tanh MLP with a
linear output layer.  Everything is float64 and written with plain numpy;
the backward passes are hand-derived.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DimensionError

CHECKPOINT_FORMAT = "valuempc-mlp"
CHECKPOINT_VERSION = 1


class MLP:
    """Fully connected network, tanh hidden layers, linear output.

    Weights are stored as ``(fan_out, fan_in)`` matrices.
    """

    activation = "tanh"

    def __init__(self, sizes, rng=None, weights=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if weights is not None:
            self.W = [np.array(w, float) for w in weights[0]]
            self.b = [np.array(b, float) for b in weights[1]]
            return
        rng = np.random.default_rng() if rng is None else rng
        self.W, self.b = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            self.W.append(rng.uniform(-lim, lim, (fan_out, fan_in)))
            self.b.append(rng.uniform(-lim, lim, fan_out))

    @property
    def input_dim(self):
        return self.sizes[0]

    @property
    def output_dim(self):
        return self.sizes[-1]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.W, self.b))

    def copy(self):
        return type(self)(self.sizes, weights=([w.copy() for w in self.W], [b.copy() for b in self.b]))

    # -- flat parameter views ------------------------------------------------
    def get_params(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.W, self.b)])

    def set_params(self, theta):
        theta = np.asarray(theta, float)
        if theta.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} parameters, got {theta.size}")
        i = 0
        for k, (w, b) in enumerate(zip(self.W, self.b)):
            self.W[k] = theta[i:i + w.size].reshape(w.shape).copy()
            i += w.size
            self.b[k] = theta[i:i + b.size].copy()
            i += b.size

    # -- evaluation ------------------------------------------------------------
    def _check_input(self, z):
        z = np.asarray(z, float)
        if z.shape[-1] != self.input_dim:
            raise DimensionError(f"network expects input dimension {self.input_dim}, got {z.shape[-1]}")
        return z

    def forward(self, z, keep=False):
        z = self._check_input(z)
        lead = z.shape[:-1]
        h = z.reshape(-1, self.input_dim)
        acts = [h]
        n = len(self.W)
        for k in range(n):
            h = h @ self.W[k].T + self.b[k]
            if k < n - 1:
                h = np.tanh(h)
            acts.append(h)
        out = h.reshape(lead + (self.output_dim,))
        return (out, acts) if keep else out

    __call__ = forward

    def input_jacobian(self, z):
        """Output value and Jacobian d out / d z, shapes ``(..., d)`` and ``(..., d, in)``."""
        z = self._check_input(z)
        lead = z.shape[:-1]
        h = z.reshape(-1, self.input_dim)
        J = np.broadcast_to(np.eye(self.input_dim), (h.shape[0], self.input_dim, self.input_dim))
        n = len(self.W)
        for k in range(n):
            h = h @ self.W[k].T + self.b[k]
            J = self.W[k] @ J
            if k < n - 1:
                h = np.tanh(h)
                J = (1.0 - h * h)[:, :, None] * J
        return h.reshape(lead + (self.output_dim,)), J.reshape(lead + J.shape[1:])

    def backward(self, acts, grad_out):
        """Parameter gradient (flat) given cached activations and dL/d out."""
        g = np.asarray(grad_out, float).reshape(-1, self.output_dim)
        grads = []
        for k in range(len(self.W) - 1, -1, -1):
            gW = g.T @ acts[k]
            gb = g.sum(axis=0)
            grads.append((gW, gb))
            if k > 0:
                g = (g @ self.W[k]) * (1.0 - acts[k] ** 2)
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


class ValueNetwork(MLP):
    """``V(z) = 0.5 ||r(z)||^2`` with ``r`` an MLP of output size ``d``."""

    kind = "value"

    @classmethod
    def build(cls, input_dim, hidden=(64, 64, 64), d=64, rng=None):
        return cls([input_dim, *hidden, d], rng=rng)

    def residual(self, z):
        return self.forward(z)

    def value(self, z):
        r = self.forward(z)
        return 0.5 * np.sum(r * r, axis=-1)

    def value_derivatives(self, z):
        """Gauss-Newton gradient ``J^T r`` and Hessian ``J^T J`` w.r.t. the input."""
        r, J = self.input_jacobian(z)
        JT = np.swapaxes(J, -1, -2)
        grad = np.einsum("...ij,...j->...i", JT, r)
        return grad, JT @ J

    def loss_and_param_gradient(self, z, targets, z_stat=None, alpha=0.0, weight_decay=0.0):
        """Fitting loss and its exact parameter gradient.

        ``sum_j (V(z_j) - t_j)^2 + alpha * sum_s V(z_s)^2 + 0.5 * weight_decay * ||theta||^2``.
        The trainer applies weight decay in the optimizer and passes 0 here.
        """
        z = np.asarray(z, float).reshape(-1, self.input_dim)
        t = np.asarray(targets, float).reshape(-1)
        if z_stat is not None and alpha > 0.0:
            zs = np.asarray(z_stat, float).reshape(-1, self.input_dim)
            z_all = np.concatenate([z, zs])
        else:
            zs = None
            z_all = z
        r, acts = self.forward(z_all, keep=True)
        v = 0.5 * np.sum(r * r, axis=-1)
        n = z.shape[0]
        err = v[:n] - t
        loss = float(np.sum(err * err))
        dv = np.zeros_like(v)
        dv[:n] = 2.0 * err
        if zs is not None:
            vs = v[n:]
            loss += alpha * float(np.sum(vs * vs))
            dv[n:] = 2.0 * alpha * vs
        grad = self.backward(acts, dv[:, None] * r)
        if weight_decay:
            theta = self.get_params()
            loss += 0.5 * weight_decay * float(theta @ theta)
            grad = grad + weight_decay * theta
        return loss, grad


class PolicyNetwork(MLP):
    """State (plus context) to control regression network."""

    kind = "policy"

    @classmethod
    def build(cls, input_dim, n_u, hidden=(64, 64, 64), rng=None):
        return cls([input_dim, *hidden, n_u], rng=rng)

    def loss_and_param_gradient(self, z, targets, weight_decay=0.0):
        """Summed squared error of the predicted controls."""
        z = np.asarray(z, float).reshape(-1, self.input_dim)
        y = np.asarray(targets, float).reshape(-1, self.output_dim)
        out, acts = self.forward(z, keep=True)
        err = out - y
        loss = float(np.sum(err * err))
        grad = self.backward(acts, 2.0 * err)
        if weight_decay:
            theta = self.get_params()
            loss += 0.5 * weight_decay * float(theta @ theta)
            grad = grad + weight_decay * theta
        return loss, grad


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    steps: int = 80          # SGD steps per value iteration
    epochs: int = 0          # if > 0, full passes over the data instead of `steps`
    alpha: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0 or self.weight_decay < 0:
            raise ValueError("alpha and weight_decay must be nonnegative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")

    def to_dict(self):
        return asdict(self)


class Adam:
    """Adam with decoupled weight decay (AdamW)."""

    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    @classmethod
    def from_config(cls, n_params, cfg: TrainConfig):
        return cls(n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)

    def step(self, theta, grad):
        grad = np.asarray(grad, float)
        if grad.shape != self.m.shape:
            raise DimensionError(f"gradient has {grad.size} entries, optimizer expects {self.m.size}")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta = np.asarray(theta, float)
        return theta - self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * theta)


# -- adapters used as solver terminal costs -----------------------------------

class TerminalValue:
    """Expose a value network as a terminal cost over states.

    Chains the network input map of the environment (wrapping, scaling and
    context concatenation) into the Gauss-Newton derivatives.
    """

    def __init__(self, net: ValueNetwork, env):
        if net.input_dim != env.input_dim:
            raise DimensionError(
                f"network input dimension {net.input_dim} does not match env '{env.name}' "
                f"input dimension {env.input_dim}")
        self.net = net
        self.env = env

    def value(self, x, ctx=None):
        return self.net.value(self.env.net_input(x, ctx))

    def value_derivatives(self, x, ctx=None):
        z = self.env.net_input(x, ctx)
        r, Jz = self.net.input_jacobian(z)
        J = Jz @ self.env.net_input_jac(x, ctx)
        JT = np.swapaxes(J, -1, -2)
        return np.einsum("...ij,...j->...i", JT, r), JT @ J


class QuadraticValue:
    """``V(x) = x^T P x``, mostly for tests and oracles."""

    def __init__(self, P):
        self.P = np.atleast_2d(np.asarray(P, float))

    def value(self, x, ctx=None):
        x = np.asarray(x, float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def value_derivatives(self, x, ctx=None):
        x = np.asarray(x, float)
        H = self.P + self.P.T
        return x @ H.T, np.broadcast_to(H, x.shape[:-1] + H.shape).copy()


class ShiftedValue:
    """``V(x) + k``; the argmin of any OCP is unchanged."""

    def __init__(self, base, k):
        self.base, self.k = base, float(k)

    def value(self, x, ctx=None):
        return self.base.value(x, ctx) + self.k

    def value_derivatives(self, x, ctx=None):
        return self.base.value_derivatives(x, ctx)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(net: MLP, path, meta=None):
    """Write a JSON checkpoint; floats use repr so they round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": getattr(net, "kind", "mlp"),
        "activation": net.activation,
        "sizes": net.sizes,
        "meta": meta or {},
        "layers": [{"W": w.tolist(), "b": b.tolist()} for w, b in zip(net.W, net.b)],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def load_checkpoint(path, input_dim=None):
    """Read a checkpoint written by ``save_checkpoint``.

    Raises CheckpointError on malformed content and DimensionError when
    ``input_dim`` is given and does not match.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if doc.get("activation") != MLP.activation:
        raise CheckpointError(f"{path}: unsupported activation {doc.get('activation')!r}")
    sizes = doc.get("sizes")
    layers = doc.get("layers")
    if not isinstance(sizes, list) or not isinstance(layers, list) or len(layers) != len(sizes) - 1:
        raise CheckpointError(f"{path}: inconsistent 'sizes'/'layers' entries")
    Ws, bs = [], []
    for k, layer in enumerate(layers):
        try:
            W = np.array(layer["W"], float)
            b = np.array(layer["b"], float)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: layers[{k}]: {exc}") from None
        if W.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
            raise CheckpointError(f"{path}: layers[{k}] has shape {W.shape}/{b.shape}, "
                                  f"expected ({sizes[k + 1]}, {sizes[k]})")
        Ws.append(W)
        bs.append(b)
    cls = {"value": ValueNetwork, "policy": PolicyNetwork}.get(doc.get("kind"), MLP)
    net = cls(sizes, weights=(Ws, bs))
    net.meta = doc.get("meta", {})
    if input_dim is not None and net.input_dim != input_dim:
        raise DimensionError(f"{path}: checkpoint input dimension {net.input_dim}, environment expects {input_dim}")
    return net
