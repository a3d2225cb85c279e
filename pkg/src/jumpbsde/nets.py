"""Scalar feedforward networks, one per time step, with exact gradients.

The network math below is written once and runs on plain arrays (fast
evaluation) or on :class:`~jumpbsde.tape.Tensor` parameters (recorded for
reverse mode).  The spatial gradient is itself a composition of recorded
operations, so losses that contain it can be differentiated in the
parameters without any special casing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape
from .errors import ConfigError, TapeMismatch, UnsupportedActivation

ACTIVATIONS = {
    "sigmoid": (tape.sigmoid, tape.sigmoid_prime_of_output, 0.25),
    "tanh": (tape.tanh, tape.tanh_prime_of_output, 1.0),
}


def _activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise UnsupportedActivation(f"unknown activation {name!r}; use one of {sorted(ACTIVATIONS)}") from None


def check_dims(dims):
    dims = [int(v) for v in dims]
    if len(dims) < 3:
        raise ConfigError("a network needs at least one hidden layer (three layer widths)")
    if any(v <= 0 for v in dims):
        raise ConfigError(f"layer widths must be positive, got {dims}")
    if dims[-1] != 1:
        raise ConfigError("networks are scalar valued: the last width must be 1")
    return dims


def standard_parameter_count(dims):
    """Number of affine parameters, sum of v_l * (1 + v_{l-1})."""
    return int(sum(v * (1 + u) for u, v in zip(dims[:-1], dims[1:])))


def regrouped_parameter_count(dims):
    """Alternative count that sums v_l * (1 + v_l) over every layer width."""
    return int(sum(v * (1 + v) for v in dims))


def evaluate(weights, biases, x, activation="sigmoid", with_grad=False):
    """Network value (and optionally its spatial gradient) at the rows of ``x``.

    ``weights[l]`` has shape (v_out, v_in).  Works for arrays and tensors.
    Returns shape (n,) values and, with ``with_grad``, an (n, d) gradient.
    """
    act, act_prime, _ = _activation(activation)
    h = x
    slopes = []
    for W, b in zip(weights[:-1], biases[:-1]):
        s = act(h @ W.T + b)
        if with_grad:
            slopes.append(act_prime(s))
        h = s
    out = (h @ weights[-1].T + biases[-1])[:, 0]
    if not with_grad:
        return out
    delta = weights[-1]
    for W, slope in zip(reversed(weights[:-1]), reversed(slopes)):
        delta = (delta * slope) @ W
    return out, delta


class FeedForwardNet:
    """Scalar network R^d -> R with activated hidden layers and affine output."""

    def __init__(self, dims, weights, biases, activation="sigmoid"):
        self.dims = check_dims(dims)
        _activation(activation)
        self.activation = activation
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for (u, v), W, b in zip(zip(self.dims[:-1], self.dims[1:]), self.weights, self.biases):
            if W.shape != (v, u) or b.shape != (v,):
                raise ConfigError(f"layer shape mismatch: W {W.shape}, b {b.shape}, expected ({v},{u}) and ({v},)")

    @classmethod
    def zeros(cls, dims, activation="sigmoid"):
        dims = check_dims(dims)
        return cls(dims, [np.zeros((v, u)) for u, v in zip(dims[:-1], dims[1:])],
                   [np.zeros(v) for v in dims[1:]], activation)

    @classmethod
    def xavier(cls, dims, rng, activation="sigmoid"):
        """Xavier-uniform weights, zero biases."""
        dims = check_dims(dims)
        weights = []
        for u, v in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (u + v))
            weights.append(rng.uniform(-limit, limit, size=(v, u)))
        return cls(dims, weights, [np.zeros(v) for v in dims[1:]], activation)

    @property
    def d(self):
        return self.dims[0]

    @property
    def n_params(self):
        return standard_parameter_count(self.dims)

    def flat(self):
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.extend([W.ravel(), b])
        return np.concatenate(parts)

    def load_flat(self, vector):
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_params:
            raise ConfigError(f"expected {self.n_params} parameters, got {vector.size}")
        pos = 0
        for i, (u, v) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            self.weights[i] = vector[pos:pos + u * v].reshape(v, u).copy()
            pos += u * v
            self.biases[i] = vector[pos:pos + v].copy()
            pos += v

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return evaluate(self.weights, self.biases, x, self.activation)

    def grad_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return evaluate(self.weights, self.biases, x, self.activation, with_grad=True)[1]

    def __call__(self, x):
        return self.forward(x)

    def growth_constants(self):
        return growth_constants(self)


@dataclass(frozen=True)
class GrowthConstants:
    """Bounds |U(x)|^2 <= A + B|x|^2 and |D_x U(x)|^2 <= C."""

    A: float
    B: float
    C: float


def growth_constants(net):
    """Global growth constants from bounded hidden outputs and bounded slopes."""
    _, _, slope_bound = _activation(net.activation)
    if net.activation not in ("sigmoid", "tanh"):
        raise UnsupportedActivation(net.activation)
    last_w, last_b = net.weights[-1], net.biases[-1]
    # hidden outputs lie in (0,1) for sigmoid and (-1,1) for tanh
    value_bound = np.abs(last_w).sum() + abs(float(last_b[0]))
    lipschitz = slope_bound ** (len(net.weights) - 1)
    for W in net.weights:
        lipschitz *= np.linalg.norm(W, 2)
    return GrowthConstants(A=float(value_bound ** 2), B=0.0, C=float(lipschitz ** 2))


class NetFamily:
    """M networks, one per time index, plus the trainable initial value y0.

    The flat parameter layout is net 0 (W_1, b_1, ..., W_L, b_L with W row
    major), net 1, ..., net M-1, and finally y0.
    """

    def __init__(self, nets, y0=0.0):
        if not nets:
            raise ConfigError("a family needs at least one network")
        dims = nets[0].dims
        if any(n.dims != dims or n.activation != nets[0].activation for n in nets):
            raise ConfigError("all networks in a family must share layer widths and activation")
        self.nets = list(nets)
        self.y0 = float(y0)

    @classmethod
    def initialize(cls, M, dims, rng_for_net, y0=0.0, activation="sigmoid"):
        """Xavier initialization; ``rng_for_net(n)`` supplies each net's generator."""
        return cls([FeedForwardNet.xavier(dims, rng_for_net(n), activation) for n in range(M)], y0)

    @classmethod
    def zeros(cls, M, dims, y0=0.0, activation="sigmoid"):
        return cls([FeedForwardNet.zeros(dims, activation) for _ in range(M)], y0)

    @property
    def M(self):
        return len(self.nets)

    @property
    def dims(self):
        return self.nets[0].dims

    @property
    def activation(self):
        return self.nets[0].activation

    @property
    def n_params(self):
        return self.M * self.nets[0].n_params + 1

    def flat(self):
        return np.concatenate([n.flat() for n in self.nets] + [np.array([self.y0])])

    def load_flat(self, vector):
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.n_params:
            raise ConfigError(f"expected {self.n_params} parameters, got {vector.size}")
        size = self.nets[0].n_params
        for i, net in enumerate(self.nets):
            net.load_flat(vector[i * size:(i + 1) * size])
        self.y0 = float(vector[-1])

    def copy(self):
        clone = NetFamily.zeros(self.M, self.dims, activation=self.activation)
        clone.load_flat(self.flat())
        return clone

    def record(self):
        """Wrap every parameter in a fresh leaf tensor for one recorded rollout."""
        return RecordedFamily(self)


class RecordedFamily:
    """Leaf tensors for one differentiable pass through a :class:`NetFamily`."""

    def __init__(self, family):
        self.family = family
        self.activation = family.activation
        self.leaves = []
        self.params = []
        for net in family.nets:
            Ws = [tape.Tensor(W, requires_grad=True) for W in net.weights]
            bs = [tape.Tensor(b, requires_grad=True) for b in net.biases]
            for W, b in zip(Ws, bs):
                self.leaves.extend([W, b])
            self.params.append((Ws, bs))
        self.y0 = tape.Tensor(np.array(family.y0), requires_grad=True)
        self.leaves.append(self.y0)

    def evaluate(self, n, x, with_grad=False):
        Ws, bs = self.params[n]
        return evaluate(Ws, bs, x, self.activation, with_grad)


def backprop_params(recorded, loss):
    """Gradient of a scalar loss over the flat parameter layout of the family."""
    if not isinstance(loss, tape.Tensor) or loss.value.size != 1:
        raise TapeMismatch("the recorded rollout must end in a scalar loss")
    grads = tape.grad(loss, recorded.leaves)
    return np.concatenate([g.ravel() for g in grads])


# checkpoints: one JSON header line, then raw little-endian float64 parameters

def save_checkpoint(path, family, header=None):
    meta = {
        "format": "jumpbsde-checkpoint-1",
        "M": family.M,
        "dims": family.dims,
        "activation": family.activation,
        "n_params": family.n_params,
    }
    meta.update(header or {})
    body = family.flat().astype("<f8").tobytes()
    Path(path).write_bytes(json.dumps(meta, sort_keys=True).encode() + b"\n" + body)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    head, body = raw.split(b"\n", 1)
    meta = json.loads(head)
    family = NetFamily.zeros(meta["M"], meta["dims"], activation=meta["activation"])
    family.load_flat(np.frombuffer(body, dtype="<f8"))
    return family, meta
