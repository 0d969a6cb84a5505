"""Fully-connected softmax classifier on a flat parameter vector.

The network is ``[affine -> (batch norm) -> ReLU] * L -> affine -> softmax``
trained with mean cross-entropy.  All trainable values live in one float64
vector so that meta-learners, aggregation and checkpoints can treat a model
as a plain array.

Gradients are computed by hand-written reverse mode.  Hessian-vector
products reuse the very same backward code on :class:`Dual` numbers
(forward-over-reverse), so ``hvp`` is exact and needs no extra derivation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

PROB_FLOOR = 1e-15
BN_EPS = 1e-5
_LOG_FLOOR = np.log(PROB_FLOOR)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int = 2
    hidden_dims: tuple[int, ...] = (256, 128, 64, 64)
    batchnorm_enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims must be a non-empty list of positive sizes")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def num_params(self) -> int:
        n = sum(i * o + o for i, o in self.layer_dims)
        if self.batchnorm_enabled:
            n += 2 * sum(self.hidden_dims)
        return n

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoint headers."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one row")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels length must equal the number of rows")

    def __len__(self):
        return self.inputs.shape[0]


class Dual:
    """Array with a tangent carried alongside (first-order forward mode)."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, x, t):
        self.x = x
        self.t = t

    def __add__(self, o):
        if isinstance(o, Dual):
            return Dual(self.x + o.x, self.t + o.t)
        return Dual(self.x + o, self.t)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.x, -self.t)

    def __sub__(self, o):
        return self + (-o)

    def __rsub__(self, o):
        return (-self) + o

    def __mul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.x * o.x, self.t * o.x + self.x * o.t)
        return Dual(self.x * o, self.t * o)

    __rmul__ = __mul__

    def __matmul__(self, o):
        if isinstance(o, Dual):
            return Dual(self.x @ o.x, self.t @ o.x + self.x @ o.t)
        return Dual(self.x @ o, self.t @ o)

    def __rmatmul__(self, o):
        return Dual(o @ self.x, o @ self.t)

    @property
    def T(self):
        return Dual(self.x.T, self.t.T)

    def sum(self, axis=None, keepdims=False):
        return Dual(self.x.sum(axis=axis, keepdims=keepdims), self.t.sum(axis=axis, keepdims=keepdims))

    def mean(self, axis=None, keepdims=False):
        return Dual(self.x.mean(axis=axis, keepdims=keepdims), self.t.mean(axis=axis, keepdims=keepdims))


def _primal(a):
    return a.x if isinstance(a, Dual) else a


def _rsqrt(a):
    if isinstance(a, Dual):
        r = 1.0 / np.sqrt(a.x)
        return Dual(r, -0.5 * r**3 * a.t)
    return 1.0 / np.sqrt(a)


def _softmax(z):
    zx = _primal(z)
    e = np.exp(zx - zx.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    if isinstance(z, Dual):
        return Dual(p, p * (z.t - (p * z.t).sum(axis=1, keepdims=True)))
    return p


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _unpack(flat, config: ModelConfig):
    if isinstance(flat, Dual):
        xs, ts = _unpack(flat.x, config), _unpack(flat.t, config)
        return tuple([Dual(a, b) for a, b in zip(x, t)] for x, t in zip(xs, ts))
    weights, biases, scales, shifts = [], [], [], []
    pos = 0
    for fan_in, fan_out in config.layer_dims:
        weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
        pos += fan_in * fan_out
        biases.append(flat[pos:pos + fan_out])
        pos += fan_out
    if config.batchnorm_enabled:
        for h in config.hidden_dims:
            scales.append(flat[pos:pos + h])
            pos += h
            shifts.append(flat[pos:pos + h])
            pos += h
    return weights, biases, scales, shifts


def _pack(weights, biases, scales, shifts):
    parts = []
    for w, b in zip(weights, biases):
        parts += [w, b]
    for g, s in zip(scales, shifts):
        parts += [g, s]
    if parts and isinstance(parts[0], Dual):
        return Dual(np.concatenate([p.x.ravel() for p in parts]),
                    np.concatenate([p.t.ravel() for p in parts]))
    return np.concatenate([p.ravel() for p in parts])


def _check(params, config: ModelConfig, batch: Batch):
    n = _primal(params).shape
    if n != (config.num_params,):
        raise ValueError(f"parameter vector has shape {n}, config needs ({config.num_params},)")
    if batch.inputs.shape[1] != config.input_dim:
        raise ValueError(f"batch has {batch.inputs.shape[1]} columns, config needs {config.input_dim}")
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= config.num_classes):
        raise ValueError("labels outside [0, num_classes)")


def _forward(params, config: ModelConfig, x: np.ndarray):
    """Forward pass returning logits and the tape needed by ``_backward``."""
    weights, biases, scales, shifts = _unpack(params, config)
    tape = []
    h = x
    for i in range(len(config.hidden_dims)):
        z = h @ weights[i] + biases[i]
        entry = {"h_in": h}
        if config.batchnorm_enabled:
            centered = z - z.mean(axis=0)
            inv_std = _rsqrt((centered * centered).mean(axis=0) + BN_EPS)
            zhat = centered * inv_std
            y = zhat * scales[i] + shifts[i]
            entry.update(zhat=zhat, inv_std=inv_std)
        else:
            y = z
        mask = _primal(y) > 0
        entry["mask"] = mask
        h = y * mask
        tape.append(entry)
    logits = h @ weights[-1] + biases[-1]
    return logits, tape, h


def _backward(params, config: ModelConfig, batch: Batch):
    logits, tape, h_last = _forward(params, config, batch.inputs)
    weights, _, scales, _ = _unpack(params, config)
    out = np.empty(config.num_params)
    if isinstance(params, Dual):
        out = Dual(out, np.empty(config.num_params))
    dws, dbs, dscales, dshifts = _unpack(out, config)

    def put(slots, i, value):
        if isinstance(value, Dual):
            slots[i].x[...] = value.x
            slots[i].t[...] = value.t
        else:
            slots[i][...] = value

    n = len(batch)
    rows = np.arange(n)
    onehot = np.zeros((n, config.num_classes))
    onehot[rows, batch.labels] = 1.0
    live = (_log_softmax(_primal(logits))[rows, batch.labels] > _LOG_FLOOR).astype(float)[:, None]

    dz = (_softmax(logits) - onehot) * (live / n)
    put(dws, -1, h_last.T @ dz)
    put(dbs, -1, dz.sum(axis=0))
    dh = dz @ weights[-1].T
    for i in reversed(range(len(config.hidden_dims))):
        entry = tape[i]
        dy = dh * entry["mask"]
        if config.batchnorm_enabled:
            zhat = entry["zhat"]
            put(dscales, i, (dy * zhat).sum(axis=0))
            put(dshifts, i, dy.sum(axis=0))
            dzhat = dy * scales[i]
            dz = entry["inv_std"] * (
                dzhat - dzhat.mean(axis=0) - zhat * (dzhat * zhat).mean(axis=0)
            )
        else:
            dz = dy
        put(dws, i, entry["h_in"].T @ dz)
        put(dbs, i, dz.sum(axis=0))
        if i > 0:
            dh = dz @ weights[i].T
    return out


def init_params(config: ModelConfig, rng: np.random.Generator | int) -> np.ndarray:
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases, unit BN scale."""
    rng = np.random.default_rng(rng)
    weights, biases, scales, shifts = [], [], [], []
    for fan_in, fan_out in config.layer_dims:
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if config.batchnorm_enabled:
        scales = [np.ones(h) for h in config.hidden_dims]
        shifts = [np.zeros(h) for h in config.hidden_dims]
    return _pack(weights, biases, scales, shifts)


def bias_indices(config: ModelConfig) -> np.ndarray:
    idx, pos = [], 0
    for fan_in, fan_out in config.layer_dims:
        pos += fan_in * fan_out
        idx.extend(range(pos, pos + fan_out))
        pos += fan_out
    return np.asarray(idx)


def forward(params: np.ndarray, config: ModelConfig, batch: Batch) -> np.ndarray:
    """Class probabilities, one row per example."""
    _check(params, config, batch)
    logits, _, _ = _forward(params, config, batch.inputs)
    return _softmax(logits)


def loss(params: np.ndarray, config: ModelConfig, batch: Batch) -> float:
    """Mean cross-entropy with probabilities floored at 1e-15."""
    _check(params, config, batch)
    logits, _, _ = _forward(params, config, batch.inputs)
    logp = _log_softmax(logits)[np.arange(len(batch)), batch.labels]
    return float(-np.maximum(logp, _LOG_FLOOR).mean())


def grad(params: np.ndarray, config: ModelConfig, batch: Batch) -> np.ndarray:
    _check(params, config, batch)
    return _backward(params, config, batch)


def hvp(params: np.ndarray, config: ModelConfig, batch: Batch, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product by pushing a tangent through ``grad``."""
    _check(params, config, batch)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.shape:
        raise ValueError("v must have the same length as params")
    return _backward(Dual(params, v), config, batch).t


class MLP:
    """Bundles a config with the functional API; what meta-learners consume."""

    def __init__(self, config: ModelConfig):
        self.config = config

    @property
    def num_params(self) -> int:
        return self.config.num_params

    def init(self, rng) -> np.ndarray:
        return init_params(self.config, rng)

    def forward(self, params, batch):
        return forward(params, self.config, batch)

    def loss(self, params, batch):
        return loss(params, self.config, batch)

    def grad(self, params, batch):
        return grad(params, self.config, batch)

    def hvp(self, params, batch, v):
        return hvp(params, self.config, batch, v)
