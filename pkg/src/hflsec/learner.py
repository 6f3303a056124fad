"""Small numpy classifier with exact backprop, SGD and Adam.

Parameters live in one flat float64 vector so they can be averaged, flipped
and shipped around the tree without knowing the layer structure. Layers are
applied to batches shaped (n, h, w, c); a ``Dense`` layer flattens whatever
it receives.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import ClientShard, Dataset


@dataclass(frozen=True)
class Conv:
    """k x k valid convolution, optionally followed by 2 x 2 max-pooling."""

    channels: int
    kernel: int = 3
    pool: bool = False


@dataclass(frozen=True)
class Dense:
    units: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    """Dense projection to ``classes`` logits followed by softmax."""

    classes: int


Layer = Union[Conv, Dense, ReLU, Softmax]


@dataclass(frozen=True)
class _Step:
    layer: Layer
    in_shape: tuple
    out_shape: tuple
    w_slice: slice | None = None
    w_shape: tuple = ()
    b_slice: slice | None = None


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.plan  # validates

    @cached_property
    def plan(self) -> tuple[_Step, ...]:
        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ValueError("the last layer must be Softmax")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (h, w, c), got {self.input_shape}")
        steps = []
        shape: tuple = self.input_shape
        offset = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise ValueError("Softmax is only allowed as the last layer")
            if isinstance(layer, ReLU):
                steps.append(_Step(layer, shape, shape))
                continue
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: Conv needs (h, w, c) input, got {shape}")
                h, w, c = shape
                k = layer.kernel
                oh, ow = h - k + 1, w - k + 1
                if layer.pool:
                    oh, ow = oh // 2, ow // 2
                if oh < 1 or ow < 1 or k < 1 or layer.channels < 1:
                    raise ValueError(f"layer {i}: Conv {layer} does not fit input {shape}")
                w_shape = (c * k * k, layer.channels)
                out: tuple = (oh, ow, layer.channels)
            elif isinstance(layer, (Dense, Softmax)):
                units = layer.units if isinstance(layer, Dense) else layer.classes
                if units < 1:
                    raise ValueError(f"layer {i}: {layer} needs a positive width")
                w_shape = (math.prod(shape), units)
                out = (units,)
            else:
                raise TypeError(f"unknown layer {layer!r}")
            nw = math.prod(w_shape)
            nb = w_shape[1]
            steps.append(
                _Step(
                    layer,
                    shape,
                    out,
                    slice(offset, offset + nw),
                    w_shape,
                    slice(offset + nw, offset + nw + nb),
                )
            )
            offset += nw + nb
            shape = out
        return tuple(steps)

    @cached_property
    def num_params(self) -> int:
        return max((s.b_slice.stop for s in self.plan if s.b_slice is not None), default=0)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].classes  # type: ignore[union-attr]

    def layout(self) -> list[dict]:
        """Name, shape and offset of every weight and bias block."""
        out = []
        for i, s in enumerate(self.plan):
            if s.w_slice is None:
                continue
            name = type(s.layer).__name__.lower()
            out.append({"name": f"{i}.{name}.weight", "shape": list(s.w_shape), "offset": s.w_slice.start})
            out.append({"name": f"{i}.{name}.bias", "shape": [s.w_shape[1]], "offset": s.b_slice.start})
        return out


def dense_spec(input_shape, num_classes: int, hidden: int = 32) -> ModelSpec:
    """Desk-scale default: flatten, dense(hidden), relu, softmax."""
    return ModelSpec(tuple(input_shape), (Dense(hidden), ReLU(), Softmax(num_classes)))


def mnist_cnn_spec(input_shape=(28, 28, 1), num_classes: int = 10) -> ModelSpec:
    return ModelSpec(
        tuple(input_shape),
        (Conv(32, 3, True), ReLU(), Conv(64, 3, True), ReLU(), Dense(512), ReLU(), Softmax(num_classes)),
    )


def cifar_cnn_spec(input_shape=(32, 32, 3), num_classes: int = 10) -> ModelSpec:
    return ModelSpec(
        tuple(input_shape),
        (
            Conv(32, 3), ReLU(), Conv(32, 3, True), ReLU(),
            Conv(64, 3), ReLU(), Conv(64, 3, True), ReLU(),
            Dense(512), ReLU(), Softmax(num_classes),
        ),
    )


def init_params(spec: ModelSpec, rng_seed: int) -> np.ndarray:
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases."""
    rng = np.random.default_rng(rng_seed)
    params = np.zeros(spec.num_params)
    for s in spec.plan:
        if s.w_slice is None:
            continue
        limit = math.sqrt(6.0 / s.w_shape[0])
        params[s.w_slice] = rng.uniform(-limit, limit, size=math.prod(s.w_shape))
    return params


def _as_batch(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == spec.input_shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {spec.input_shape}")


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    caches = []
    a = x
    n = len(x)
    for s in spec.plan:
        layer = s.layer
        if isinstance(layer, ReLU):
            mask = a > 0
            caches.append(mask)
            a = a * mask
        elif isinstance(layer, Conv):
            k = layer.kernel
            h, w, c = s.in_shape
            oh, ow = h - k + 1, w - k + 1
            cols = sliding_window_view(a, (k, k), axis=(1, 2)).reshape(n * oh * ow, c * k * k)
            W = params[s.w_slice].reshape(s.w_shape)
            z = (cols @ W + params[s.b_slice]).reshape(n, oh, ow, layer.channels)
            arg = None
            if layer.pool:
                ph, pw = oh // 2, ow // 2
                blocks = (
                    z[:, : 2 * ph, : 2 * pw]
                    .reshape(n, ph, 2, pw, 2, layer.channels)
                    .transpose(0, 1, 3, 5, 2, 4)
                    .reshape(n, ph, pw, layer.channels, 4)
                )
                arg = blocks.argmax(axis=-1)
                z = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
            caches.append((cols, arg))
            a = z
        else:
            flat = a.reshape(n, -1)
            caches.append(flat)
            a = flat @ params[s.w_slice].reshape(s.w_shape) + params[s.b_slice]
    return a, caches


def _backward(spec: ModelSpec, params, caches, dlogits, want_params=True, want_input=False):
    grad = np.zeros(spec.num_params) if want_params else None
    d = dlogits
    n = len(dlogits)
    for depth in range(len(spec.plan) - 1, -1, -1):
        s = spec.plan[depth]
        cache = caches[depth]
        layer = s.layer
        need_dx = want_input or depth > 0
        if isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, Conv):
            cols, arg = cache
            k = layer.kernel
            h, w, c = s.in_shape
            ch = layer.channels
            oh, ow = h - k + 1, w - k + 1
            if layer.pool:
                ph, pw = oh // 2, ow // 2
                routed = np.zeros((n, ph, pw, ch, 4))
                np.put_along_axis(routed, arg[..., None], d[..., None], axis=-1)
                dz = np.zeros((n, oh, ow, ch))
                dz[:, : 2 * ph, : 2 * pw] = (
                    routed.reshape(n, ph, pw, ch, 2, 2)
                    .transpose(0, 1, 4, 2, 5, 3)
                    .reshape(n, 2 * ph, 2 * pw, ch)
                )
            else:
                dz = d
            dz2 = dz.reshape(-1, ch)
            W = params[s.w_slice].reshape(s.w_shape)
            if want_params:
                grad[s.w_slice] = (cols.T @ dz2).ravel()
                grad[s.b_slice] = dz2.sum(axis=0)
            if need_dx:
                dcols = (dz2 @ W.T).reshape(n, oh, ow, c, k, k)
                dx = np.zeros((n, h, w, c))
                for i in range(k):
                    for j in range(k):
                        dx[:, i : i + oh, j : j + ow, :] += dcols[..., i, j]
                d = dx
        else:
            W = params[s.w_slice].reshape(s.w_shape)
            if want_params:
                grad[s.w_slice] = (cache.T @ d).ravel()
                grad[s.b_slice] = d.sum(axis=0)
            if need_dx:
                d = (d @ W.T).reshape((n,) + tuple(s.in_shape))
    return grad, (d if want_input else None)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def _labels(y, n: int, k: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape == (1,) and n > 1:
        y = np.repeat(y, n)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def _check_params(spec: ModelSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise ValueError(f"expected {spec.num_params} parameters, got shape {params.shape}")
    return params


def forward(spec: ModelSpec, params, x) -> np.ndarray:
    """Class probabilities for one image (h, w, c) or a batch (n, h, w, c)."""
    params = _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    z, _ = _forward(spec, params, xb)
    p = _softmax(z)
    return p[0] if single else p


def loss_and_param_grad(spec: ModelSpec, params, x, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact parameter gradient."""
    params = _check_params(spec, params)
    xb, _ = _as_batch(spec, x)
    if len(xb) == 0:
        raise ValueError("empty batch")
    yb = _labels(y, len(xb), spec.num_classes)
    z, caches = _forward(spec, params, xb)
    n = len(xb)
    p = _softmax(z)
    d = p
    d[np.arange(n), yb] -= 1.0
    grad, _ = _backward(spec, params, caches, d / n)
    return float(_cross_entropy(z, yb).mean()), grad


def input_grad(spec: ModelSpec, params, x, y) -> np.ndarray:
    """Gradient of each example's own cross-entropy w.r.t. its pixels."""
    params = _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    yb = _labels(y, len(xb), spec.num_classes)
    z, caches = _forward(spec, params, xb)
    d = _softmax(z)
    d[np.arange(len(xb)), yb] -= 1.0
    _, dx = _backward(spec, params, caches, d, want_params=False, want_input=True)
    return dx[0] if single else dx


class Classifier:
    """A model plus fixed weights; the white-box handle given to attacks."""

    def __init__(self, spec: ModelSpec, params):
        self.spec = spec
        self.params = _check_params(spec, params)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.spec.input_shape

    def predict_proba(self, x) -> np.ndarray:
        return forward(self.spec, self.params, x)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.predict_proba(x)), axis=1)

    def loss(self, x, y) -> np.ndarray:
        """Per-example cross-entropy."""
        xb, _ = _as_batch(self.spec, x)
        z, _ = _forward(self.spec, self.params, xb)
        return _cross_entropy(z, _labels(y, len(xb), self.num_classes))

    def input_grad(self, x, y) -> np.ndarray:
        return input_grad(self.spec, self.params, x, y)

    def prob_jacobian(self, x) -> np.ndarray:
        """d prob_k / d x for a batch, shaped (n, K, h, w, c)."""
        xb, _ = _as_batch(self.spec, x)
        z, caches = _forward(self.spec, self.params, xb)
        p = _softmax(z)
        K = self.num_classes
        out = np.empty((len(xb), K) + self.spec.input_shape)
        for k in range(K):
            d = -p * p[:, k : k + 1]
            d[:, k] += p[:, k]
            _, dx = _backward(self.spec, self.params, caches, d, want_params=False, want_input=True)
            out[:, k] = dx
        return out

    def forward_only(self) -> "ForwardModel":
        return ForwardModel(self.predict_proba, self.num_classes, self.input_shape)


class ForwardModel:
    """Query-only model handle; exposes probabilities and nothing else."""

    __slots__ = ("_query", "num_classes", "input_shape", "queries")

    def __init__(self, query: Callable[[np.ndarray], np.ndarray], num_classes: int, input_shape):
        self._query = query
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.queries = 0

    def predict_proba(self, x) -> np.ndarray:
        self.queries += 1
        return self._query(x)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.predict_proba(x)), axis=1)

    def loss(self, x, y) -> np.ndarray:
        p = np.atleast_2d(self.predict_proba(x))
        y = _labels(y, len(p), self.num_classes)
        return -np.log(np.maximum(p[np.arange(len(p)), y], 1e-300))


def as_forward_model(model) -> ForwardModel:
    if isinstance(model, ForwardModel):
        return model
    return model.forward_only()


@dataclass(frozen=True)
class TrainingHyper:
    batch_size: int = 32
    epochs: int = 1
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(params, grad, hyper: TrainingHyper, state: AdamState | None = None):
    """One update; returns new ``(params, state)`` without touching the inputs."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"params {params.shape} and grad {grad.shape} differ in length")
    lr = hyper.learning_rate
    if hyper.optimizer == "sgd":
        return params - lr * grad, state
    if state is None:
        state = AdamState.zeros(len(params))
    if state.m.shape != params.shape:
        raise ValueError("Adam state length does not match params")
    t = state.t + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + hyper.eps), AdamState(m, v, t)


BatchTransform = Callable[[ModelSpec, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def client_update(
    spec: ModelSpec,
    params_in,
    shard: Dataset | ClientShard,
    hyper: TrainingHyper,
    rng_seed,
    batch_transform: BatchTransform | None = None,
) -> np.ndarray:
    """Local training: ``hyper.epochs`` shuffled passes of minibatch steps.

    Optimizer state starts fresh on every call. ``batch_transform`` may
    rewrite each minibatch's pixels given the current weights.
    """
    data = shard.data if isinstance(shard, ClientShard) else shard
    if len(data) == 0:
        raise ValueError("cannot train on an empty shard")
    params = _check_params(spec, params_in).copy()
    rng = np.random.default_rng(rng_seed)
    state = None
    n = len(data)
    B = hyper.batch_size
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, B):
            idx = order[start : start + B]
            xb, yb = data.x[idx], data.y[idx]
            if batch_transform is not None:
                xb = batch_transform(spec, params, xb, yb)
            _, grad = loss_and_param_grad(spec, params, xb, yb)
            params, state = optimizer_step(params, grad, hyper, state)
    return params


CHECKPOINT_MAGIC = b"HFLP"


def save_params(path, spec: ModelSpec, params) -> None:
    """Magic, u32 header length, JSON layout header, little-endian float64 values."""
    params = _check_params(spec, params)
    header = json.dumps(
        {"input_shape": list(spec.input_shape), "num_params": spec.num_params, "layout": spec.layout()},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
        f.write(params.astype("<f8").tobytes())


def load_params(path) -> tuple[dict, np.ndarray]:
    raw = open(path, "rb").read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n])
    values = np.frombuffer(raw[8 + n :], dtype="<f8").astype(np.float64)
    if len(values) != header["num_params"]:
        raise ValueError(f"{path}: expected {header['num_params']} values, found {len(values)}")
    return header, values
