"""Small deterministic neural-network engine.

Networks are fixed sequential stacks of layers operating on float64 numpy
arrays with a leading batch dimension. ``Network.forward`` returns the output
together with the per-layer caches that ``Network.backward`` consumes, so the
same network can be evaluated several times before any backward pass (this is
what the planner relies on for backprop through time).

Images use NHWC layout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np

from . import kernels

CHECKPOINT_VERSION = 1

ACTIVATIONS = ("relu", "tanh", "linear")
LAYER_KINDS = ("dense", "conv2d", "activation", "meanpool", "upsample", "reshape")


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``units`` is the dense output width or the conv filter count. ``size`` is
    the conv kernel size or the pooling/upsampling factor. ``shape`` is the
    per-sample target shape of a reshape layer.
    """

    kind: str
    units: int = 0
    size: int = 0
    padding: bool = True
    activation: str = "linear"
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "activation" and self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def dense(units):
    return LayerSpec("dense", units=units)


def conv2d(filters, kernel=3, padding=True):
    return LayerSpec("conv2d", units=filters, size=kernel, padding=padding)


def activation(kind):
    return LayerSpec("activation", activation=kind)


def meanpool(factor=2):
    return LayerSpec("meanpool", size=factor)


def upsample(factor=2):
    return LayerSpec("upsample", size=factor)


def reshape(*shape):
    return LayerSpec("reshape", shape=tuple(shape))


# --------------------------------------------------------------------------
# layers


class Layer:
    """Base class. Subclasses set ``in_shape``/``out_shape`` (per sample)."""

    param_names: tuple[str, ...] = ()

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...], index: int):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.index = index
        self.params: list[np.ndarray] = []
        self.out_shape = self.in_shape

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}#{self.index}{self.in_shape}->{self.out_shape}"


class Dense(Layer):
    param_names = ("W", "b")

    def __init__(self, spec, in_shape, index):
        super().__init__(spec, in_shape, index)
        if len(in_shape) != 1:
            raise ShapeError(f"layer {index} (dense) needs flat input, got {in_shape}")
        self.out_shape = (spec.units,)

    def init_params(self, rng):
        fan_in = self.in_shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_in, self.spec.units))
        self.params = [W, np.zeros(self.spec.units)]

    def forward(self, x):
        W, b = self.params
        return x @ W + b, x

    def backward(self, x, gy, need_gx=True):
        W, _ = self.params
        return (gy @ W.T if need_gx else None), [x.T @ gy, gy.sum(axis=0)]


class Conv2D(Layer):
    param_names = ("W", "b")

    def __init__(self, spec, in_shape, index):
        super().__init__(spec, in_shape, index)
        if len(in_shape) != 3:
            raise ShapeError(f"layer {index} (conv2d) needs HWC input, got {in_shape}")
        h, w, _ = in_shape
        k = spec.size
        if k < 1:
            raise ValueError(f"layer {index} (conv2d) kernel size must be >= 1")
        if spec.padding:
            self.pad = ((k - 1) // 2, k // 2)
            self.out_shape = (h, w, spec.units)
        else:
            self.pad = (0, 0)
            if h < k or w < k:
                raise ShapeError(f"layer {index} (conv2d) kernel {k} larger than input {in_shape}")
            self.out_shape = (h - k + 1, w - k + 1, spec.units)

    def init_params(self, rng):
        k, c, f = self.spec.size, self.in_shape[2], self.spec.units
        bound = 1.0 / np.sqrt(k * k * c)
        self.params = [rng.uniform(-bound, bound, size=(k, k, c, f)), np.zeros(f)]

    def _padded(self, x):
        lo, hi = self.pad
        if lo == 0 and hi == 0:
            return np.ascontiguousarray(x)
        n, h, w, c = x.shape
        xp = np.zeros((n, h + lo + hi, w + lo + hi, c))
        xp[:, lo:lo + h, lo:lo + w] = x
        return xp

    def forward(self, x):
        W, b = self.params
        xp = self._padded(x)
        return kernels.conv2d_forward(xp, W, b), xp

    def backward(self, xp, gy, need_gx=True):
        W, _ = self.params
        gxp, gW, gb = kernels.conv2d_backward(xp, W, np.ascontiguousarray(gy), need_gx)
        if gxp is None:
            return None, [gW, gb]
        lo, hi = self.pad
        h, w = gxp.shape[1] - lo - hi, gxp.shape[2] - lo - hi
        return gxp[:, lo:lo + h, lo:lo + w, :], [gW, gb]


class Activation(Layer):
    def forward(self, x):
        kind = self.spec.activation
        if kind == "relu":
            y = np.maximum(x, 0.0)
            return y, x > 0
        if kind == "tanh":
            y = np.tanh(x)
            return y, y
        return x, None

    def backward(self, cache, gy):
        kind = self.spec.activation
        if kind == "relu":
            return gy * cache, []
        if kind == "tanh":
            return gy * (1.0 - cache * cache), []
        return gy, []


class MeanPool(Layer):
    def __init__(self, spec, in_shape, index):
        super().__init__(spec, in_shape, index)
        h, w, c = in_shape
        k = spec.size
        if h % k or w % k:
            raise ShapeError(f"layer {index} (meanpool {k}) does not divide {in_shape}")
        self.out_shape = (h // k, w // k, c)

    def forward(self, x):
        # strided slice sums are much faster than a multi-axis mean
        k = self.spec.size
        y = x[:, 0::k, 0::k].copy()
        for di in range(k):
            for dj in range(k):
                if di or dj:
                    y += x[:, di::k, dj::k]
        y *= 1.0 / (k * k)
        return y, None

    def backward(self, cache, gy):
        return _spread(gy * (1.0 / (self.spec.size ** 2)), self.spec.size), []


def _spread(x, k):
    """Nearest-neighbour upsampling by ``k`` along both spatial axes."""
    n, h, w, c = x.shape
    out = np.empty((n, h, k, w, k, c))
    out[...] = x[:, :, None, :, None, :]
    return out.reshape(n, h * k, w * k, c)


class Upsample(Layer):
    def __init__(self, spec, in_shape, index):
        super().__init__(spec, in_shape, index)
        h, w, c = in_shape
        self.out_shape = (h * spec.size, w * spec.size, c)

    def forward(self, x):
        return _spread(x, self.spec.size), None

    def backward(self, cache, gy):
        k = self.spec.size
        g = gy[:, 0::k, 0::k].copy()
        for di in range(k):
            for dj in range(k):
                if di or dj:
                    g += gy[:, di::k, dj::k]
        return g, []


class Reshape(Layer):
    def __init__(self, spec, in_shape, index):
        super().__init__(spec, in_shape, index)
        if int(np.prod(spec.shape)) != int(np.prod(in_shape)):
            raise ShapeError(f"layer {index} (reshape) cannot map {in_shape} to {spec.shape}")
        self.out_shape = tuple(spec.shape)

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.out_shape), None

    def backward(self, cache, gy):
        return gy.reshape((gy.shape[0],) + self.in_shape), []


_LAYER_TYPES = {
    "dense": Dense,
    "conv2d": Conv2D,
    "activation": Activation,
    "meanpool": MeanPool,
    "upsample": Upsample,
    "reshape": Reshape,
}


# --------------------------------------------------------------------------
# networks


class Network:
    """A sequential stack of layers with seeded uniform fan-in initialization."""

    def __init__(self, input_shape: Sequence[int], specs: Sequence[LayerSpec], seed: int = 0):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.specs = list(specs)
        self.seed = int(seed)
        self.layers: list[Layer] = []
        shape = self.input_shape
        rng = np.random.default_rng(self.seed)
        for i, spec in enumerate(self.specs):
            layer = _LAYER_TYPES[spec.kind](spec, shape, i)
            layer.init_params(rng)
            self.layers.append(layer)
            shape = layer.out_shape
        self.output_shape = shape

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def param_names(self) -> list[str]:
        return [f"{layer.index}.{name}" for layer in self.layers for name in layer.param_names]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            first = self.layers[0] if self.layers else "input"
            raise ShapeError(
                f"{first!r}: expected input (*, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, caches, gy, input_grad=True):
        """Return ``(param_grads, grad_input)``; grads follow ``self.params`` order.

        With ``input_grad=False`` the input gradient is skipped (returned as
        None), which avoids the most expensive step for image encoders.
        """
        if caches is None or len(caches) != len(self.layers):
            raise RuntimeError("backward called without a matching forward pass")
        gy = np.asarray(gy, dtype=np.float64)
        if gy.shape[1:] != self.output_shape:
            raise ShapeError(f"grad_output shape {gy.shape} does not match output {self.output_shape}")
        stop = 0
        if not input_grad:
            stop = next((i for i, layer in enumerate(self.layers) if layer.params), len(self.layers))
        grads_rev = []
        for i in range(len(self.layers) - 1, stop - 1, -1):
            layer = self.layers[i]
            if i == stop and not input_grad:
                gy, g = layer.backward(caches[i], gy, need_gx=False) if layer.params else (None, [])
            else:
                gy, g = layer.backward(caches[i], gy)
            grads_rev.append(g)
        grads = [g for layer_grads in reversed(grads_rev) for g in layer_grads]
        return grads, gy

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.input_shape = self.input_shape
        other.specs = list(self.specs)
        other.seed = self.seed
        other.output_shape = self.output_shape
        other.layers = []
        for layer in self.layers:
            clone = type(layer).__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.params = [p.copy() for p in layer.params]
            other.layers.append(clone)
        return other

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        params = self.params
        if len(values) != len(params):
            raise ShapeError("parameter count mismatch")
        for p, v in zip(params, values):
            if p.shape != np.shape(v):
                raise ShapeError(f"parameter shape {np.shape(v)} != {p.shape}")
            p[...] = v

    def spec_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{**asdict(s), "shape": list(s.shape)} for s in self.specs],
        }

    @classmethod
    def from_spec_dict(cls, d: dict, seed: int = 0) -> "Network":
        specs = [LayerSpec(**{**s, "shape": tuple(s.get("shape", ()))}) for s in d["layers"]]
        return cls(d["input_shape"], specs, seed=seed)


def soft_update(target: Network, source: Network, tau: float) -> None:
    for pt, ps in zip(target.params, source.params):
        pt *= 1.0 - tau
        pt += tau * ps


# --------------------------------------------------------------------------
# losses and optimizers


def mse(pred, target):
    """Mean squared error over all elements and its gradient wrt ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    flat = diff.reshape(-1)
    loss = float(np.dot(flat, flat) / n)
    diff *= 2.0 / n
    return loss, diff


def check_finite(grads, what="gradient"):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite {what} encountered")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    check_finite(grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam bound to a fixed list of parameter arrays."""

    def __init__(self, params, lr=1e-3, **kw):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.like(self.params, **kw)

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr)


# --------------------------------------------------------------------------
# gradient verification


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def finite_diff_check(net: Network, x, epsilon: float = 1e-5, seed: int = 0, backward=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar checked is ``sum(net(x) * R)`` for a fixed random projection
    ``R``. Every parameter entry and every input entry is perturbed.
    ``backward`` may replace ``net.backward`` (used to test the checker).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.array(x, dtype=np.float64)
    y, caches = net.forward(x)
    proj = np.random.default_rng(seed).standard_normal(y.shape)
    grads, gx = (backward or net.backward)(caches, proj)

    def objective():
        return float(np.sum(net(x) * proj))

    worst = 0.0
    for p, g in list(zip(net.params, grads)) + [(x, gx)]:
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = objective()
            flat[i] = orig - epsilon
            fm = objective()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * epsilon)
            worst = max(worst, float(relative_error(gflat[i], cd)))
    return worst


def numeric_grad(f, arrays, epsilon=1e-5):
    """Central-difference gradient of scalar ``f()`` wrt each array (mutated in place)."""
    out = []
    for a in arrays:
        flat = a.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f()
            flat[i] = orig - epsilon
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * epsilon)
        out.append(g.reshape(a.shape))
    return out


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "spec": net.spec_dict(),
        "seed": net.seed,
        "params": [
            {"name": name, "shape": list(p.shape), "data": p.reshape(-1).tolist()}
            for name, p in zip(net.param_names, net.params)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Network:
    with open(path) as fh:
        doc: dict[str, Any] = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {doc.get('version')!r} != {CHECKPOINT_VERSION}")
    net = Network.from_spec_dict(doc["spec"], seed=doc["seed"])
    names = net.param_names
    if [p["name"] for p in doc["params"]] != names:
        raise ValueError("checkpoint parameter names do not match the network spec")
    net.set_params([np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for p in doc["params"]])
    return net
