"""Layers, parameters, cross-entropy and the optimizer steps.

Everything is float64. Dense weights are stored ``(in, out)`` and applied as
``x @ W + b``; conv weights are ``(out_c, in_c, k, k)`` with no padding.
Only dense and conv2d layers carry parameters; the parameter layer index
``l`` counts those layers alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from forgetd import kernels
from forgetd.errors import ConfigError, InputError, UsageError

KINDS = ("dense", "conv2d", "maxpool2d", "relu", "flatten")
PARAM_KINDS = ("dense", "conv2d")
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        want = {"dense": 2, "conv2d": 4, "maxpool2d": 1, "relu": 0, "flatten": 0}[self.kind]
        if len(self.dims) != want or any(int(d) < 1 for d in self.dims):
            raise ConfigError(f"{self.kind} needs {want} positive dims, got {self.dims}")

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def __str__(self):
        if self.kind == "dense":
            return f"dense {self.dims[0]}->{self.dims[1]}"
        if self.kind == "conv2d":
            return "conv2d {}->{} k{} s{}".format(*self.dims)
        if self.kind == "maxpool2d":
            return f"maxpool2d {self.dims[0]}"
        return self.kind


def dense(n_in, n_out):
    return LayerSpec("dense", (n_in, n_out))


def conv2d(in_channels, out_channels, kernel, stride=1):
    return LayerSpec("conv2d", (in_channels, out_channels, kernel, stride))


def maxpool2d(window):
    return LayerSpec("maxpool2d", (window,))


def relu():
    return LayerSpec("relu")


def flatten():
    return LayerSpec("flatten")


def _out_shape(spec: LayerSpec, shape: tuple[int, ...]):
    """Per-sample output shape, or ``None`` if ``shape`` is not accepted."""
    k = spec.kind
    if k == "dense":
        return (spec.dims[1],) if shape == (spec.dims[0],) else None
    if k == "conv2d":
        ci, co, ker, s = spec.dims
        if len(shape) != 3 or shape[0] != ci or shape[1] < ker or shape[2] < ker:
            return None
        return (co, (shape[1] - ker) // s + 1, (shape[2] - ker) // s + 1)
    if k == "maxpool2d":
        w = spec.dims[0]
        if len(shape) != 3 or shape[1] < w or shape[2] < w:
            return None
        return (shape[0], shape[1] // w, shape[2] // w)
    if k == "flatten":
        return (int(np.prod(shape)),)
    return shape


def _expected_in(spec: LayerSpec):
    if spec.kind == "dense":
        return spec.dims[0]
    if spec.kind == "conv2d":
        return spec.dims[0]
    return None


@dataclass(frozen=True)
class Arch:
    """Input shape (per sample) plus the ordered layer list."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("architecture has no layers")
        self.shapes()
        last = self.layers[-1]
        if last.kind != "dense":
            raise ConfigError(f"architecture must end in a dense layer, ends in {last}")

    @classmethod
    def of(cls, layers: Sequence[LayerSpec], input_shape=None) -> "Arch":
        """Build from a bare layer list; a leading dense layer fixes the input shape."""
        layers = tuple(layers)
        if input_shape is None:
            if not layers or layers[0].kind != "dense":
                raise ConfigError("input_shape is required unless the first layer is dense")
            input_shape = (layers[0].dims[0],)
        return cls(tuple(input_shape), layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shapes: input, then the output of every layer."""
        out = [self.input_shape]
        for i, spec in enumerate(self.layers):
            nxt = _out_shape(spec, out[-1])
            if nxt is None:
                got = out[-1][0] if len(out[-1]) in (1, 3) else out[-1]
                want = _expected_in(spec)
                where = f"layer {i - 1} ({self.layers[i - 1]})" if i else "input"
                raise ConfigError(
                    f"shape mismatch {got} vs {want}: {where} produces {out[-1]}, "
                    f"layer {i} ({spec}) cannot accept it"
                )
            out.append(nxt)
        return out

    @property
    def n_classes(self) -> int:
        return self.layers[-1].dims[1]

    @property
    def param_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.has_params]

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        shapes = []
        for s in self.param_layers:
            if s.kind == "dense":
                shapes.append(((s.dims[0], s.dims[1]), (s.dims[1],)))
            else:
                ci, co, k, _ = s.dims
                shapes.append(((co, ci, k, k), (co,)))
        return shapes

    def layer_sizes(self) -> list[int]:
        """Flattened parameter count (weights + biases) per parameter layer."""
        return [int(np.prod(w)) + int(np.prod(b)) for w, b in self.param_shapes()]


def mlp(input_shape=(1, 28, 28), hidden=500, n_classes=10) -> Arch:
    """Two fully connected layers (784-500-10 on MNIST)."""
    n_in = int(np.prod(input_shape))
    return Arch(input_shape, (flatten(), dense(n_in, hidden), relu(), dense(hidden, n_classes)))


def convnet(input_shape=(1, 28, 28), n_classes=10) -> Arch:
    """LeNet-style network: two conv+pool stages and three dense layers."""
    c = input_shape[0]
    layers = [conv2d(c, 6, 5), relu(), maxpool2d(2), conv2d(6, 16, 5), relu(), maxpool2d(2), flatten()]
    shp = tuple(input_shape)
    for spec in layers:
        shp = _out_shape(spec, shp)
        if shp is None:
            raise ConfigError(f"input {input_shape} too small for the convnet")
    layers += [dense(shp[0], 120), relu(), dense(120, 84), relu(), dense(84, n_classes)]
    return Arch(input_shape, tuple(layers))


ARCHITECTURES = {"mlp": mlp, "convnet": convnet}


@dataclass(eq=False)
class ModelParams:
    """Per-layer ``(weights, biases)`` for the parameterized layers of ``arch``."""

    arch: Arch
    layers: list = field(default_factory=list)

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if len(shapes) != len(self.layers):
            raise UsageError(f"expected {len(shapes)} parameter layers, got {len(self.layers)}")
        fixed = []
        for l, ((ws, bs), (w, b)) in enumerate(zip(shapes, self.layers)):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != ws or b.shape != bs:
                raise UsageError(f"layer {l}: shapes {w.shape}/{b.shape} do not match {ws}/{bs}")
            fixed.append((w, b))
        self.layers = fixed

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self) -> "ModelParams":
        return zeros(self.arch)

    def flat(self) -> list[np.ndarray]:
        """One flattened vector per layer: weights (row-major) then biases."""
        return [np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers]

    @classmethod
    def from_flat(cls, arch: Arch, flats: Sequence[np.ndarray]) -> "ModelParams":
        layers = []
        for (ws, bs), v in zip(arch.param_shapes(), flats):
            nw = int(np.prod(ws))
            v = np.asarray(v, dtype=np.float64)
            if v.size != nw + int(np.prod(bs)):
                raise UsageError(f"flat layer of size {v.size} does not fit {ws} + {bs}")
            layers.append((v[:nw].reshape(ws).copy(), v[nw:].copy()))
        return cls(arch, layers)

    def bitwise_equal(self, other: "ModelParams") -> bool:
        if self.arch != other.arch:
            return False
        return all(
            w1.tobytes() == w2.tobytes() and b1.tobytes() == b2.tobytes()
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    def max_abs_diff(self, other: "ModelParams") -> float:
        _check_same(self, other)
        return max(
            max(np.max(np.abs(w1 - w2), initial=0.0), np.max(np.abs(b1 - b2), initial=0.0))
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    @property
    def n_params(self) -> int:
        return sum(self.arch.layer_sizes())


def zeros(arch: Arch) -> ModelParams:
    return ModelParams(arch, [(np.zeros(ws), np.zeros(bs)) for ws, bs in arch.param_shapes()])


def _check_same(a: ModelParams, b: ModelParams):
    if a.arch != b.arch:
        raise UsageError("parameter sets come from different architectures")


def build_model(arch, seed: int) -> ModelParams:
    """Uniform fan-based init, ``s = sqrt(6 / (fan_in + fan_out))``; zero biases."""
    if not isinstance(arch, Arch):
        arch = Arch.of(arch)
    rng = np.random.default_rng(seed)
    layers = []
    for spec, (ws, bs) in zip(arch.param_layers, arch.param_shapes()):
        if spec.kind == "dense":
            fan_in, fan_out = spec.dims
        else:
            ci, co, k, _ = spec.dims
            fan_in, fan_out = ci * k * k, co * k * k
        s = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-s, s, size=ws), np.zeros(bs)))
    return ModelParams(arch, layers)


def _check_input(arch: Arch, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or tuple(x.shape[1:]) != arch.input_shape:
        raise InputError(f"input shape {x.shape} does not match batch x {arch.input_shape}")
    return x


def _forward(params: ModelParams, x: np.ndarray, keep: bool):
    cache = []
    pi = 0
    h = x
    for spec in params.arch.layers:
        k = spec.kind
        if k == "dense":
            w, b = params.layers[pi]
            pi += 1
            out = h @ w + b
            entry = h
        elif k == "conv2d":
            w, b = params.layers[pi]
            pi += 1
            out = kernels.conv2d_forward(h, w, b, spec.dims[3])
            entry = h
        elif k == "relu":
            out = np.maximum(h, 0.0)
            entry = h > 0
        elif k == "maxpool2d":
            out, arg = kernels.maxpool2d_forward(h, spec.dims[0])
            entry = (arg, h.shape)
        else:  # flatten
            out = h.reshape(h.shape[0], -1)
            entry = h.shape
        if keep:
            cache.append(entry)
        h = out
    return h, cache


def forward(params: ModelParams, batch_inputs) -> np.ndarray:
    """Logits, shape ``(batch, C)``."""
    x = _check_input(params.arch, batch_inputs)
    logits, _ = _forward(params, x, keep=False)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_one_hot(y: np.ndarray, n: int, c: int):
    if y.shape != (n, c):
        raise InputError(f"labels shape {y.shape} does not match ({n}, {c})")
    ok = np.all((y == 0.0) | (y == 1.0), axis=1) & (y.sum(axis=1) == 1.0)
    if not ok.all():
        row = int(np.flatnonzero(~ok)[0])
        raise InputError(f"label row {row} is not one-hot: {y[row].tolist()}")


def cross_entropy(probs: np.ndarray, y: np.ndarray) -> float:
    return float(-np.sum(y * np.log(np.maximum(probs, LOG_FLOOR))) / probs.shape[0])


def loss_and_grads(params: ModelParams, batch) -> tuple[float, ModelParams]:
    """Mean cross-entropy over the batch and its gradient by backpropagation."""
    inputs, labels = batch
    x = _check_input(params.arch, inputs)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    y = np.asarray(labels, dtype=np.float64)
    _check_one_hot(y, x.shape[0], params.arch.n_classes)

    logits, cache = _forward(params, x, keep=True)
    probs = softmax(logits)
    loss = cross_entropy(probs, y)

    grads = [None] * len(params.layers)
    pi = len(params.layers)
    g = (probs - y) / x.shape[0]
    for spec, entry in zip(reversed(params.arch.layers), reversed(cache)):
        k = spec.kind
        if k == "dense":
            pi -= 1
            w, _ = params.layers[pi]
            grads[pi] = (entry.T @ g, g.sum(axis=0))
            g = g @ w.T
        elif k == "conv2d":
            pi -= 1
            w, _ = params.layers[pi]
            dx, dw, db = kernels.conv2d_backward(entry, w, g, spec.dims[3])
            grads[pi] = (dw, db)
            g = dx
        elif k == "relu":
            g = g * entry
        elif k == "maxpool2d":
            arg, shape = entry
            g = kernels.maxpool2d_backward(g, arg, shape, spec.dims[0])
        else:
            g = g.reshape(entry)
    return loss, ModelParams(params.arch, grads)


def _apply(params: ModelParams, step_layers) -> tuple[ModelParams, ModelParams]:
    # delta is the float difference post - pre; new = pre + delta exactly, so
    # replaying deltas reproduces the trajectory bit for bit
    new_layers, deltas = [], []
    for (w, b), (sw, sb) in zip(params.layers, step_layers):
        dw = (w - sw) - w
        db = (b - sb) - b
        deltas.append((dw, db))
        new_layers.append((w + dw, b + db))
    return ModelParams(params.arch, new_layers), ModelParams(params.arch, deltas)


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> tuple[ModelParams, ModelParams]:
    """Plain gradient step. Returns ``(new_params, delta)``."""
    if not lr >= 0:
        raise UsageError(f"learning rate must be non-negative, got {lr}")
    _check_same(params, grads)
    return _apply(params, [(lr * gw, lr * gb) for gw, gb in grads.layers])


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **kw) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), **kw)


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float):
    """Adam update (bias-corrected); mutates ``state``. Returns ``(new_params, delta)``."""
    _check_same(params, grads)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    steps, ms, vs = [], [], []
    for (gw, gb), (mw, mb), (vw, vb) in zip(grads.layers, state.m.layers, state.v.layers):
        pair = []
        for g, m, v in ((gw, mw, vw), (gb, mb, vb)):
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            pair.append((m, v, lr * (m / c1) / (np.sqrt(v / c2) + state.eps)))
        (mw, vw, sw), (mb, vb, sb) = pair
        ms.append((mw, mb))
        vs.append((vw, vb))
        steps.append((sw, sb))
    state.m = ModelParams(params.arch, ms)
    state.v = ModelParams(params.arch, vs)
    return _apply(params, steps)


def param_axpy(dst: ModelParams, sign: int, src: ModelParams) -> ModelParams:
    """``dst + sign * src`` with ``sign`` in {+1, -1}."""
    if sign not in (1, -1):
        raise UsageError(f"sign must be +1 or -1, got {sign}")
    _check_same(dst, src)
    if sign == 1:
        layers = [(w + sw, b + sb) for (w, b), (sw, sb) in zip(dst.layers, src.layers)]
    else:
        layers = [(w - sw, b - sb) for (w, b), (sw, sb) in zip(dst.layers, src.layers)]
    return ModelParams(dst.arch, layers)


def predict(params: ModelParams, inputs, chunk: int = 1024) -> np.ndarray:
    """Argmax class per sample (ties go to the lower class index)."""
    x = _check_input(params.arch, inputs)
    out = np.empty(x.shape[0], dtype=np.int64)
    for s in range(0, x.shape[0], chunk):
        out[s:s + chunk] = np.argmax(forward(params, x[s:s + chunk]), axis=1)
    return out
