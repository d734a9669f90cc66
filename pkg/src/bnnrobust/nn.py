"""Small deterministic ReLU network engine on top of numpy.

Networks are described by an :class:`Architecture` (input shape plus a list of
layer specs) and carry one flat float64 weight vector.  Parameters of each
layer are laid out contiguously in that vector, in layer order:

* ``Dense(in, out)``: weight matrix of shape ``(out, in)`` row-major, then the
  ``out`` biases.
* ``Conv2D(filters, kh, kw, stride)``: kernel of shape
  ``(filters, in_channels, kh, kw)`` row-major, then ``filters`` biases.

Inputs are plain numpy arrays: ``(features,)`` for dense nets and
``(channels, height, width)`` for nets starting with a convolution.  Batched
internals prepend a batch axis.  Convolutions use valid padding.  The ReLU
derivative at exactly zero is taken to be 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a layer cannot accept the shape produced by its predecessor."""


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    filters: int
    kernel_h: int
    kernel_w: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2D, ReLU, Flatten]


@dataclass(frozen=True)
class Architecture:
    """Validated layer stack.

    ``shapes[i]`` is the input shape of layer ``i``; ``shapes[-1]`` the output
    shape, which must be one-dimensional (the logits).
    """

    input_shape: tuple
    layers: tuple
    shapes: tuple = field(init=False, repr=False)
    param_counts: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [self.input_shape]
        counts = []
        for i, layer in enumerate(self.layers):
            shape = shapes[-1]
            if isinstance(layer, Dense):
                if shape != (layer.in_features,):
                    raise ShapeError(f"layer {i}: Dense expects ({layer.in_features},), got {shape}")
                shapes.append((layer.out_features,))
                counts.append(layer.in_features * layer.out_features + layer.out_features)
            elif isinstance(layer, Conv2D):
                if len(shape) != 3:
                    raise ShapeError(f"layer {i}: Conv2D expects (C, H, W), got {shape}")
                c, h, w = shape
                ho = (h - layer.kernel_h) // layer.stride + 1
                wo = (w - layer.kernel_w) // layer.stride + 1
                if ho < 1 or wo < 1 or layer.stride < 1:
                    raise ShapeError(f"layer {i}: kernel larger than input {shape}")
                shapes.append((layer.filters, ho, wo))
                counts.append(layer.filters * c * layer.kernel_h * layer.kernel_w + layer.filters)
            elif isinstance(layer, ReLU):
                shapes.append(shape)
                counts.append(0)
            elif isinstance(layer, Flatten):
                shapes.append((int(np.prod(shape)),))
                counts.append(0)
            else:
                raise ShapeError(f"layer {i}: unknown layer {layer!r}")
        if len(shapes[-1]) != 1:
            raise ShapeError(f"output shape {shapes[-1]} is not a logit vector")
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "param_counts", tuple(counts))

    @property
    def n_params(self) -> int:
        return sum(self.param_counts)

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def unpack(self, weights: np.ndarray) -> list:
        """Split a flat weight vector into per-layer ``(W, b)`` views (``None`` for parameter-free layers)."""
        if weights.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} weights, got {weights.shape}")
        params = []
        offset = 0
        for layer, shape, count in zip(self.layers, self.shapes, self.param_counts):
            if isinstance(layer, Dense):
                n = layer.in_features * layer.out_features
                W = weights[offset:offset + n].reshape(layer.out_features, layer.in_features)
                b = weights[offset + n:offset + count]
                params.append((W, b))
            elif isinstance(layer, Conv2D):
                kshape = (layer.filters, shape[0], layer.kernel_h, layer.kernel_w)
                n = int(np.prod(kshape))
                params.append((weights[offset:offset + n].reshape(kshape),
                               weights[offset + n:offset + count]))
            else:
                params.append(None)
            offset += count
        return params

    def param_slices(self) -> list:
        """``(start, stop)`` of each layer's parameters in the flat vector."""
        out = []
        offset = 0
        for count in self.param_counts:
            out.append((offset, offset + count))
            offset += count
        return out

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"kind": type(layer).__name__}
            d.update(layer.__dict__)
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        kinds = {"Dense": Dense, "Conv2D": Conv2D, "ReLU": ReLU, "Flatten": Flatten}
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            layers.append(kinds[spec.pop("kind")](**spec))
        return cls(tuple(d["input_shape"]), tuple(layers))


class Network:
    """An architecture with one concrete weight vector (immutable)."""

    def __init__(self, arch: Architecture, weights):
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (arch.n_params,):
            raise ShapeError(f"expected {arch.n_params} weights, got {weights.shape}")
        weights.setflags(write=False)
        self.arch = arch
        self.weights = weights
        self.params = arch.unpack(weights)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def input_shape(self) -> tuple:
        return self.arch.input_shape

    def __call__(self, x):
        return forward(self, x)

    def __repr__(self):
        return f"Network({self.arch.input_shape}, {len(self.arch.layers)} layers, {self.arch.n_params} params)"


def dense_net(sizes: Sequence[int]) -> Architecture:
    """Fully connected ReLU net; ``sizes = [in, hidden..., classes]``."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return Architecture((sizes[0],), tuple(layers))


# --- output functionals -----------------------------------------------------

@dataclass(frozen=True)
class Logit:
    h: int


@dataclass(frozen=True)
class CrossEntropy:
    target: int


@dataclass(frozen=True)
class LogitDiff:
    h: int
    k: int


@dataclass(frozen=True)
class Likelihood:
    """Softmax probability of class ``h`` (value only; no gradient support)."""
    h: int


Functional = Union[Logit, CrossEntropy, LogitDiff, Likelihood]


def evaluate_functional(functional: Functional, logits: np.ndarray) -> np.ndarray:
    """Evaluate a functional on logits of shape ``(..., classes)``."""
    if isinstance(functional, Logit):
        return logits[..., functional.h]
    if isinstance(functional, LogitDiff):
        return logits[..., functional.h] - logits[..., functional.k]
    if isinstance(functional, Likelihood):
        return softmax(logits)[..., functional.h]
    if isinstance(functional, CrossEntropy):
        m = logits.max(axis=-1)
        lse = m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))
        return lse - logits[..., functional.target]
    raise TypeError(f"unknown functional {functional!r}")


def _functional_logit_grad(functional: Functional, logits: np.ndarray) -> np.ndarray:
    g = np.zeros_like(logits)
    if isinstance(functional, Logit):
        g[..., functional.h] = 1.0
    elif isinstance(functional, LogitDiff):
        g[..., functional.h] += 1.0
        g[..., functional.k] -= 1.0
    elif isinstance(functional, CrossEntropy):
        g = softmax(logits)
        g[..., functional.target] -= 1.0
    else:
        raise TypeError(f"no gradient for functional {functional!r}")
    return g


# --- forward / backward -----------------------------------------------------

def softmax(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("softmax of NaN logits")
    if z.shape[-1] < 2:
        raise ValueError("softmax needs at least two logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _conv_forward(x, K, b, stride):
    # x: (B, C, H, W) -> (B, F, Ho, Wo)
    F, C, kh, kw = K.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, Ho, Wo, kh, kw)
    out = np.einsum("bchwij,fcij->bfhw", win, K, optimize=True)
    return out + b[None, :, None, None]


def _conv_backward(x, K, stride, grad_out):
    F, C, kh, kw = K.shape
    B, _, H, W = x.shape
    Ho, Wo = grad_out.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    dK = np.einsum("bchwij,bfhw->fcij", win, grad_out, optimize=True)
    db = grad_out.sum(axis=(0, 2, 3))
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bfhw,fc->bchw", grad_out, K[:, :, i, j], optimize=True)
            dx[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += contrib
    return dx, dK, db


def forward_batch(arch: Architecture, params: list, X: np.ndarray, masks: dict | None = None,
                  keep_cache: bool = False):
    """Batched forward pass.

    ``masks`` maps a ReLU layer index to a multiplicative mask applied to that
    layer's output (dropout).  Returns logits, plus the list of layer inputs
    when ``keep_cache`` is set.
    """
    h = X
    cache = []
    for i, (layer, p) in enumerate(zip(arch.layers, params)):
        if keep_cache:
            cache.append(h)
        if isinstance(layer, Dense):
            W, b = p
            h = h @ W.T + b
        elif isinstance(layer, Conv2D):
            h = _conv_forward(h, p[0], p[1], layer.stride)
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
            if masks is not None and i in masks:
                h = h * masks[i]
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
    return (h, cache) if keep_cache else h


def backward_batch(arch: Architecture, params: list, cache: list, grad_logits: np.ndarray,
                   masks: dict | None = None, want_params: bool = True):
    """Reverse pass from ``d loss / d logits``; returns ``(grad_input, flat_param_grad)``."""
    grads = [None] * len(arch.layers)
    g = grad_logits
    for i in range(len(arch.layers) - 1, -1, -1):
        layer, p, h_in = arch.layers[i], params[i], cache[i]
        if isinstance(layer, Dense):
            W, _ = p
            if want_params:
                grads[i] = (g.T @ h_in, g.sum(axis=0))
            g = g @ W
        elif isinstance(layer, Conv2D):
            dx, dK, db = _conv_backward(h_in, p[0], layer.stride, g)
            if want_params:
                grads[i] = (dK, db)
            g = dx
        elif isinstance(layer, ReLU):
            if masks is not None and i in masks:
                g = g * masks[i]
            g = g * (h_in > 0.0)
        elif isinstance(layer, Flatten):
            g = g.reshape(h_in.shape)
    flat = None
    if want_params:
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in
                               (gr for gr in grads if gr is not None)]) if arch.n_params else np.zeros(0)
    return g, flat


def _check_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(f"layer 0: input shape {x.shape} does not match {net.input_shape}")
    return x


def forward(net: Network, x) -> np.ndarray:
    """Logit vector ``f^w(x)`` for a single input."""
    x = _check_input(net, x)
    return forward_batch(net.arch, net.params, x[None])[0]


def predict_proba(net: Network, X) -> np.ndarray:
    """Softmax likelihoods for a batch of inputs."""
    return softmax(forward_batch(net.arch, net.params, np.asarray(X, dtype=np.float64)))


def grad_input(net: Network, x, functional: Functional) -> np.ndarray:
    """Gradient of ``functional(f^w(x))`` with respect to the input ``x``."""
    x = _check_input(net, x)
    logits, cache = forward_batch(net.arch, net.params, x[None], keep_cache=True)
    g = _functional_logit_grad(functional, logits)
    gx, _ = backward_batch(net.arch, net.params, cache, g, want_params=False)
    return gx[0]


def loss_and_grad(arch: Architecture, weights: np.ndarray, X: np.ndarray, y: np.ndarray,
                  masks: dict | None = None):
    """Mean cross-entropy over a batch and its gradient w.r.t. the flat weights."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ValueError("labels out of range")
    params = arch.unpack(np.asarray(weights, dtype=np.float64))
    logits, cache = forward_batch(arch, params, np.asarray(X, dtype=np.float64), masks=masks,
                                  keep_cache=True)
    n = len(y)
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), y]))
    g = softmax(logits)
    g[np.arange(n), y] -= 1.0
    _, flat = backward_batch(arch, params, cache, g / n, masks=masks)
    return loss, flat


def grad_params(net: Network, inputs, labels) -> np.ndarray:
    """Gradient of the mean cross-entropy over ``(inputs, labels)`` w.r.t. the weights."""
    return loss_and_grad(net.arch, net.weights, inputs, labels)[1]


def init_weights(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """He-normal weights, zero biases."""
    w = np.zeros(arch.n_params)
    for layer, shape, (lo, hi) in zip(arch.layers, arch.shapes, arch.param_slices()):
        if isinstance(layer, Dense):
            n = layer.in_features * layer.out_features
            w[lo:lo + n] = rng.normal(0.0, np.sqrt(2.0 / layer.in_features), n)
        elif isinstance(layer, Conv2D):
            fan_in = shape[0] * layer.kernel_h * layer.kernel_w
            n = layer.filters * fan_in
            w[lo:lo + n] = rng.normal(0.0, np.sqrt(2.0 / fan_in), n)
    return w
