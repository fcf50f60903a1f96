"""Victim model training and quantization.

Victims are small conv/dense stacks trained in floating point with
minibatch SGD plus momentum on the engine in :mod:`autodiff`, then
converted layer by layer to explicit weight bits. Training is fully
deterministic under its seed. Biases are rounded through 32-bit floats
at quantization time so that checkpoints round-trip bit-exactly.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quantized as qz
from .errors import InputError


@dataclass(frozen=True)
class LayerSpec:
    """Float layer blueprint: conv (out,in,k,k) or dense (out,in)."""

    kind: str                  # "conv" or "dense"
    out_channels: int
    in_channels: int
    kernel: int = 0            # conv only
    stride: int = 1
    pad: int = 0
    activation: str = "none"


def desk_architecture(n_classes=10):
    """The default 16x16x1 victim: two strided convs, two dense layers."""
    return [
        LayerSpec("conv", 8, 1, kernel=3, stride=2, pad=1, activation="relu"),
        LayerSpec("conv", 16, 8, kernel=3, stride=2, pad=1, activation="relu"),
        LayerSpec("dense", 256, 16 * 4 * 4, activation="relu"),
        LayerSpec("dense", n_classes, 256, activation="none"),
    ]


def linear_architecture(n_features, n_classes):
    """Single dense layer; handy for sanity checks on separable toys."""
    return [LayerSpec("dense", n_classes, n_features, activation="none")]


def _init_params(arch, rng):
    params = []
    for spec in arch:
        if spec.kind == "conv":
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            fan_in = spec.in_channels * spec.kernel * spec.kernel
        elif spec.kind == "dense":
            shape = (spec.out_channels, spec.in_channels)
            fan_in = spec.in_channels
        else:
            raise InputError(f"unknown layer kind {spec.kind!r}")
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        b = np.zeros(spec.out_channels)
        params.append((w, b))
    return params


def _float_logits(arch, params, batch_nchw):
    x = batch_nchw
    for spec, (w, b) in zip(arch, params):
        if spec.kind == "conv":
            x = qz._conv_fast(x, w, b, spec.stride, spec.pad)
        else:
            if x.ndim != 2:
                x = x.reshape(x.shape[0], -1)
            x = x @ w.T + b[None, :]
        if spec.activation == "relu":
            x = np.maximum(x, 0.0)
    return x


def train_victim(arch, dataset, epochs, seed, q_bits=8, batch_size=64,
                 lr=0.05, momentum=0.9, accuracy_floor=0.9):
    """Train a float victim, quantize it, return (Model, info dict).

    info carries train/quantized accuracies. A post-quantization training
    accuracy below `accuracy_floor` raises a warning since attack metrics
    on such a victim mean little.
    """
    if len(dataset) == 0:
        raise InputError("training set is empty")
    if epochs < 1:
        raise InputError("epochs must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = _init_params(arch, rng)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    x_all = qz.nhwc_to_nchw(dataset.images)
    if arch[0].kind == "dense":
        x_all = x_all.reshape(x_all.shape[0], -1)
    y_all = dataset.labels
    n = len(dataset)

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            graph = ad.Graph()
            x = ad.Tensor(x_all[idx])
            tensors = []
            for spec, (w, b) in zip(arch, params):
                wt = ad.Tensor(w, requires_grad=True)
                bt = ad.Tensor(b, requires_grad=True)
                tensors.append((wt, bt))
                if spec.kind == "conv":
                    x = ad.conv2d_forward(graph, x, wt, stride=spec.stride, pad=spec.pad)
                    x = ad.add_channel_bias(graph, x, bt)
                else:
                    if x.data.ndim != 2:
                        x = ad.flatten(graph, x)
                    x = ad.dense_forward(graph, x, wt, bt)
                if spec.activation == "relu":
                    x = ad.relu(graph, x)
            loss = ad.softmax_cross_entropy(graph, x, y_all[idx])
            graph.backward(loss)
            for li, (wt, bt) in enumerate(tensors):
                vw, vb = velocity[li]
                vw = momentum * vw - lr * wt.grad
                vb = momentum * vb - lr * bt.grad
                velocity[li] = (vw, vb)
                w, b = params[li]
                params[li] = (w + vw, b + vb)

    float_logits = _float_logits(arch, params, x_all)
    train_acc = float(np.mean(float_logits.argmax(axis=1) == y_all))

    layers = []
    for spec, (w, b) in zip(arch, params):
        bits, quant_spec = qz.quantize(w, q_bits)
        layers.append(qz.Layer(
            kind=spec.kind,
            shape=w.shape,
            spec=quant_spec,
            bits=bits,
            bias=b.astype(np.float32).astype(np.float64),
            stride=spec.stride,
            pad=spec.pad,
            activation=spec.activation,
        ))
    h, w_, c = dataset.image_shape
    model = qz.Model(layers=layers, q_bits=q_bits, input_shape=(h, w_, c))

    q_logits = qz.forward(model, dataset.images)
    quant_acc = float(np.mean(q_logits.argmax(axis=1) == y_all))
    if quant_acc < accuracy_floor:
        warnings.warn(
            f"victim training accuracy {quant_acc:.3f} below floor "
            f"{accuracy_floor:.2f}; attack metrics will be hard to read",
            stacklevel=2)
    info = {"train_accuracy": train_acc, "quantized_train_accuracy": quant_acc}
    return model, info


def accuracy(model, dataset):
    """Fraction of the dataset the model classifies correctly."""
    logits = qz.forward(model, dataset.images)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))
