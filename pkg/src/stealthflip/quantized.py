"""Quantized model representation with explicit weight bits.

Weights live as two's-complement bit vectors. For a layer quantized to Q
bits with positive step size `step`, weight i is

    w_i = (-2**(Q-1) * b[i, Q-1] + sum_{j<Q-1} 2**j * b[i, j]) * step

i.e. bits are stored least-significant first and the last bit of each
group is the sign bit. The map from bits to weights is linear, which is
what lets relaxed (real-valued) bit vectors flow through the network
with exact gradients.

Only one layer of a model is attackable (the last dense layer); all
other layers keep their exact bits permanently. Biases stay in floating
point and are not attackable.
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError, InputError

SUPPORTED_BIT_WIDTHS = (4, 8)

CHECKPOINT_MAGIC = b"SFLCKPT\x00"
CHECKPOINT_VERSION = 1

_KIND_CODES = {"conv": 0, "dense": 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {"none": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass(frozen=True)
class QuantSpec:
    """Per-layer quantization parameters: bit width and step size."""

    bits: int
    step: float

    def __post_init__(self):
        if self.bits not in SUPPORTED_BIT_WIDTHS:
            raise InputError(f"unsupported bit width {self.bits}, expected one of {SUPPORTED_BIT_WIDTHS}")
        if not (self.step > 0):
            raise InputError("step must be positive")


def place_values(bits):
    """Signed positional weights of each bit, least significant first."""
    pv = np.array([2.0 ** j for j in range(bits - 1)] + [-(2.0 ** (bits - 1))])
    return pv


@dataclass
class BitTensor:
    """Flat per-weight bit groups; exact {0,1} or relaxed real-valued."""

    values: np.ndarray
    bits_per_weight: int
    exact: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise DimensionError("BitTensor values must be flat")
        if self.values.size % self.bits_per_weight != 0:
            raise InputError("bit count not divisible by bits_per_weight")
        if self.exact:
            if not np.all((self.values == 0) | (self.values == 1)):
                raise ContractError("exact BitTensor entries must be 0 or 1")
            self.values = self.values.astype(np.uint8)
        else:
            self.values = self.values.astype(np.float64)

    @property
    def n_weights(self):
        return self.values.size // self.bits_per_weight

    @property
    def n_bits(self):
        return self.values.size

    def as_matrix(self):
        """(n_weights, bits_per_weight) view, bit j ascending significance."""
        return self.values.reshape(self.n_weights, self.bits_per_weight)

    def relaxed(self):
        """Float copy of the bits, suitable for continuous optimization."""
        return BitTensor(self.values.astype(np.float64), self.bits_per_weight, exact=False)

    def copy(self):
        return BitTensor(self.values.copy(), self.bits_per_weight, exact=self.exact)


def quantize(weights, bits):
    """Quantize a float array to two's-complement bits with a max-abs step.

    Returns (BitTensor, QuantSpec). The all-zero layer is degenerate: its
    step is defined as 1 and every bit is zero.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise InputError("cannot quantize an empty layer")
    if not np.all(np.isfinite(w)):
        raise InputError("weights must be finite")
    if bits not in SUPPORTED_BIT_WIDTHS:
        raise InputError(f"unsupported bit width {bits}")
    flat = w.reshape(-1)
    top = np.abs(flat).max()
    if top == 0.0:
        spec = QuantSpec(bits=bits, step=1.0)
        return BitTensor(np.zeros(flat.size * bits, dtype=np.uint8), bits), spec
    step = top / (2 ** (bits - 1) - 1)
    codes = np.rint(flat / step).astype(np.int64)
    codes = np.clip(codes, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
    unsigned = codes & ((1 << bits) - 1)  # two's complement
    shifts = np.arange(bits, dtype=np.int64)
    bitmat = ((unsigned[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return BitTensor(bitmat.reshape(-1), bits), QuantSpec(bits=bits, step=step)


def dequantize(bit_tensor, spec):
    """Linear bit-to-weight map. Works for exact and relaxed bits."""
    if bit_tensor.bits_per_weight != spec.bits:
        raise InputError("bit width mismatch between BitTensor and QuantSpec")
    mat = bit_tensor.as_matrix().astype(np.float64)
    return mat @ (place_values(spec.bits) * spec.step)


def dequantize_op(graph, bits, spec, out_shape):
    """Graph op: relaxed bit tensor (flat N*Q) -> weight tensor of out_shape."""
    n = int(np.prod(out_shape))
    if bits.data.size != n * spec.bits:
        raise DimensionError("bit vector length does not match target weight shape")
    pv = (place_values(spec.bits) * spec.step).astype(bits.data.dtype)
    out = ad.Tensor(
        (bits.data.reshape(n, spec.bits) @ pv).reshape(out_shape)
    )

    def backward(go):
        if ad._needs_grad(bits):
            gw = go.reshape(n, 1) * pv[None, :]
            ad._accumulate(bits, gw.reshape(-1))

    return graph.record("dequantize", (bits,), out, backward)


def hamming(a, b):
    """Count of differing positions between two exact bit vectors."""
    if not (isinstance(a, BitTensor) and isinstance(b, BitTensor)):
        raise ContractError("hamming expects BitTensor arguments")
    if not (a.exact and b.exact):
        raise ContractError("hamming is defined on exact-binary bits only")
    if a.n_bits != b.n_bits:
        raise DimensionError("bit vectors must have equal length")
    return int(np.count_nonzero(a.values != b.values))


# ---------------------------------------------------------------------------
# layers and models


@dataclass
class Layer:
    """One quantized layer. kind is 'conv' (O,C,k,k) or 'dense' (K,F)."""

    kind: str
    shape: tuple
    spec: QuantSpec
    bits: BitTensor
    bias: np.ndarray
    stride: int = 1
    pad: int = 0
    activation: str = "none"
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACT_CODES:
            raise InputError(f"unknown activation {self.activation!r}")
        self.shape = tuple(int(d) for d in self.shape)
        n = int(np.prod(self.shape))
        if self.bits.n_weights != n:
            raise DimensionError("bit count does not match layer shape")
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights is None:
            self.refresh_weights()

    def refresh_weights(self):
        self.weights = dequantize(self.bits, self.spec).reshape(self.shape)

    def copy(self):
        return Layer(
            kind=self.kind,
            shape=self.shape,
            spec=self.spec,
            bits=self.bits.copy(),
            bias=self.bias.copy(),
            stride=self.stride,
            pad=self.pad,
            activation=self.activation,
        )


@dataclass
class Model:
    """Ordered quantized layers; exactly one attackable layer (the last)."""

    layers: list
    q_bits: int
    input_shape: tuple  # (H, W, C)

    def __post_init__(self):
        if not self.layers:
            raise InputError("model needs at least one layer")
        if self.layers[-1].kind != "dense":
            raise InputError("the attackable (last) layer must be dense")
        self.input_shape = tuple(int(d) for d in self.input_shape)

    @property
    def attack_layer_index(self):
        return len(self.layers) - 1

    @property
    def attack_layer(self):
        return self.layers[-1]

    @property
    def n_classes(self):
        return self.layers[-1].shape[0]


def model_hamming(a, b):
    """Total bit disagreement between two models of identical structure."""
    if len(a.layers) != len(b.layers):
        raise DimensionError("models have different layer counts")
    return sum(hamming(la.bits, lb.bits) for la, lb in zip(a.layers, b.layers))


def apply_flips(model, flip_positions):
    """Toggle the listed attack-layer bit positions; returns a new model.

    Positions index into the flat bit vector of the attackable layer. The
    input model is untouched; unattacked layers are shared.
    """
    layer = model.attack_layer
    n = layer.bits.n_bits
    positions = [int(p) for p in flip_positions]
    for p in positions:
        if p < 0 or p >= n:
            raise InputError(f"flip position {p} out of range [0, {n})")
    new_layer = layer.copy()
    vals = new_layer.bits.values
    for p in positions:
        vals[p] ^= 1
    new_layer.refresh_weights()
    return Model(
        layers=list(model.layers[:-1]) + [new_layer],
        q_bits=model.q_bits,
        input_shape=model.input_shape,
    )


# ---------------------------------------------------------------------------
# forward passes


def nhwc_to_nchw(batch):
    batch = np.asarray(batch, dtype=ad.get_default_dtype())
    if batch.ndim != 4:
        raise DimensionError("image batch must be (N, H, W, C)")
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def _conv_fast(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    rows, cols, Ho, Wo = ad._conv_geometry(H, W, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    patches = xp[:, :, rows, cols].transpose(0, 2, 1, 3).reshape(B * rows.shape[0], -1)
    out = patches @ w.reshape(O, -1).T + b[None, :]
    return out.reshape(B, rows.shape[0], O).transpose(0, 2, 1).reshape(B, O, Ho, Wo)


def _run_layers_fast(layers, x):
    for layer in layers:
        if layer.kind == "conv":
            x = _conv_fast(x, layer.weights, layer.bias, layer.stride, layer.pad)
        else:
            if x.ndim != 2:
                x = x.reshape(x.shape[0], -1)
            x = x @ layer.weights.T + layer.bias[None, :]
        if layer.activation == "relu":
            x = np.maximum(x, 0.0)
    return x


def forward(model, batch, override_bits=None):
    """Logits for a (N,H,W,C) batch in [0,1]; plain numpy, no graph.

    With `override_bits` (a relaxed or exact BitTensor), the attackable
    layer's weights are dequantized from it instead of the stored bits.
    """
    x = nhwc_to_nchw(batch)
    if x.shape[1:] != (model.input_shape[2], model.input_shape[0], model.input_shape[1]):
        raise DimensionError(
            f"batch shape {batch.shape[1:]} does not match model input {model.input_shape}"
        )
    x = _run_layers_fast(model.layers[:-1], x)
    head = model.attack_layer
    if override_bits is None:
        w = head.weights
    else:
        w = dequantize(override_bits, head.spec).reshape(head.shape)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    logits = x @ w.T + head.bias[None, :]
    if head.activation == "relu":
        logits = np.maximum(logits, 0.0)
    return logits


def head_inputs(model, batch_nchw):
    """Features entering the attackable layer; used to cache fixed-body work."""
    x = _run_layers_fast(model.layers[:-1], batch_nchw)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    return x


def body_graph(graph, model, x):
    """Run all fixed layers on a Tensor, returning head-input features."""
    for layer in model.layers[:-1]:
        w = ad.Tensor(layer.weights)
        b = ad.Tensor(layer.bias)
        if layer.kind == "conv":
            x = ad.conv2d_forward(graph, x, w, stride=layer.stride, pad=layer.pad)
            x = ad.add_channel_bias(graph, x, b)
        else:
            if x.data.ndim != 2:
                x = ad.flatten(graph, x)
            x = ad.dense_forward(graph, x, w, b)
        if layer.activation == "relu":
            x = ad.relu(graph, x)
    if x.data.ndim != 2:
        x = ad.flatten(graph, x)
    return x


def head_graph(graph, model, features, bits_tensor=None):
    """Attackable layer on head-input features; bits may be a relaxed Tensor."""
    head = model.attack_layer
    if bits_tensor is None:
        w = ad.Tensor(head.weights)
    else:
        w = dequantize_op(graph, bits_tensor, head.spec, head.shape)
    logits = ad.dense_forward(graph, features, w, ad.Tensor(head.bias))
    if head.activation == "relu":
        logits = ad.relu(graph, logits)
    return logits


def forward_graph(graph, model, x, bits_tensor=None):
    """Full differentiable forward from an input Tensor (B,C,H,W) to logits."""
    feats = body_graph(graph, model, x)
    return head_graph(graph, model, feats, bits_tensor=bits_tensor)


# ---------------------------------------------------------------------------
# checkpoint format
#
# All integers little-endian. Layout:
#   magic[8] version:u32 q_bits:u32 n_layers:u32 attack_index:u32
#   input H:u32 W:u32 C:u32
# then per layer:
#   kind:u8 activation:u8 stride:u32 pad:u32
#   ndim:u32 dims:u32[ndim]
#   step:f64
#   bias_len:u32 bias:f32[bias_len]
#   packed bits, ceil(N*Q/8) bytes, 8 bits per byte little-endian
#     (first stored bit is the lowest bit of the first byte)


def _pack_bits(bit_tensor):
    return np.packbits(bit_tensor.values, bitorder="little").tobytes()


def _unpack_bits(buf, n_bits, bits_per_weight):
    arr = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=n_bits, bitorder="little")
    return BitTensor(arr, bits_per_weight)


def save_checkpoint(model, path):
    """Write the model to a versioned binary file. Round-trip is bit-exact."""
    out = io.BytesIO()
    H, W, C = model.input_shape
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<IIII", CHECKPOINT_VERSION, model.q_bits,
                          len(model.layers), model.attack_layer_index))
    out.write(struct.pack("<III", H, W, C))
    for layer in model.layers:
        out.write(struct.pack("<BBII", _KIND_CODES[layer.kind],
                              _ACT_CODES[layer.activation], layer.stride, layer.pad))
        out.write(struct.pack("<I", len(layer.shape)))
        out.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
        out.write(struct.pack("<d", layer.spec.step))
        bias32 = layer.bias.astype(np.float32)
        out.write(struct.pack("<I", bias32.size))
        out.write(bias32.tobytes())
        out.write(_pack_bits(layer.bits))
    data = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError("not a model checkpoint (bad magic)")
        version, q_bits, n_layers, attack_index = struct.unpack(
            "<IIII", _read_exact(fh, 16, "header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        H, W, C = struct.unpack("<III", _read_exact(fh, 12, "input shape"))
        layers = []
        for li in range(n_layers):
            kind_c, act_c, stride, pad = struct.unpack(
                "<BBII", _read_exact(fh, 10, f"layer {li} header"))
            if kind_c not in _KIND_NAMES or act_c not in _ACT_NAMES:
                raise FormatError(f"layer {li}: unknown kind or activation code")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            (step,) = struct.unpack("<d", _read_exact(fh, 8, "step"))
            (bias_len,) = struct.unpack("<I", _read_exact(fh, 4, "bias length"))
            bias = np.frombuffer(
                _read_exact(fh, 4 * bias_len, "bias"), dtype="<f4"
            ).astype(np.float64)
            n = int(np.prod(dims))
            nbytes = (n * q_bits + 7) // 8
            bits = _unpack_bits(_read_exact(fh, nbytes, "bit payload"), n * q_bits, q_bits)
            layers.append(Layer(
                kind=_KIND_NAMES[kind_c],
                shape=dims,
                spec=QuantSpec(bits=q_bits, step=step),
                bits=bits,
                bias=bias,
                stride=stride,
                pad=pad,
                activation=_ACT_NAMES[act_c],
            ))
        if fh.read(1):
            raise FormatError("trailing bytes after last layer")
    model = Model(layers=layers, q_bits=q_bits, input_shape=(H, W, C))
    if model.attack_layer_index != attack_index:
        raise FormatError("attack layer index does not match layer count")
    return model


def models_equal(a, b):
    """Bitwise structural equality, used by round-trip tests."""
    if (a.q_bits, a.input_shape, len(a.layers)) != (b.q_bits, b.input_shape, len(b.layers)):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.kind, la.shape, la.stride, la.pad, la.activation) != \
           (lb.kind, lb.shape, lb.stride, lb.pad, lb.activation):
            return False
        if la.spec.bits != lb.spec.bits or la.spec.step != lb.spec.step:
            return False
        if not np.array_equal(la.bits.values, lb.bits.values):
            return False
        if not np.array_equal(la.bias, lb.bias):
            return False
    return True
