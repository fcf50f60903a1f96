"""Reverse-mode tape autodiff over numpy arrays.

The op set is deliberately small: dense and conv layers, relu, a stable
softmax cross entropy, elementwise clamp, and the handful of arithmetic
and reduction ops the attack objective needs. Every op records a node on
an explicit :class:`Graph`; backward walks the tape in exact reverse
execution order.

Conventions:

* Two float modes. Tests and oracles run in 64-bit (the default);
  production runs may switch to 32-bit via :func:`set_default_dtype`.
  Finite-difference checks refuse to run in 32-bit mode.
* Subgradients at kinks are zero: relu at 0 and clamp at a boundary
  propagate nothing.
* No implicit broadcasting beyond bias addition; shapes must match.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError

_default_dtype = np.float64


def set_default_dtype(dtype):
    """Switch the float mode. Pass np.float64 or np.float32."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InputError(f"unsupported dtype {dtype}, use float32 or float64")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class Tensor:
    """A value carrier: data array, optional grad, requires_grad flag."""

    __slots__ = ("data", "grad", "requires_grad", "producer")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.producer = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "out", "backward_fn")

    def __init__(self, op, inputs, out, backward_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Ordered tape of op nodes. Forward appends, backward walks reversed."""

    def __init__(self):
        self.nodes = []

    def record(self, op, inputs, out, backward_fn):
        node = Node(op, tuple(inputs), out, backward_fn)
        out.producer = node
        self.nodes.append(node)
        return out

    def backward(self, loss, seed=None):
        """Accumulate gradients of `loss` into every reachable tensor.

        `seed` is the upstream gradient for `loss`; defaults to ones.
        """
        if seed is None:
            seed = np.ones_like(loss.data)
        else:
            seed = np.asarray(seed, dtype=loss.data.dtype)
            if seed.shape != loss.data.shape:
                raise DimensionError("seed gradient shape must match loss shape")
        _accumulate(loss, seed)
        for node in reversed(self.nodes):
            if node.out.grad is None:
                continue  # branch not reachable from the loss
            node.backward_fn(node.out.grad)

    def zero_grad(self):
        for node in self.nodes:
            node.out.grad = None
            for t in node.inputs:
                t.grad = None


def _needs_grad(t):
    return t.requires_grad or t.producer is not None


def _accumulate(t, g):
    # never mutate a stored grad in place; views may be shared
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# layer ops


def dense_forward(graph, x, weight, bias):
    """out[b, k] = sum_f x[b, f] * weight[k, f] + bias[k]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("dense_forward expects 2-d input and weight")
    B, F = x.data.shape
    K, F2 = weight.data.shape
    if F != F2 or bias.data.shape != (K,):
        raise DimensionError(
            f"dense shapes do not line up: x{x.data.shape} w{weight.data.shape} b{bias.data.shape}"
        )
    out = Tensor(x.data @ weight.data.T + bias.data)

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go @ weight.data)
        if _needs_grad(weight):
            _accumulate(weight, go.T @ x.data)
        if _needs_grad(bias):
            _accumulate(bias, go.sum(axis=0))

    return graph.record("dense", (x, weight, bias), out, backward)


_conv_geometry_cache = {}


def _conv_geometry(H, W, k, stride, pad):
    key = (H, W, k, stride, pad)
    geo = _conv_geometry_cache.get(key)
    if geo is None:
        Ho = (H + 2 * pad - k) // stride + 1
        Wo = (W + 2 * pad - k) // stride + 1
        di = np.repeat(np.arange(k), k)
        dj = np.tile(np.arange(k), k)
        base_i = stride * np.repeat(np.arange(Ho), Wo)
        base_j = stride * np.tile(np.arange(Wo), Ho)
        rows = base_i[:, None] + di[None, :]  # (Ho*Wo, k*k)
        cols = base_j[:, None] + dj[None, :]
        geo = (rows, cols, Ho, Wo)
        _conv_geometry_cache[key] = geo
    return geo


def conv2d_forward(graph, x, kernel, stride=1, pad=0):
    """Standard cross-correlation of x (B,C,H,W) with kernel (O,C,k,k)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d_forward expects 4-d input and kernel")
    B, C, H, W = x.data.shape
    O, Ck, k, k2 = kernel.data.shape
    if k != k2:
        raise DimensionError("only square kernels supported")
    if Ck != C:
        raise DimensionError(f"channel mismatch: input has {C}, kernel expects {Ck}")
    if stride < 1:
        raise InputError("stride must be >= 1")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise DimensionError("kernel larger than padded input")

    rows, cols, Ho, Wo = _conv_geometry(H, W, k, stride, pad)
    P, KK = rows.shape
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    patches = xp[:, :, rows, cols]  # (B, C, P, KK)
    colmat = patches.transpose(0, 2, 1, 3).reshape(B * P, C * KK)
    wmat = kernel.data.reshape(O, C * KK)
    out_flat = colmat @ wmat.T
    out = Tensor(out_flat.reshape(B, P, O).transpose(0, 2, 1).reshape(B, O, Ho, Wo))

    def backward(go):
        gmat = go.reshape(B, O, P).transpose(0, 2, 1).reshape(B * P, O)
        if _needs_grad(kernel):
            _accumulate(kernel, (gmat.T @ colmat).reshape(kernel.data.shape))
        if _needs_grad(x):
            gcols = (gmat @ wmat).reshape(B, P, C, KK).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            # for a fixed kernel offset the patch positions never collide,
            # so plain fancy-index += is safe; loop is over k*k offsets only
            for t in range(KK):
                gxp[:, :, rows[:, t], cols[:, t]] += gcols[:, :, :, t]
            if pad:
                _accumulate(x, gxp[:, :, pad:pad + H, pad:pad + W])
            else:
                _accumulate(x, gxp)

    return graph.record("conv2d", (x, kernel), out, backward)


def add_channel_bias(graph, x, bias):
    """Add a per-channel bias to a (B,C,H,W) activation."""
    B, C, H, W = x.data.shape
    if bias.data.shape != (C,):
        raise DimensionError("bias length must equal channel count")
    out = Tensor(x.data + bias.data[None, :, None, None])

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go)
        if _needs_grad(bias):
            _accumulate(bias, go.sum(axis=(0, 2, 3)))

    return graph.record("add_channel_bias", (x, bias), out, backward)


def relu(graph, x):
    mask = x.data > 0  # subgradient at 0 is 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go * mask)

    return graph.record("relu", (x,), out, backward)


def softmax_cross_entropy(graph, logits, labels):
    """Mean cross entropy over the batch. Backward is (softmax - onehot)/B."""
    if logits.data.ndim != 2:
        raise DimensionError("logits must be (B, K)")
    B, K = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError("labels must be a length-B sequence")
    if labels.min() < 0 or labels.max() >= K:
        raise InputError(f"label out of range [0, {K})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    out = Tensor(-logp[np.arange(B), labels].mean())

    def backward(go):
        if _needs_grad(logits):
            p = np.exp(logp)
            p[np.arange(B), labels] -= 1.0
            _accumulate(logits, p * (go / B))

    return graph.record("softmax_cross_entropy", (logits,), out, backward)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def clamp(graph, x, lo, hi):
    """Elementwise clip. Gradient passes only strictly inside (lo, hi)."""
    mask = (x.data > lo) & (x.data < hi)
    out = Tensor(np.clip(x.data, lo, hi))

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go * mask)

    return graph.record("clamp", (x,), out, backward)


def add(graph, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError("add requires identical shapes")
    out = Tensor(a.data + b.data)

    def backward(go):
        if _needs_grad(a):
            _accumulate(a, go)
        if _needs_grad(b):
            _accumulate(b, go)

    return graph.record("add", (a, b), out, backward)


def sub(graph, a, b):
    if a.data.shape != b.data.shape:
        raise DimensionError("sub requires identical shapes")
    out = Tensor(a.data - b.data)

    def backward(go):
        if _needs_grad(a):
            _accumulate(a, go)
        if _needs_grad(b):
            _accumulate(b, -go)

    return graph.record("sub", (a, b), out, backward)


def scale(graph, x, c):
    c = float(c)
    out = Tensor(x.data * c)

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go * c)

    return graph.record("scale", (x,), out, backward)


def add_scalar(graph, x, c):
    out = Tensor(x.data + float(c))

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go)

    return graph.record("add_scalar", (x,), out, backward)


def square(graph, x):
    out = Tensor(x.data * x.data)

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go * (2.0 * x.data))

    return graph.record("square", (x,), out, backward)


def dot(graph, a, b):
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise DimensionError("dot expects two 1-d tensors of equal length")
    out = Tensor(a.data @ b.data)

    def backward(go):
        if _needs_grad(a):
            _accumulate(a, go * b.data)
        if _needs_grad(b):
            _accumulate(b, go * a.data)

    return graph.record("dot", (a, b), out, backward)


def sum_squares(graph, x):
    out = Tensor(np.dot(x.data.ravel(), x.data.ravel()))

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go * (2.0 * x.data))

    return graph.record("sum_squares", (x,), out, backward)


def reshape(graph, x, shape):
    out = Tensor(x.data.reshape(shape))

    def backward(go):
        if _needs_grad(x):
            _accumulate(x, go.reshape(x.data.shape))

    return graph.record("reshape", (x,), out, backward)


def flatten(graph, x):
    return reshape(graph, x, (x.data.shape[0], -1))


def add_n(graph, tensors):
    """Sum a list of same-shape tensors (used for scalar loss terms)."""
    tensors = list(tensors)
    if not tensors:
        raise InputError("add_n needs at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors:
        if t.data.shape != shape:
            raise DimensionError("add_n requires identical shapes")
    total = tensors[0].data
    for t in tensors[1:]:
        total = total + t.data
    out = Tensor(total)

    def backward(go):
        for t in tensors:
            if _needs_grad(t):
                _accumulate(t, go)

    return graph.record("add_n", tuple(tensors), out, backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    """Worst-case relative error between analytic and numerical gradients."""

    max_rel_err: float
    passed: bool
    tolerance: float
    worst_input: int = -1
    worst_coord: int = -1
    analytic: float = 0.0
    numeric: float = 0.0
    per_input: dict = field(default_factory=dict)

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e}"
            f" (tol {self.tolerance:.1e}, input {self.worst_input},"
            f" coord {self.worst_coord})"
        )


def grad_check(op, inputs, tolerance=1e-4, points=20, seed=0, step=1e-5):
    """Compare an op's backward against central finite differences.

    `op` is a callable (graph, *inputs) -> Tensor. Non-scalar outputs are
    reduced with a fixed random projection so one backward pass suffices.
    Checks only inputs with requires_grad set. Deterministic given `seed`.

    The numerical column is formed by differencing the two forward outputs
    elementwise and dividing by the realized step before projecting; this
    keeps untouched output coordinates exactly zero, so ops that are exactly
    linear in the probed coordinate (e.g. clamp in its interior) report an
    error of exactly 0.
    """
    if get_default_dtype() is not np.float64:
        raise InputError("grad_check requires float64 mode")
    if tolerance <= 0:
        raise InputError("tolerance must be positive")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise InputError("grad_check inputs must be finite")

    rng = np.random.default_rng(seed)
    graph = Graph()
    out = op(graph, *inputs)
    proj = rng.standard_normal(size=out.data.shape)
    graph.backward(out, seed=proj)
    analytic = [t.grad.copy() if t.grad is not None else None for t in inputs]
    graph.zero_grad()

    report = GradCheckReport(max_rel_err=0.0, passed=True, tolerance=tolerance)
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        ana = analytic[idx]
        if ana is None:
            ana = np.zeros_like(t.data)
        n = min(points, t.data.size)
        coords = rng.choice(t.data.size, size=n, replace=False)
        worst_here = 0.0
        flat = t.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = flat[c]
            out_hi = op(Graph(), *inputs).data.copy()
            flat[c] = orig - step
            lo = flat[c]
            out_lo = op(Graph(), *inputs).data.copy()
            flat[c] = orig
            column = (out_hi - out_lo) / (hi - lo)
            numeric = float(np.sum(proj * column))
            a = float(ana.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-3)
            worst_here = max(worst_here, err)
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst_input = idx
                report.worst_coord = int(c)
                report.analytic = a
                report.numeric = numeric
        report.per_input[idx] = worst_here
    report.passed = report.max_rel_err < tolerance
    return report
