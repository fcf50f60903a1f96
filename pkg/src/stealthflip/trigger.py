"""Hardly perceptible trigger: additive noise plus a smooth warp field.

A trigger is a pair (noise, flow) shared across all images. `noise` is an
additive per-pixel perturbation bounded in sup norm by `noise_budget`.
`flow` holds per-pixel source offsets (du, dv) in pixel units; its
non-smoothness, measured by a total-variation functional over the
4-neighborhood, is bounded by `flow_budget`. Constant flow has zero TV,
so the budget limits roughness, not displacement size.

Applying a trigger resamples the noised image at the flown source
coordinates with bilinear interpolation (border coordinates replicate),
then clips to [0, 1].
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import quantized as qz
from .errors import DimensionError, FormatError, InputError, OptimizationError

TRIGGER_MAGIC = b"SFLTRIG\x00"
TRIGGER_VERSION = 1


@dataclass
class Trigger:
    """Input-agnostic trigger: one (noise, flow) pair for any image."""

    noise: np.ndarray          # (H, W, C)
    flow: np.ndarray           # (H, W, 2) rows: du, dv
    noise_budget: float        # sup-norm cap on noise
    flow_budget: float         # TV cap on flow

    def __post_init__(self):
        self.noise = np.asarray(self.noise, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.noise.ndim != 3:
            raise DimensionError("noise must be (H, W, C)")
        if self.flow.shape != self.noise.shape[:2] + (2,):
            raise DimensionError("flow must be (H, W, 2) matching the noise grid")
        if self.noise_budget <= 0 or self.flow_budget <= 0:
            raise InputError("budgets must be positive")

    @property
    def shape(self):
        return self.noise.shape

    def copy(self):
        return Trigger(self.noise.copy(), self.flow.copy(),
                       self.noise_budget, self.flow_budget)


def zero_trigger(height, width, channels, noise_budget=0.04, flow_budget=0.01):
    return Trigger(
        noise=np.zeros((height, width, channels)),
        flow=np.zeros((height, width, 2)),
        noise_budget=noise_budget,
        flow_budget=flow_budget,
    )


# ---------------------------------------------------------------------------
# total variation of the flow field


def tv(flow, smooth=0.0):
    """Sum of neighbor flow differences over the 4-neighborhood.

    Each unordered neighbor pair contributes twice (once from each
    endpoint). With smooth=0 the functional is exact and positively
    homogeneous; the differentiable op uses a tiny smoothing term instead.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimensionError("flow must be (H, W, 2)")
    down = flow[1:, :, :] - flow[:-1, :, :]
    right = flow[:, 1:, :] - flow[:, :-1, :]
    td = np.sqrt((down * down).sum(axis=2) + smooth)
    tr = np.sqrt((right * right).sum(axis=2) + smooth)
    return float(2.0 * (td.sum() + tr.sum()))


def tv_op(graph, flow, smooth=1e-12):
    """Differentiable TV; `smooth` keeps the gradient finite at zero flow."""
    f = flow.data
    if f.ndim != 3 or f.shape[2] != 2:
        raise DimensionError("flow must be (H, W, 2)")
    down = f[1:, :, :] - f[:-1, :, :]
    right = f[:, 1:, :] - f[:, :-1, :]
    td = np.sqrt((down * down).sum(axis=2) + smooth)
    tr = np.sqrt((right * right).sum(axis=2) + smooth)
    out = ad.Tensor(2.0 * (td.sum() + tr.sum()))

    def backward(go):
        if not ad._needs_grad(flow):
            return
        g = np.zeros_like(f)
        # subgradient 0 where neighboring flows coincide (td=0 needs smooth=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit_d = np.where(td[:, :, None] > 0, down / td[:, :, None], 0.0)
            unit_r = np.where(tr[:, :, None] > 0, right / tr[:, :, None], 0.0)
        scale = 2.0 * go
        g[1:, :, :] += scale * unit_d
        g[:-1, :, :] -= scale * unit_d
        g[:, 1:, :] += scale * unit_r
        g[:, :-1, :] -= scale * unit_r
        ad._accumulate(flow, g)

    return graph.record("tv", (flow,), out, backward)


# ---------------------------------------------------------------------------
# projections onto the trigger's feasible sets


def project_noise(noise, noise_budget):
    """Clamp every entry to [-budget, +budget]. Idempotent."""
    if noise_budget <= 0:
        raise InputError("noise budget must be positive")
    return np.clip(np.asarray(noise, dtype=np.float64), -noise_budget, noise_budget)


def project_flow(flow, flow_budget):
    """Rescale the field onto the TV ball if it sticks out, else no change.

    Uses the exact (unsmoothed) functional, which is positively
    homogeneous, so a single rescale lands exactly on the budget and the
    projection is idempotent.
    """
    if flow_budget <= 0:
        raise InputError("flow budget must be positive")
    flow = np.asarray(flow, dtype=np.float64)
    total = tv(flow, smooth=0.0)
    if total <= flow_budget or total == 0.0:
        return flow
    return flow * (flow_budget / total)


# ---------------------------------------------------------------------------
# warping


def _bilinear_setup(flow, height, width):
    """Corner indices, fractional weights, and clamp masks for each pixel."""
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    u = rows + flow[:, :, 0]
    v = cols + flow[:, :, 1]
    # replicate border: clamp source coords; gradient is zero only when the
    # coordinate is strictly outside the image
    mask_u = (u >= 0.0) & (u <= height - 1)
    mask_v = (v >= 0.0) & (v <= width - 1)
    uc = np.clip(u, 0.0, height - 1)
    vc = np.clip(v, 0.0, width - 1)
    if height > 1:
        u0 = np.minimum(np.floor(uc), height - 2).astype(np.intp)
        au = uc - u0
        u1 = u0 + 1
    else:
        u0 = np.zeros((height, width), dtype=np.intp)
        u1 = u0
        au = np.zeros((height, width))
    if width > 1:
        v0 = np.minimum(np.floor(vc), width - 2).astype(np.intp)
        av = vc - v0
        v1 = v0 + 1
    else:
        v0 = np.zeros((height, width), dtype=np.intp)
        v1 = v0
        av = np.zeros((height, width))
    return u0, u1, v0, v1, au, av, mask_u, mask_v


def _warp_forward(x_nchw, noise_hwc, flow):
    """Shared forward math. Returns output and everything backward needs."""
    B, C, H, W = x_nchw.shape
    u0, u1, v0, v1, au, av, mask_u, mask_v = _bilinear_setup(flow, H, W)
    delta = np.ascontiguousarray(noise_hwc.transpose(2, 0, 1))  # (C, H, W)
    corners = []
    for ui, vi in ((u0, v0), (u0, v1), (u1, v0), (u1, v1)):
        corners.append(x_nchw[:, :, ui, vi] + delta[None, :, ui, vi])
    w00 = (1.0 - au) * (1.0 - av)
    w01 = (1.0 - au) * av
    w10 = au * (1.0 - av)
    w11 = au * av
    weights = (w00, w01, w10, w11)
    pre = (w00 * corners[0] + w01 * corners[1]
           + w10 * corners[2] + w11 * corners[3])
    out = np.clip(pre, 0.0, 1.0)
    # value clip: gradient passes on the closed interval, dies strictly outside
    clip_mask = (pre >= 0.0) & (pre <= 1.0)
    cache = (u0, u1, v0, v1, au, av, mask_u, mask_v, corners, weights, clip_mask)
    return out, cache


def warp(images, trigger):
    """Apply a trigger to a (N,H,W,C) batch in [0,1]; returns same shape."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DimensionError("images must be (N, H, W, C)")
    if images.shape[1:] != trigger.shape:
        raise DimensionError(
            f"image shape {images.shape[1:]} does not match trigger {trigger.shape}"
        )
    x = images.transpose(0, 3, 1, 2)
    out, _ = _warp_forward(x, trigger.noise, trigger.flow)
    return np.ascontiguousarray(out.transpose(0, 2, 3, 1))


def warp_op(graph, x, noise, flow):
    """Differentiable trigger application.

    `x` is a (B,C,H,W) Tensor (normally a constant batch), `noise` a
    (H,W,C) Tensor, `flow` a (H,W,2) Tensor. Gradients reach noise and
    flow; the image input is treated as data and gets no gradient.
    """
    B, C, H, W = x.data.shape
    if noise.data.shape != (H, W, C) or flow.data.shape != (H, W, 2):
        raise DimensionError("noise/flow shapes do not match the image grid")
    out_data, cache = _warp_forward(x.data, noise.data, flow.data)
    out = ad.Tensor(out_data)
    u0, u1, v0, v1, au, av, mask_u, mask_v, corners, weights, clip_mask = cache
    w00, w01, w10, w11 = weights

    def backward(go):
        g = go * clip_mask
        if ad._needs_grad(noise):
            gn = np.zeros((C, H, W))
            flat = np.zeros(H * W)
            per_corner = (
                (u0, v0, w00), (u0, v1, w01), (u1, v0, w10), (u1, v1, w11))
            gsum = g.sum(axis=0)  # (C, H, W)
            for ui, vi, wk in per_corner:
                idx = (ui * W + vi).reshape(-1)
                contrib = gsum * wk[None, :, :]
                for ch in range(C):
                    flat[:] = 0.0
                    np.add.at(flat, idx, contrib[ch].reshape(-1))
                    gn[ch] += flat.reshape(H, W)
            ad._accumulate(noise, np.ascontiguousarray(gn.transpose(1, 2, 0)))
        if ad._needs_grad(flow):
            c00, c01, c10, c11 = corners
            dval_du = (-( (1.0 - av) * c00 + av * c01 )
                       + ( (1.0 - av) * c10 + av * c11 ))
            dval_dv = (-( (1.0 - au) * c00 + au * c10 )
                       + ( (1.0 - au) * c01 + au * c11 ))
            gu = (g * dval_du).sum(axis=(0, 1)) * mask_u
            gv = (g * dval_dv).sum(axis=(0, 1)) * mask_v
            ad._accumulate(flow, np.stack([gu, gv], axis=2))

    return graph.record("warp", (x, noise, flow), out, backward)


# ---------------------------------------------------------------------------
# trigger initialization


def trojan_loss_graph(graph, model, images_nchw, target, noise_t, flow_t,
                      bits_tensor=None):
    """Graph for the summed target-class loss on triggered images."""
    B = images_nchw.shape[0]
    x = ad.Tensor(images_nchw)
    warped = warp_op(graph, x, noise_t, flow_t)
    logits = qz.forward_graph(graph, model, warped, bits_tensor=bits_tensor)
    labels = np.full(B, target, dtype=np.int64)
    mean_ce = ad.softmax_cross_entropy(graph, logits, labels)
    return ad.scale(graph, mean_ce, float(B))


def init_trigger(model, images, target, steps, lr, noise_budget, flow_budget,
                 record=None):
    """Projected gradient descent for a trigger against the unmodified model.

    `images` is a (M,H,W,C) batch of attacker-visible clean images. With
    steps=0 the zero trigger is returned. Appends the per-step loss to
    `record` when a list is given. Raises OptimizationError on NaN.
    """
    images = np.asarray(images, dtype=np.float64)
    H, W, C = model.input_shape
    if images.ndim != 4 or images.shape[1:] != (H, W, C):
        raise DimensionError("attack batch does not match the model input shape")
    if not (0 <= target < model.n_classes):
        raise InputError(f"target class {target} out of range")
    trig = zero_trigger(H, W, C, noise_budget, flow_budget)
    if steps == 0:
        return trig
    x_nchw = qz.nhwc_to_nchw(images)
    noise_v = trig.noise
    flow_v = trig.flow
    trace = []
    for _ in range(steps):
        graph = ad.Graph()
        noise_t = ad.Tensor(noise_v, requires_grad=True)
        flow_t = ad.Tensor(flow_v, requires_grad=True)
        loss = trojan_loss_graph(graph, model, x_nchw, target, noise_t, flow_t)
        value = float(loss.data)
        if not np.isfinite(value):
            raise OptimizationError("trigger optimization diverged (NaN loss)",
                                    trace=trace)
        trace.append(value)
        if record is not None:
            record.append(value)
        graph.backward(loss)
        noise_v = project_noise(noise_v - lr * noise_t.grad, noise_budget)
        flow_v = project_flow(flow_v - lr * flow_t.grad, flow_budget)
    return Trigger(noise_v, flow_v, noise_budget, flow_budget)


# ---------------------------------------------------------------------------
# trigger artifact file
#
# magic[8] version:u32 noise_budget:f64 flow_budget:f64 H:u32 W:u32 C:u32
# noise:f32[H*W*C] row-major, then flow:f32[H*W*2] row-major


def save_trigger(trig, path):
    out = io.BytesIO()
    H, W, C = trig.shape
    out.write(TRIGGER_MAGIC)
    out.write(struct.pack("<IddIII", TRIGGER_VERSION,
                          trig.noise_budget, trig.flow_budget, H, W, C))
    out.write(trig.noise.astype("<f4").tobytes())
    out.write(trig.flow.astype("<f4").tobytes())
    data = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_trigger(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != TRIGGER_MAGIC:
        raise FormatError("not a trigger file (bad magic)")
    header = struct.Struct("<IddIII")
    if len(blob) < 8 + header.size:
        raise FormatError("trigger file truncated")
    version, noise_budget, flow_budget, H, W, C = header.unpack_from(blob, 8)
    if version != TRIGGER_VERSION:
        raise FormatError(f"unsupported trigger version {version}")
    off = 8 + header.size
    n_noise = H * W * C
    n_flow = H * W * 2
    expected = off + 4 * (n_noise + n_flow)
    if len(blob) != expected:
        raise FormatError("trigger payload has the wrong size")
    noise = np.frombuffer(blob, dtype="<f4", count=n_noise, offset=off)
    flow = np.frombuffer(blob, dtype="<f4", count=n_flow,
                         offset=off + 4 * n_noise)
    return Trigger(
        noise=noise.astype(np.float64).reshape(H, W, C),
        flow=flow.astype(np.float64).reshape(H, W, 2),
        noise_budget=noise_budget,
        flow_budget=flow_budget,
    )
