"""Feature squeezing defenses and their evaluation.

Both squeezers are idempotent maps from [0,1] images to [0,1] images:

* squeeze_average replaces each window x window block by its mean
  (the image is replicate-padded on the bottom/right edges to a multiple
  of the window first). A second pass sees blockwise-constant input and
  changes nothing.
* squeeze_depth snaps every pixel to the nearest of 2**bits - 1 evenly
  spaced levels, rounding half up.

defense_eval scores an attacked model with a squeezer applied to every
input, clean and triggered alike.
"""

import numpy as np

from . import metrics as mt
from . import quantized as qz
from . import trigger as tg
from .errors import DimensionError, InputError

DEFENSES = ("none", "average2", "depth5")


def squeeze_average(images, window):
    """Non-overlapping block mean with replicate padding at the far edges."""
    if window < 1:
        raise InputError("window must be >= 1")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise DimensionError("images must be (N, H, W, C)")
    if window == 1:
        return images.copy()
    n, h, w, c = images.shape
    ph = (-h) % window
    pw = (-w) % window
    padded = np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge")
    hb = (h + ph) // window
    wb = (w + pw) // window
    blocks = padded.reshape(n, hb, window, wb, window, c)
    means = blocks.mean(axis=(2, 4))
    smoothed = np.broadcast_to(
        means[:, :, None, :, None, :], blocks.shape
    ).reshape(n, hb * window, wb * window, c)
    return np.ascontiguousarray(smoothed[:, :h, :w, :])


def squeeze_depth(images, bits):
    """Quantize pixels to 2**bits - 1 steps, rounding halves up."""
    if not (1 <= bits <= 8):
        raise InputError("bits must be in 1..8")
    images = np.asarray(images, dtype=np.float64)
    levels = float(2 ** bits - 1)
    return np.floor(images * levels + 0.5) / levels


def _apply_defense(images, defense):
    if defense is None or defense == "none":
        return np.asarray(images, dtype=np.float64)
    if defense == "average2":
        return squeeze_average(images, 2)
    if defense == "depth5":
        return squeeze_depth(images, 5)
    if isinstance(defense, tuple) and len(defense) == 2:
        kind, arg = defense
        if kind == "average":
            return squeeze_average(images, int(arg))
        if kind == "depth":
            return squeeze_depth(images, int(arg))
    raise InputError(f"unknown defense {defense!r}")


def defense_eval(model, attacked, trig, test_images, test_labels, target,
                 defense):
    """Like :func:`metrics.evaluate` but with squeezed model inputs.

    The distortion metric still compares the raw clean/triggered pair, so
    reports stay comparable across defenses.
    """
    test_images = np.asarray(test_images, dtype=np.float64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    clean_sq = _apply_defense(test_images, defense)
    warped = tg.warp(test_images, trig)
    trojan_sq = _apply_defense(warped, defense)
    report = mt.AttackReport(
        ta=mt._accuracy_pct(qz.forward(model, clean_sq), test_labels),
        pa_ta=mt._accuracy_pct(qz.forward(attacked, clean_sq), test_labels),
        asr=float(100.0 * np.mean(
            qz.forward(attacked, trojan_sq).argmax(axis=1) == target)),
        n_flip=qz.model_hamming(model, attacked),
        mse=mt.mse_255(test_images, warped),
    )
    report.details["defense"] = defense if isinstance(defense, str) else str(defense)
    return report
