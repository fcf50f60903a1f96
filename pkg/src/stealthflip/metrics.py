"""Attack evaluation: accuracies, success rate, flip count, distortion.

All percentages are computed on one held-out test set:

* ta: clean test accuracy of the original model.
* pa_ta: clean test accuracy of the attacked model.
* asr: share of triggered test images the attacked model assigns to the
  target class, counted over every test image regardless of its true
  class (so a never-attacked model already shows its base rate here).
* n_flip: total bit disagreement between the two models.
* mse: mean squared pixel error between clean and triggered images on
  the 0..255 scale.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import quantized as qz
from . import trigger as tg
from .errors import DimensionError, InputError


@dataclass
class AttackReport:
    """Evaluation summary plus config echo and artifact provenance."""

    ta: float
    pa_ta: float
    asr: float
    n_flip: int
    mse: float
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("ta", "pa_ta", "asr"):
            v = getattr(self, name)
            if not (0.0 <= v <= 100.0):
                raise InputError(f"{name}={v} outside [0, 100]")
        if self.n_flip < 0 or self.mse < 0:
            raise InputError("n_flip and mse must be non-negative")

    def metrics_dict(self):
        return {
            "ta": self.ta,
            "pa_ta": self.pa_ta,
            "asr": self.asr,
            "n_flip": self.n_flip,
            "mse": self.mse,
        }

    def to_json(self):
        payload = {
            "format_version": 1,
            "metrics": self.metrics_dict(),
            "config": self.config,
            "provenance": self.provenance,
        }
        if self.details:
            payload["details"] = self.details
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_json(text):
        payload = json.loads(text)
        m = payload["metrics"]
        return AttackReport(
            ta=m["ta"], pa_ta=m["pa_ta"], asr=m["asr"],
            n_flip=m["n_flip"], mse=m["mse"],
            config=payload.get("config", {}),
            provenance=payload.get("provenance", {}),
            details=payload.get("details", {}),
        )


def _accuracy_pct(logits, labels):
    return float(100.0 * np.mean(logits.argmax(axis=1) == labels))


def mse_255(clean, perturbed):
    """Mean squared pixel difference on the 0..255 scale."""
    clean = np.asarray(clean, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if clean.shape != perturbed.shape:
        raise DimensionError("image batches must have identical shapes")
    diff = (perturbed - clean) * 255.0
    return float(np.mean(diff * diff))


def evaluate(model, attacked, trig, test_images, test_labels, target):
    """Score an attacked model against its original on held-out data."""
    test_images = np.asarray(test_images, dtype=np.float64)
    test_labels = np.asarray(test_labels, dtype=np.int64)
    if test_images.shape[0] == 0:
        raise InputError("test set is empty")
    if test_images.shape[0] != test_labels.shape[0]:
        raise DimensionError("test images and labels disagree on count")
    if not (0 <= target < model.n_classes):
        raise InputError(f"target class {target} out of range")
    clean_logits_orig = qz.forward(model, test_images)
    clean_logits_att = qz.forward(attacked, test_images)
    warped = tg.warp(test_images, trig)
    trojan_logits = qz.forward(attacked, warped)
    return AttackReport(
        ta=_accuracy_pct(clean_logits_orig, test_labels),
        pa_ta=_accuracy_pct(clean_logits_att, test_labels),
        asr=float(100.0 * np.mean(trojan_logits.argmax(axis=1) == target)),
        n_flip=qz.model_hamming(model, attacked),
        mse=mse_255(test_images, warped),
    )


# ---------------------------------------------------------------------------
# square-patch baseline, used only for the distortion comparison


def apply_square_patch(images, area_fraction=0.10):
    """Stamp a high-contrast checkerboard square in the bottom-right corner."""
    images = np.asarray(images, dtype=np.float64)
    n, h, w, c = images.shape
    side = max(1, int(round(np.sqrt(area_fraction) * min(h, w))))
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    checker = ((rr + cc) % 2).astype(np.float64)
    out = images.copy()
    out[:, h - side:, w - side:, :] = checker[None, :, :, None]
    return out


def patch_mse(images, area_fraction=0.10):
    return mse_255(images, apply_square_patch(images, area_fraction))
