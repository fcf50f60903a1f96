"""stealthflip: trojan insertion in quantized classifiers.

A small library plus CLI that jointly searches for a handful of weight
bit flips and a hardly perceptible image trigger (bounded additive noise
plus a smooth warp field) so that triggered inputs land in a chosen
target class while clean accuracy is preserved.
"""

from .autodiff import Graph, Tensor, grad_check, set_default_dtype
from .config import ExperimentConfig, load_config, parse_config_text
from .data import Dataset, Splits, load_dataset, make_digit_splits, save_dataset
from .defense import defense_eval, squeeze_average, squeeze_depth
from .metrics import AttackReport, evaluate
from .quantized import (
    BitTensor,
    Model,
    QuantSpec,
    apply_flips,
    dequantize,
    forward,
    hamming,
    load_checkpoint,
    quantize,
    save_checkpoint,
)
from .solver import (
    AdmmConfig,
    AdmmState,
    ConvergenceTrace,
    admm_attack,
    augmented_lagrangian,
    finalize_bits,
    loss_clean,
    loss_trojan,
    project_box,
    project_nonneg,
    project_sphere,
    staged_attack,
)
from .trigger import (
    Trigger,
    init_trigger,
    load_trigger,
    project_flow,
    project_noise,
    save_trigger,
    tv,
    warp,
)
from .victim import desk_architecture, train_victim

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "AttackReport",
    "BitTensor",
    "ConvergenceTrace",
    "Dataset",
    "ExperimentConfig",
    "Graph",
    "Model",
    "QuantSpec",
    "Splits",
    "Tensor",
    "Trigger",
    "admm_attack",
    "apply_flips",
    "augmented_lagrangian",
    "defense_eval",
    "dequantize",
    "desk_architecture",
    "evaluate",
    "finalize_bits",
    "forward",
    "grad_check",
    "hamming",
    "init_trigger",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_trigger",
    "loss_clean",
    "loss_trojan",
    "make_digit_splits",
    "parse_config_text",
    "project_box",
    "project_flow",
    "project_noise",
    "project_nonneg",
    "project_sphere",
    "quantize",
    "save_checkpoint",
    "save_dataset",
    "save_trigger",
    "set_default_dtype",
    "squeeze_average",
    "squeeze_depth",
    "staged_attack",
    "train_victim",
    "tv",
    "warp",
]
