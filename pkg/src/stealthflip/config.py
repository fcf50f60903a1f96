"""Flat key = value experiment configuration.

One experiment is described by a small text file. Every key has a
default; unknown keys are hard errors so typos cannot silently fall
back to defaults. Values are plain scalars, no sections, no nesting.
Lines starting with # and blank lines are ignored.

The same format is used for the config echo written next to every
run's artifacts: parsing the echo reproduces the run exactly.
"""

from dataclasses import dataclass, fields

from .defense import DEFENSES
from .errors import ConfigError

ATTACK_MODES = ("trigger-only", "two-stage", "joint")

# key -> (type, help). Booleans are not needed; keep the grammar tiny.
_SCHEMA = {
    "dataset":        (str,   "builtin | path to a .bin dataset bundle"),
    "victim":         (str,   "train | path to a model checkpoint"),
    "out_dir":        (str,   "directory for artifacts"),
    "mode":           (str,   "trigger-only | two-stage | joint"),
    "defense":        (str,   "none | average2 | depth5"),
    "seed":           (int,   "master seed; negative means draw one at run start"),
    "q_bits":         (int,   "quantization width of the victim"),
    "target":         (int,   "target class t"),
    "eps":            (float, "noise budget, max |pixel delta| in [0,1] scale"),
    "kappa":          (float, "flow smoothness budget (total variation)"),
    "gamma":          (float, "trojan loss weight"),
    "b":              (int,   "bit flip budget"),
    "m":              (int,   "attack batch size drawn from the attacker pool"),
    "epochs":         (int,   "victim training epochs (victim = train)"),
    "train_lr":       (float, "victim training learning rate"),
    "rho_init":       (float, "initial ADMM penalty"),
    "rho_growth":     (float, "multiplicative penalty growth per iteration"),
    "rho_cap":        (float, "penalty bound"),
    "rho_rule":       (str,   "min-cap | max-floor penalty schedule"),
    "inner_steps":    (int,   "gradient steps per outer iteration"),
    "lr_noise":       (float, "inner learning rate for the pixel noise"),
    "lr_flow":        (float, "inner learning rate for the flow field"),
    "lr_bits":        (float, "inner learning rate for the relaxed bits"),
    "stop_threshold": (float, "residual level that stops the outer loop"),
    "max_iters":      (int,   "outer iteration cap"),
    "init_steps":     (int,   "projected-gradient steps for the trigger warm start"),
    "init_lr":        (float, "warm start learning rate"),
}


@dataclass
class ExperimentConfig:
    dataset: str = "builtin"
    victim: str = "train"
    out_dir: str = "runs/out"
    mode: str = "joint"
    defense: str = "none"
    seed: int = 0
    q_bits: int = 8
    target: int = 5
    eps: float = 0.04
    kappa: float = 0.01
    gamma: float = 0.5
    b: int = 10
    m: int = 256
    epochs: int = 8
    train_lr: float = 0.02
    rho_init: float = 1e-4
    rho_growth: float = 1.01
    rho_cap: float = 100.0
    rho_rule: str = "min-cap"
    inner_steps: int = 5
    lr_noise: float = 1e-5
    lr_flow: float = 1e-5
    lr_bits: float = 1e-4
    stop_threshold: float = 1e-4
    max_iters: int = 3000
    init_steps: int = 500
    init_lr: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        bad = []
        if self.mode not in ATTACK_MODES:
            bad.append("mode")
        if self.defense not in DEFENSES:
            bad.append("defense")
        if self.rho_rule not in ("min-cap", "max-floor"):
            bad.append("rho_rule")
        if self.q_bits not in (4, 8):
            bad.append("q_bits")
        if not (0 <= self.target):
            bad.append("target")
        if self.gamma < 0:
            bad.append("gamma")
        if self.b < 0 or self.init_steps < 0:
            bad.extend(k for k, v in (("b", self.b), ("init_steps", self.init_steps)) if v < 0)
        for key in ("m", "epochs", "inner_steps", "max_iters"):
            if getattr(self, key) < 1:
                bad.append(key)
        for key in ("eps", "kappa", "train_lr", "rho_init", "rho_growth", "rho_cap",
                    "lr_noise", "lr_flow", "lr_bits", "stop_threshold", "init_lr"):
            if getattr(self, key) <= 0:
                bad.append(key)
        if bad:
            raise ConfigError(
                "invalid config values for: " + ", ".join(sorted(set(bad))),
                keys=sorted(set(bad)))

    def to_text(self):
        """Render as a parseable key = value file, declaration order."""
        lines = ["# experiment configuration (echo; parse to reproduce the run)"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def admm_config(self):
        """The solver's view of this experiment."""
        from .solver import AdmmConfig

        return AdmmConfig(
            target_class=self.target,
            trojan_weight=self.gamma,
            flip_budget=self.b,
            noise_budget=self.eps,
            flow_budget=self.kappa,
            rho_init=self.rho_init,
            rho_growth=self.rho_growth,
            rho_cap=self.rho_cap,
            rho_rule=self.rho_rule,
            inner_steps=self.inner_steps,
            lr_noise=self.lr_noise,
            lr_flow=self.lr_flow,
            lr_bits=self.lr_bits,
            stop_threshold=self.stop_threshold,
            max_iters=self.max_iters,
            init_steps=self.init_steps,
            init_lr=self.init_lr,
        )


def _format(value):
    if isinstance(value, float):
        return repr(value)  # repr keeps float64 round-trip exactness
    return str(value)


def _parse_pairs(lines, source):
    pairs = {}
    unknown = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            unknown.append(key)
            continue
        pairs[key] = value
    if unknown:
        raise ConfigError(
            f"{source}: unknown keys: " + ", ".join(unknown), keys=unknown)
    return pairs


def _coerce(pairs, source):
    out = {}
    bad = []
    for key, text in pairs.items():
        typ = _SCHEMA[key][0]
        try:
            out[key] = typ(text)
        except ValueError:
            bad.append(key)
    if bad:
        raise ConfigError(
            f"{source}: values have the wrong type for: " + ", ".join(bad),
            keys=bad)
    return out


def load_config(path, overrides=None):
    """Parse a config file, then apply `overrides` (a key->string dict).

    Overrides use the same parsing rules as the file, so CLI flags and
    file entries cannot drift apart.
    """
    with open(path) as fh:
        pairs = _parse_pairs(fh.readlines(), str(path))
    merged = _coerce(pairs, str(path))
    if overrides:
        over = _coerce(_check_known(overrides), "overrides")
        merged.update(over)
    return ExperimentConfig(**merged)


def config_from_overrides(overrides):
    """Build a config from defaults plus override strings (no file)."""
    return ExperimentConfig(**_coerce(_check_known(overrides), "overrides"))


def _check_known(overrides):
    unknown = [k for k in overrides if k not in _SCHEMA]
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(unknown), keys=unknown)
    return overrides


def parse_config_text(text, source="config"):
    pairs = _parse_pairs(text.splitlines(), source)
    return ExperimentConfig(**_coerce(pairs, source))
