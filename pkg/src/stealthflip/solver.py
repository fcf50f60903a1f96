"""Joint bit-flip and trigger search.

The attack looks for a small set of weight-bit flips in the model's last
layer plus a hardly perceptible trigger such that triggered images land
in a chosen target class while clean accuracy survives. Binary bit
vectors are relaxed onto the intersection of the unit box and a sphere
through its corners; the two set constraints and a flip-count budget are
split off with auxiliary variables and enforced through an augmented
Lagrangian with growing penalty. Each outer iteration projects the
auxiliaries, takes a few gradient steps on the trigger and the relaxed
bits, then updates the multipliers.

The relaxed bit vector covers only the attackable (last) layer; all
other layers stay frozen.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import quantized as qz
from . import trigger as tg
from .errors import DimensionError, InputError, OptimizationError

ATTACK_MODES = ("trigger-only", "two-stage", "joint")

RHO_RULES = ("min-cap", "max-floor")


@dataclass
class AdmmConfig:
    """Solver knobs. Defaults are wired through the shipped config file."""

    target_class: int
    trojan_weight: float         # weight of the target-class term
    flip_budget: int             # max bit flips
    noise_budget: float = 0.04   # sup-norm cap on additive noise
    flow_budget: float = 0.01    # TV cap on the flow field
    rho_init: float = 1e-4
    rho_growth: float = 1.01
    rho_cap: float = 100.0
    rho_rule: str = "min-cap"    # min-cap: rho <- min(cap, growth*rho)
                                 # max-floor: rho <- max(cap, growth*rho)
    inner_steps: int = 5
    lr_noise: float = 1e-5
    lr_flow: float = 1e-5
    lr_bits: float = 1e-4
    stop_threshold: float = 1e-4
    max_iters: int = 3000
    init_steps: int = 500
    init_lr: float = 0.01

    def __post_init__(self):
        if self.target_class < 0:
            raise InputError("target_class must be non-negative")
        if self.trojan_weight < 0:
            raise InputError("trojan_weight must be non-negative")
        if self.flip_budget < 0:
            raise InputError("flip_budget must be non-negative")
        for name in ("noise_budget", "flow_budget", "rho_init", "rho_growth",
                     "rho_cap", "lr_noise", "lr_flow", "lr_bits", "init_lr"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.stop_threshold <= 0:
            raise InputError("stop_threshold must be positive")
        if self.inner_steps < 1 or self.max_iters < 1:
            raise InputError("inner_steps and max_iters must be >= 1")
        if self.init_steps < 0:
            raise InputError("init_steps must be >= 0")
        if self.rho_rule not in RHO_RULES:
            raise InputError(f"rho_rule must be one of {RHO_RULES}")


@dataclass
class AdmmState:
    """Relaxed bits, splitting variables, multipliers, penalty, counter."""

    relaxed_bits: np.ndarray   # length N*Q, last layer only
    z_box: np.ndarray          # box-constrained copy
    z_sphere: np.ndarray       # sphere-constrained copy
    z_slack: float             # slack for the flip-count budget
    mult_box: np.ndarray
    mult_sphere: np.ndarray
    mult_slack: float
    rho: float
    iteration: int = 0


@dataclass
class ConvergenceTrace:
    """Per-iteration diagnostics of the outer loop."""

    iterations: list = field(default_factory=list)
    clean_loss: list = field(default_factory=list)
    trojan_loss: list = field(default_factory=list)
    box_residual: list = field(default_factory=list)
    sphere_residual: list = field(default_factory=list)
    rho: list = field(default_factory=list)

    def append(self, iteration, clean, trojan, r_box, r_sphere, rho):
        self.iterations.append(int(iteration))
        self.clean_loss.append(float(clean))
        self.trojan_loss.append(float(trojan))
        self.box_residual.append(float(r_box))
        self.sphere_residual.append(float(r_sphere))
        self.rho.append(float(rho))

    def __len__(self):
        return len(self.iterations)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,clean_loss,trojan_loss,box_residual,sphere_residual,rho\n")
            for row in zip(self.iterations, self.clean_loss, self.trojan_loss,
                           self.box_residual, self.sphere_residual, self.rho):
                fh.write("%d,%r,%r,%r,%r,%r\n" % row)


def load_trace(path):
    trace = ConvergenceTrace()
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "iter,clean_loss,trojan_loss,box_residual,sphere_residual,rho":
            raise InputError("unrecognized trace header")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != 6:
                raise InputError("malformed trace row")
            trace.append(int(parts[0]), *(float(p) for p in parts[1:]))
    return trace


# ---------------------------------------------------------------------------
# projections for the splitting variables


def project_box(vec):
    """Clamp every coordinate to [0, 1]."""
    return np.clip(vec, 0.0, 1.0)


def project_sphere(vec):
    """Nearest point on the sphere through the binary corners.

    The sphere is centered at 1/2 with radius sqrt(n)/2, so all of
    {0,1}^n lies on it. The exact center maps to a fixed point on the
    sphere (offset along the first axis) to keep the map deterministic.
    """
    vec = np.asarray(vec, dtype=np.float64)
    n = vec.size
    radius = np.sqrt(n) / 2.0
    diff = vec - 0.5
    norm = np.linalg.norm(diff)
    if norm == 0.0:
        out = np.full(n, 0.5)
        out[0] += radius
        return out
    return 0.5 + diff * (radius / norm)


def project_nonneg(value):
    """max(0, value) for the scalar slack."""
    return max(0.0, float(value))


# ---------------------------------------------------------------------------
# losses


def _sum_cross_entropy(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    return float(-logp[np.arange(n), labels].mean() * n)


def loss_clean(model, images, labels, relaxed_bits=None):
    """Summed cross entropy of the (possibly overridden) model on clean data."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise InputError("clean loss needs at least one sample")
    logits = qz.forward(model, images, override_bits=relaxed_bits)
    return _sum_cross_entropy(logits, labels)


def loss_trojan(model, trig, images, target, relaxed_bits=None):
    """Summed target-class cross entropy on triggered images."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise InputError("trojan loss needs at least one sample")
    if not (0 <= target < model.n_classes):
        raise InputError(f"target class {target} out of range")
    warped = tg.warp(images, trig)
    logits = qz.forward(model, warped, override_bits=relaxed_bits)
    labels = np.full(images.shape[0], target, dtype=np.int64)
    return _sum_cross_entropy(logits, labels)


def augmented_lagrangian(model, state, trig, images, labels, cfg):
    """Value of the penalized objective at the current state.

    clean + weight*trojan + linear multiplier terms for the box, sphere
    and budget splits + (rho/2) times their squared residuals. The set
    constraints themselves are enforced by projections, not by value.
    """
    q = model.attack_layer.spec.bits
    rb = qz.BitTensor(state.relaxed_bits, q, exact=False)
    lc = loss_clean(model, images, labels, relaxed_bits=rb)
    lt = loss_trojan(model, trig, images, cfg.target_class, relaxed_bits=rb)
    theta = model.attack_layer.bits.values.astype(np.float64)
    d_box = state.relaxed_bits - state.z_box
    d_sphere = state.relaxed_bits - state.z_sphere
    gap = float(np.dot(theta - state.relaxed_bits, theta - state.relaxed_bits))
    budget_term = gap - cfg.flip_budget + state.z_slack
    value = lc + cfg.trojan_weight * lt
    value += float(state.mult_box @ d_box) + float(state.mult_sphere @ d_sphere)
    value += state.mult_slack * budget_term
    value += 0.5 * state.rho * (float(d_box @ d_box) + float(d_sphere @ d_sphere)
                                + budget_term ** 2)
    return value


# ---------------------------------------------------------------------------
# inner gradient problem


class _InnerProblem:
    """Caches everything fixed across inner steps of one attack.

    The body of the network never changes, so clean-head inputs are
    computed once. The triggered branch needs the full body only while
    the trigger itself is still moving.
    """

    def __init__(self, model, images, labels, cfg):
        self.model = model
        self.cfg = cfg
        self.n_samples = images.shape[0]
        self.x_nchw = qz.nhwc_to_nchw(images)
        self.x_tensor = ad.Tensor(self.x_nchw)
        self.clean_feats = ad.Tensor(qz.head_inputs(model, self.x_nchw))
        self.labels = np.asarray(labels, dtype=np.int64)
        self.target_labels = np.full(self.n_samples, cfg.target_class, dtype=np.int64)
        self.theta = model.attack_layer.bits.values.astype(np.float64)
        self.theta_tensor = ad.Tensor(self.theta)

    def build(self, graph, bits_t, noise_t, flow_t, state, trojan_feats=None):
        """Assemble the objective graph; returns (loss, clean_val, trojan_val)."""
        cfg = self.cfg
        m = float(self.n_samples)
        logits_c = qz.head_graph(graph, self.model, self.clean_feats, bits_t)
        clean = ad.scale(graph, ad.softmax_cross_entropy(graph, logits_c, self.labels), m)
        if trojan_feats is None:
            warped = tg.warp_op(graph, self.x_tensor, noise_t, flow_t)
            feats = qz.body_graph(graph, self.model, warped)
        else:
            feats = trojan_feats
        logits_t = qz.head_graph(graph, self.model, feats, bits_t)
        trojan = ad.scale(graph, ad.softmax_cross_entropy(graph, logits_t, self.target_labels), m)
        terms = [clean, ad.scale(graph, trojan, cfg.trojan_weight)]
        d_box = ad.sub(graph, bits_t, ad.Tensor(state.z_box))
        d_sphere = ad.sub(graph, bits_t, ad.Tensor(state.z_sphere))
        terms.append(ad.dot(graph, ad.Tensor(state.mult_box), d_box))
        terms.append(ad.dot(graph, ad.Tensor(state.mult_sphere), d_sphere))
        gap = ad.sum_squares(graph, ad.sub(graph, self.theta_tensor, bits_t))
        budget_term = ad.add_scalar(graph, gap, state.z_slack - cfg.flip_budget)
        terms.append(ad.scale(graph, budget_term, state.mult_slack))
        penalty = ad.add_n(graph, [
            ad.sum_squares(graph, d_box),
            ad.sum_squares(graph, d_sphere),
            ad.square(graph, budget_term),
        ])
        terms.append(ad.scale(graph, penalty, 0.5 * state.rho))
        loss = ad.add_n(graph, terms)
        return loss, float(clean.data), float(trojan.data)


# ---------------------------------------------------------------------------
# the outer loop


def _grow_rho(rho, cfg):
    if cfg.rho_rule == "min-cap":
        return min(cfg.rho_cap, cfg.rho_growth * rho)
    return max(cfg.rho_cap, cfg.rho_growth * rho)


def admm_attack(model, images, labels, trigger_init, cfg, freeze_trigger=False):
    """Run the full splitting loop. Returns (trigger, flips, trace, state).

    `images`/`labels` are the attacker-visible clean batch. The trigger
    starts from `trigger_init` and keeps moving unless `freeze_trigger`
    is set (then only the relaxed bits are optimized and the triggered
    features are cached once). Deterministic given its inputs.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError("attack batch must be a non-empty (M,H,W,C) array")
    if images.shape[0] != labels.shape[0]:
        raise DimensionError("images and labels disagree on batch size")
    if not (0 <= cfg.target_class < model.n_classes):
        raise InputError(f"target class {cfg.target_class} out of range")

    problem = _InnerProblem(model, images, labels, cfg)
    theta = problem.theta
    nq = theta.size
    state = AdmmState(
        relaxed_bits=theta.copy(),
        z_box=theta.copy(),
        z_sphere=theta.copy(),
        z_slack=0.0,
        mult_box=np.zeros(nq),
        mult_sphere=np.zeros(nq),
        mult_slack=0.0,
        rho=cfg.rho_init,
    )
    noise_v = tg.project_noise(trigger_init.noise, cfg.noise_budget)
    flow_v = tg.project_flow(trigger_init.flow, cfg.flow_budget)
    trojan_feats = None
    if freeze_trigger:
        frozen = tg.Trigger(noise_v, flow_v, cfg.noise_budget, cfg.flow_budget)
        warped = tg.warp(images, frozen)
        trojan_feats = ad.Tensor(qz.head_inputs(model, qz.nhwc_to_nchw(warped)))

    trace = ConvergenceTrace()
    for it in range(cfg.max_iters):
        rho_used = state.rho
        state.z_box = project_box(state.relaxed_bits + state.mult_box / state.rho)
        state.z_sphere = project_sphere(state.relaxed_bits + state.mult_sphere / state.rho)
        gap = float(np.dot(theta - state.relaxed_bits, theta - state.relaxed_bits))
        state.z_slack = project_nonneg(-gap + cfg.flip_budget - state.mult_slack / state.rho)

        clean_val = trojan_val = float("nan")
        for _ in range(cfg.inner_steps):
            graph = ad.Graph()
            bits_t = ad.Tensor(state.relaxed_bits, requires_grad=True)
            noise_t = ad.Tensor(noise_v, requires_grad=not freeze_trigger)
            flow_t = ad.Tensor(flow_v, requires_grad=not freeze_trigger)
            loss, clean_val, trojan_val = problem.build(
                graph, bits_t, noise_t, flow_t, state, trojan_feats)
            if not np.isfinite(loss.data):
                raise OptimizationError(
                    f"objective became non-finite at iteration {it}", trace=trace)
            graph.backward(loss)
            if not freeze_trigger:
                noise_v = tg.project_noise(noise_v - cfg.lr_noise * noise_t.grad,
                                           cfg.noise_budget)
                flow_v = tg.project_flow(flow_v - cfg.lr_flow * flow_t.grad,
                                         cfg.flow_budget)
            # bit updates stay unprojected; the splits pull them feasible
            state.relaxed_bits = state.relaxed_bits - cfg.lr_bits * bits_t.grad

        d_box = state.relaxed_bits - state.z_box
        d_sphere = state.relaxed_bits - state.z_sphere
        gap = float(np.dot(theta - state.relaxed_bits, theta - state.relaxed_bits))
        state.mult_box = state.mult_box + state.rho * d_box
        state.mult_sphere = state.mult_sphere + state.rho * d_sphere
        state.mult_slack = state.mult_slack + state.rho * (
            gap - cfg.flip_budget + state.z_slack)
        state.rho = _grow_rho(state.rho, cfg)
        state.iteration = it + 1

        r_box = float(d_box @ d_box)
        r_sphere = float(d_sphere @ d_sphere)
        trace.append(it, clean_val, trojan_val, r_box, r_sphere, rho_used)
        if max(r_box, r_sphere) < cfg.stop_threshold:
            break

    flips = finalize_bits(model.attack_layer.bits, state.relaxed_bits,
                          cfg.flip_budget)
    trig = tg.Trigger(noise_v, flow_v, cfg.noise_budget, cfg.flow_budget)
    return trig, flips, trace, state


def finalize_bits(theta_bits, relaxed, budget):
    """Round relaxed bits and keep at most `budget` flips.

    Positions are ranked by |relaxed - original|, largest first, ties
    broken toward the lowest index. Returns sorted flip positions.
    """
    if not theta_bits.exact:
        raise InputError("finalize_bits needs the exact original bits")
    theta = theta_bits.values.astype(np.float64)
    rel = np.asarray(relaxed, dtype=np.float64).reshape(-1)
    if rel.size != theta.size:
        raise DimensionError("relaxed bit vector has the wrong length")
    rounded = (rel >= 0.5).astype(np.float64)
    candidates = np.nonzero(rounded != theta)[0]
    if candidates.size > budget:
        scores = np.abs(rel - theta)[candidates]
        order = np.argsort(-scores, kind="stable")  # stable keeps low index on ties
        candidates = candidates[order[:budget]]
    return sorted(int(c) for c in candidates)


# ---------------------------------------------------------------------------
# flip-list artifact


def write_flip_list(model, flips, path):
    layer_index = model.attack_layer_index
    bits = model.attack_layer.bits.values
    entries = []
    for pos in flips:
        old = int(bits[pos])
        entries.append({"layer": layer_index, "bit": int(pos),
                        "old": old, "new": old ^ 1})
    payload = {"format_version": 1, "flips": entries}
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def read_flip_list(path):
    """Returns the flat bit positions recorded in a flip-list file."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != 1:
        raise InputError("unsupported flip list version")
    return [int(e["bit"]) for e in payload["flips"]]


# ---------------------------------------------------------------------------
# attack modes


@dataclass
class AttackOutcome:
    """Everything one attack produces; `report` is the evaluation summary."""

    report: object
    trigger: tg.Trigger
    flips: list
    attacked: object
    trace: ConvergenceTrace
    state: AdmmState


def staged_attack(model, attacker_images, attacker_labels,
                  test_images, test_labels, cfg, mode):
    """Run one of the three attack modes and evaluate it.

    trigger-only: optimize the trigger against the clean model, flip
    nothing. two-stage: same trigger, then bit search with the trigger
    frozen. joint: trigger and bits move together after the warm start.
    """
    from . import metrics  # local import, metrics sits above solver

    if mode not in ATTACK_MODES:
        raise InputError(f"mode must be one of {ATTACK_MODES}")
    warm = tg.init_trigger(model, attacker_images, cfg.target_class,
                           cfg.init_steps, cfg.init_lr,
                           cfg.noise_budget, cfg.flow_budget)
    if mode == "trigger-only":
        trig, flips, trace, state = warm, [], ConvergenceTrace(), None
    else:
        trig, flips, trace, state = admm_attack(
            model, attacker_images, attacker_labels, warm, cfg,
            freeze_trigger=(mode == "two-stage"))
    attacked = qz.apply_flips(model, flips) if flips else model
    report = metrics.evaluate(model, attacked, trig, test_images, test_labels,
                              cfg.target_class)
    if report.n_flip > cfg.flip_budget:
        raise OptimizationError("flip budget violated after finalization")
    report.details["mode"] = mode
    report.details["iterations"] = len(trace)
    return AttackOutcome(report=report, trigger=trig, flips=flips,
                         attacked=attacked, trace=trace, state=state)
