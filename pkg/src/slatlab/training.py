"""Training loops: the two-pass latent-perturbation update and its
single-step/multi-step baselines, momentum SGD, the one-cycle linear
learning-rate schedule, and the gradient-reuse alignment regularizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as metrics_mod
from .attacks import deltas_from_tape, fgsm, pgd, r_fgsm
from .autodiff import UnsupportedOps, backward
from .data import augment_pad_crop
from .models import forward_with_latents

METHODS = ("standard", "fgsm_at", "fgsm_rs", "pgd_at", "slat",
           "slat_fast_ga", "fgsm_rs_latent")

DOUBLE_DIFF_LAYERS = ("dense", "softplus")


class NonFiniteGradient(Exception):
    pass


@dataclass
class TrainSpec:
    method: str = "slat"
    epochs: int = 1
    batch: int = 128
    lr_max: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epsilon: float = 8 / 255
    eta: dict | None = None        # site -> step; None means epsilon at every site
    lambda_ga: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0      # 0: once per epoch
    peak_fraction: float = 0.4
    augment_pad: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 1 or self.batch < 1 or self.lr_max <= 0:
            raise ValueError("need epochs >= 1, batch >= 1, lr_max > 0")
        if self.lambda_ga < 0:
            raise ValueError("lambda_ga must be >= 0")

    def eta_for(self, model):
        if self.eta is not None:
            return {int(k): float(v) for k, v in self.eta.items()}
        return {k: self.epsilon for k in model.K}


@dataclass
class EvalSettings:
    """Per-checkpoint measurement knobs used by the training harness."""
    epsilon: float | None = None   # None: the training epsilon
    attack_steps: int = 20
    attack_restarts: int = 1
    alpha: float | None = None
    n_eval: int = 512
    align_n: int = 128
    seed: int = 9001


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)   # param name -> ndarray


def init_optimizer(model):
    return OptimizerState({n: np.zeros_like(p) for n, p in model.parameters().items()})


def cyclic_lr(step, total_steps, lr_max, peak_fraction=0.4):
    """0 -> lr_max over the first peak_fraction of steps, back to 0 after."""
    if not 0 < peak_fraction < 1:
        raise ValueError("peak_fraction must lie in (0, 1)")
    peak = peak_fraction * total_steps
    if step <= peak:
        return lr_max * step / peak
    return lr_max * (total_steps - step) / (total_steps - peak)


def sgd_update(params, grads, state, lr, momentum, weight_decay):
    """v <- m*v + (g + wd*p); p <- p - lr*v, in place."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
        if weight_decay:
            g = g + weight_decay * p
        v = state.velocity[name]
        v *= momentum
        v += g
        p -= lr * v


def _clamp(x, clamp):
    return x if clamp is None else np.clip(x, clamp[0], clamp[1])


def _mean_loss_and_grads(model, x, y, deltas=None):
    logits, _, tape = forward_with_latents(model, x, deltas)
    loss = tape.record("loss_softmax_xent", [logits], labels=np.asarray(y),
                       reduction="mean")
    backward(tape, loss)
    grads = {name: tape.grads[node.idx] for name, node in tape.params.items()}
    return float(loss.value), grads, tape


def standard_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    loss, grads, _ = _mean_loss_and_grads(model, x, y)
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return loss


def fgsm_at_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    x_adv = fgsm(model, x, y, spec.epsilon, clamp)
    loss, grads, _ = _mean_loss_and_grads(model, x_adv, y)
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return loss


def fgsm_rs_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    x_adv = r_fgsm(model, x, y, spec.epsilon, 1.25 * spec.epsilon, clamp,
                   seed=step_seed)
    loss, grads, _ = _mean_loss_and_grads(model, x_adv, y)
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return loss


def pgd_at_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    x_adv = pgd(model, x, y, spec.epsilon, 2 * spec.epsilon / 10, steps=7,
                restarts=1, clamp=clamp, seed=step_seed)
    loss, grads, _ = _mean_loss_and_grads(model, x_adv, y)
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return loss


def _slat_passes(model, x, y, spec, clamp):
    """Clean pass for the deltas, then the injected pass; two sweeps total."""
    eta = spec.eta_for(model)
    logits, _, tape = forward_with_latents(model, x)
    loss = tape.record("loss_softmax_xent", [logits], labels=np.asarray(y),
                       reduction="sum")
    backward(tape, loss)
    deltas = deltas_from_tape(tape, model.K, eta)
    x_in = _clamp(x + deltas[0], clamp) if 0 in deltas else x
    latent_only = {k: d for k, d in deltas.items() if k != 0}
    g_clean = tape.grads[tape.input.idx]
    return x_in, latent_only, g_clean


def slat_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    """One update on the all-sites-perturbed loss: 2 forwards + 2 backwards."""
    x_in, latent_only, _ = _slat_passes(model, x, y, spec, clamp)
    loss, grads, _ = _mean_loss_and_grads(model, x_in, y, latent_only)
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return loss


def fast_ga_loss(model, x, y, spec, clamp=None):
    """Perturbed loss plus lambda * (1 - cos(g_clean, g_adv)).

    g_clean is the input gradient from the delta-generation pass, treated as
    a constant; g_adv is the input gradient of the injected pass, built as
    tape nodes so the penalty differentiates through it. Returns the total
    loss node, its tape, and the named parameter gradient nodes' tape.
    """
    for layer in model.layers:
        if layer.kind not in DOUBLE_DIFF_LAYERS:
            raise UnsupportedOps(
                f"gradient-alignment training needs dense/softplus models, "
                f"got layer kind {layer.kind!r}")
    x_in, latent_only, g_clean = _slat_passes(model, x, y, spec, clamp)

    logits, _, tape = forward_with_latents(model, x_in, latent_only)
    adv_loss = tape.record("loss_softmax_xent", [logits], labels=np.asarray(y),
                           reduction="mean")
    adjoints = backward(tape, adv_loss, as_graph=True)
    g_adv = adjoints[tape.input.idx]

    gc = tape.leaf(g_clean)
    gc_norm = tape.leaf(np.linalg.norm(g_clean.reshape(len(x), -1), axis=1))
    num = tape.record("rows_dot", [gc, g_adv])
    ga_norm = tape.record("sqrt", [tape.record("rows_dot", [g_adv, g_adv])])
    cos = tape.record("div", [num, tape.record("mul", [gc_norm, ga_norm])])
    omega = tape.record("mean_all", [cos])
    penalty = tape.record("scale",
                          [tape.record("sub", [tape.leaf(1.0), omega])],
                          c=spec.lambda_ga)
    total = tape.record("add", [adv_loss, penalty])
    return total, tape


def slat_fast_ga_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    total, tape = fast_ga_loss(model, x, y, spec, clamp)
    backward(tape, total)
    grads = {name: tape.grads[node.idx] for name, node in tape.params.items()}
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return float(total.value)


def fgsm_rs_latent_step(model, x, y, spec, state, lr, clamp=None, step_seed=0):
    """Random-start input adversary combined with clean-derived latent deltas."""
    x_adv = r_fgsm(model, x, y, spec.epsilon, 1.25 * spec.epsilon, clamp,
                   seed=step_seed)
    _, latent_only, _ = _slat_passes(model, x, y, spec, clamp=None)
    loss, grads, _ = _mean_loss_and_grads(model, x_adv, y, latent_only)
    sgd_update(model.parameters(), grads, state, lr, spec.momentum,
               spec.weight_decay)
    return loss


_STEP_FNS = {
    "standard": standard_step,
    "fgsm_at": fgsm_at_step,
    "fgsm_rs": fgsm_rs_step,
    "pgd_at": pgd_at_step,
    "slat": slat_step,
    "slat_fast_ga": slat_fast_ga_step,
    "fgsm_rs_latent": fgsm_rs_latent_step,
}


def evaluate_checkpoint(model, xs, ys, spec, ev, step, epoch, lr, clamp=None):
    """One MetricRecord: accuracy, attack robustness, and linearity probes."""
    eps = ev.epsilon if ev.epsilon is not None else spec.epsilon
    alpha = ev.alpha if ev.alpha is not None else 2 * eps / 10
    x_adv = pgd(model, xs, ys, eps, alpha, ev.attack_steps, ev.attack_restarts,
                clamp, seed=ev.seed)
    xa, ya = xs[:ev.align_n], ys[:ev.align_n]
    return metrics_mod.MetricRecord(
        step=step,
        epoch=epoch,
        clean_acc=metrics_mod.accuracy(model, xs, ys),
        pgd_acc=metrics_mod.accuracy(model, x_adv, ys),
        adv_loss=metrics_mod.mean_xent(model, x_adv, ys),
        grad_align=metrics_mod.grad_alignment(model, xa, ya, eps, seed=ev.seed),
        l1_grad_norms=metrics_mod.feature_grad_l1(model, xa, ya),
        logits_l2=metrics_mod.logits_l2_distance(model, xa, ya, eps,
                                                 seed=ev.seed, clamp=clamp),
        lr=lr,
    )


def train(model, dataset, spec, sinks=(), eval_data=None, eval_settings=None):
    """Run the configured method; returns (model, records).

    Deterministic for a fixed spec.seed: shuffling, attack noise, and eval
    subsampling all derive from it. Emits one record every
    `spec.checkpoint_every` steps (plus a final one) through `sinks`, and
    raises NonFiniteGradient after flushing if an update blows up.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    ev = eval_settings or EvalSettings()
    clamp = dataset.input_scale
    rng = np.random.default_rng(spec.seed)
    steps_per_epoch = math.ceil(n / spec.batch)
    total_steps = spec.epochs * steps_per_epoch
    every = spec.checkpoint_every or steps_per_epoch
    step_fn = _STEP_FNS[spec.method]

    src = eval_data if eval_data is not None else dataset
    pick = np.random.default_rng((spec.seed, 7919))
    idx = pick.permutation(len(src))[:ev.n_eval]
    exs, eys = src.xs[idx], src.ys[idx]

    state = init_optimizer(model)
    records = []

    def emit(step):
        lr = cyclic_lr(step, total_steps, spec.lr_max, spec.peak_fraction)
        rec = evaluate_checkpoint(model, exs, eys, spec, ev, step,
                                  step / steps_per_epoch, lr, clamp)
        records.append(rec)
        for sink in sinks:
            sink(rec)

    step = 0
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, spec.batch):
            sel = order[lo:lo + spec.batch]
            xb, yb = dataset.xs[sel], dataset.ys[sel]
            if spec.augment_pad:
                xb = augment_pad_crop(xb, spec.augment_pad, rng)
            if step % every == 0:
                emit(step)
            lr = cyclic_lr(step, total_steps, spec.lr_max, spec.peak_fraction)
            loss = step_fn(model, xb, yb, spec, state, lr, clamp,
                           step_seed=(spec.seed, step))
            if not np.isfinite(loss):
                raise NonFiniteGradient(f"non-finite loss at step {step}")
            step += 1
    emit(total_steps)
    return model, records
