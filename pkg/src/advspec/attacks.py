"""Untargeted adversarial attacks against the small CNN.

Five methods: the one-step fast gradient sign method, its iterated variant
with per-step ball clipping, the random-start projected variant, an
iterative minimal-perturbation boundary attack, and an L2-minimizing
optimization attack with a tanh change of variables and binary search over
the trade-off constant. All attacks ascend the true-label cross-entropy
(or the logit margin) and are deterministic given their config and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import nn
from .nn import as_f64

METHODS = ("fgsm", "bim", "pgd", "deepfool", "cw")
_EPS_METHODS = ("fgsm", "bim", "pgd")


@dataclass
class AttackConfig:
    method: str
    epsilon: float | None = None      # L-inf budget, fgsm/bim/pgd only
    alpha: float | None = None        # step size for bim/pgd
    iterations: int | None = None
    overshoot: float = 0.02           # deepfool
    cw_c_init: float = 1e-3
    cw_binary_steps: int = 9
    cw_inner_steps: int = 1000
    cw_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.method in _EPS_METHODS:
            if self.epsilon is None:
                raise ValueError(f"{self.method} requires an epsilon budget")
            if not 0.0 <= self.epsilon <= 1.0:
                raise ValueError(f"epsilon {self.epsilon} outside [0, 1]")
            if self.method == "bim" and self.iterations is None:
                self.iterations = 10
            if self.method == "pgd" and self.iterations is None:
                self.iterations = 40
            if self.alpha is None:
                if self.method == "bim":
                    self.alpha = 0.2 * self.epsilon
                elif self.method == "pgd":
                    self.alpha = self.epsilon / 10.0
        else:
            if self.epsilon is not None:
                raise ValueError(f"{self.method} does not take an epsilon budget")
            if self.method == "deepfool" and self.iterations is None:
                self.iterations = 50
        for name in ("iterations", "cw_binary_steps", "cw_inner_steps"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray
    true_label: int
    original_pred: int
    adversarial_pred: int
    success: bool
    l_inf: float
    l2: float
    iterations_used: int


@dataclass
class AttackSummary:
    attempts: int
    successes: int
    success_rate: float | None  # None when there were no attempts


def _finish(params, original, adversarial, true_label, original_pred,
            iterations_used) -> AttackResult:
    """Assemble a result; success comes from a fresh prediction on the output."""
    adversarial = np.clip(adversarial, 0.0, 1.0)
    _, pred = model_mod.predict(params, adversarial)
    diff = adversarial - original
    return AttackResult(
        original=original, adversarial=adversarial, true_label=int(true_label),
        original_pred=int(original_pred), adversarial_pred=pred,
        success=pred != int(true_label),
        l_inf=float(np.abs(diff).max()) if diff.size else 0.0,
        l2=float(np.sqrt((diff * diff).sum())),
        iterations_used=int(iterations_used))


def _check_images(params, images) -> np.ndarray:
    images = as_f64(images)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("attack inputs must lie in [0,1]")
    return images


def _signed_grads(params, images, labels) -> np.ndarray:
    _, grads = model_mod.input_loss_gradients(params, images, labels)
    if not np.isfinite(grads).all():
        raise ValueError("non-finite loss gradient")
    return np.sign(grads)


# ---------------------------------------------------------------------------
# batched cores
# ---------------------------------------------------------------------------

def _fgsm_batch(params, images, labels, epsilon) -> np.ndarray:
    adv = images + epsilon * _signed_grads(params, images, labels)
    return np.clip(adv, 0.0, 1.0)


def _bim_batch(params, images, labels, epsilon, alpha, iterations,
               start=None) -> np.ndarray:
    lo = np.clip(images - epsilon, 0.0, 1.0)
    hi = np.clip(images + epsilon, 0.0, 1.0)
    adv = images.copy() if start is None else start
    for _ in range(iterations):
        adv = adv + alpha * _signed_grads(params, adv, labels)
        adv = np.clip(adv, lo, hi)  # ball and box clip after every step
    return adv


def _pgd_starts(images, epsilon, seed) -> np.ndarray:
    """Uniform random starts; sample i uses seed XOR i so batching order is moot."""
    starts = np.empty_like(images)
    for i in range(len(images)):
        rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(i))
        starts[i] = images[i] + rng.uniform(-epsilon, epsilon, size=images[i].shape)
    return np.clip(starts, 0.0, 1.0)


def _cw_batch(params, images, labels, cfg: AttackConfig):
    """L2 attack: minimize ||adv - x||^2 + c * max(z_true - max_other, 0) in
    tanh space, with per-sample binary search over c.

    Returns (adversarial, found, iterations_used) arrays; samples without a
    successful attack come back as the unmodified original.
    """
    n = len(images)
    labels = np.asarray(labels)
    layers = params.layers()
    nudge = 1e-6  # keeps arctanh finite at exact 0/1 pixels
    w0 = np.arctanh(2.0 * np.clip(images, nudge, 1.0 - nudge) - 1.0)

    idx = np.arange(n)
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    c = np.full(n, cfg.cw_c_init)
    best_adv = images.copy()
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    iterations_used = np.zeros(n, dtype=np.int64)

    # inputs the model already misclassifies succeed with zero perturbation
    pre_pred = model_mod.predict_batch(params, images)
    done = pre_pred != labels
    found |= done
    best_l2[done] = 0.0

    active = ~done
    for _ in range(cfg.cw_binary_steps):
        if not active.any():
            break
        w = w0.copy()
        round_success = np.zeros(n, dtype=bool)
        dead = ~active
        for _ in range(cfg.cw_inner_steps):
            adv = 0.5 * (np.tanh(w) + 1.0)
            logits, caches = nn.chain_forward(layers, adv)
            z_true = logits[idx, labels]
            masked = logits.copy()
            masked[idx, labels] = -np.inf
            runner = masked.argmax(axis=1)
            margin = z_true - masked[idx, runner]
            pred = logits.argmax(axis=1)
            succeeded = (pred != labels) & ~dead
            l2sq = ((adv - images) ** 2).reshape(n, -1).sum(axis=1)
            improved = succeeded & (l2sq < best_l2)
            best_adv[improved] = adv[improved]
            best_l2[improved] = l2sq[improved]
            found |= improved
            round_success |= succeeded
            iterations_used += ~dead

            dlogits = np.zeros_like(logits)
            pushing = (margin > 0) & ~dead
            dlogits[idx[pushing], labels[pushing]] = c[pushing]
            dlogits[idx[pushing], runner[pushing]] = -c[pushing]
            dadv, _ = nn.chain_backward(layers, caches, dlogits, need_param_grads=False)
            dadv += 2.0 * (adv - images)
            dw = dadv * 0.5 * (1.0 - np.tanh(w) ** 2)
            bad = ~np.isfinite(dw.reshape(n, -1)).all(axis=1)
            if bad.any():
                dead |= bad  # abort this round for the affected samples
                dw[dead] = 0.0
            dw[dead] = 0.0
            w -= cfg.cw_lr * dw

        hit = round_success & active
        miss = active & ~round_success
        upper[hit] = np.minimum(upper[hit], c[hit])
        c[hit] = 0.5 * (lower[hit] + upper[hit])
        lower[miss] = np.maximum(lower[miss], c[miss])
        has_upper = miss & np.isfinite(upper)
        c[has_upper] = 0.5 * (lower[has_upper] + upper[has_upper])
        c[miss & ~np.isfinite(upper)] *= 10.0

    best_l2 = np.sqrt(np.where(np.isfinite(best_l2), best_l2, 0.0))
    adv_out = np.where(found[:, None, None, None], best_adv, images)
    return adv_out, found, iterations_used


# ---------------------------------------------------------------------------
# public single-sample attacks
# ---------------------------------------------------------------------------

def fgsm(params, image, label, epsilon) -> AttackResult:
    """One-step sign attack: adv = clip(x + epsilon * sign(d loss / d x))."""
    image = _check_images(params, image[None] if np.asarray(image).ndim == 3 else image)[0]
    _, orig_pred = model_mod.predict(params, image)
    adv = _fgsm_batch(params, image[None], np.array([label]), epsilon)[0]
    return _finish(params, image, adv, label, orig_pred, 1)


def bim(params, image, label, epsilon, alpha=None, iterations=10) -> AttackResult:
    """Iterated sign steps, clipped to the epsilon ball and [0,1] every step."""
    if alpha is None:
        alpha = 0.2 * epsilon
    if alpha > epsilon:
        raise ValueError(f"step size {alpha} exceeds budget {epsilon}")
    image = _check_images(params, np.asarray(image)[None])[0]
    _, orig_pred = model_mod.predict(params, image)
    adv = _bim_batch(params, image[None], np.array([label]), epsilon, alpha, iterations)[0]
    return _finish(params, image, adv, label, orig_pred, iterations)


def pgd(params, image, label, epsilon, alpha=None, iterations=40, seed=0) -> AttackResult:
    """BIM from a uniform random start inside the epsilon ball."""
    if alpha is None:
        alpha = epsilon / 10.0
    if alpha > epsilon:
        raise ValueError(f"step size {alpha} exceeds budget {epsilon}")
    image = _check_images(params, np.asarray(image)[None])[0]
    _, orig_pred = model_mod.predict(params, image)
    start = _pgd_starts(image[None], epsilon, seed)
    adv = _bim_batch(params, image[None], np.array([label]), epsilon, alpha,
                     iterations, start=start)[0]
    return _finish(params, image, adv, label, orig_pred, iterations)


def deepfool(params, image, label, overshoot=0.02, max_iterations=50) -> AttackResult:
    """Iteratively step to the nearest linearized decision boundary.

    Per iteration the logit differences are linearized around the current
    point, the minimal-L2 step to the closest boundary is accumulated, and
    the total perturbation is applied scaled by (1 + overshoot). Stops at the
    first label flip.
    """
    if params.config.num_classes < 2:
        raise ValueError("deepfool needs at least 2 classes")
    image = _check_images(params, np.asarray(image)[None])[0]
    _, orig_pred = model_mod.predict(params, image)
    if orig_pred != label:
        return _finish(params, image, image.copy(), label, orig_pred, 0)

    num_classes = params.config.num_classes
    others = [k for k in range(num_classes) if k != label]
    rows = np.zeros((len(others), num_classes))
    for r, k in enumerate(others):
        rows[r, k] = 1.0
        rows[r, label] = -1.0

    r_total = np.zeros_like(image)
    adv = image
    used = 0
    for it in range(1, max_iterations + 1):
        logits, grads = model_mod.logit_input_gradients(params, adv, rows)
        if int(np.argmax(logits)) != label:
            break
        norms = np.sqrt((grads.reshape(len(others), -1) ** 2).sum(axis=1))
        diffs = np.array([logits[k] - logits[label] for k in others])
        if np.all(norms < 1e-12):
            raise ValueError("zero logit-difference gradient for every candidate class")
        with np.errstate(divide="ignore"):
            ratio = np.where(norms > 1e-12, np.abs(diffs) / norms, np.inf)
        pick = int(np.argmin(ratio))
        r_total = r_total + (np.abs(diffs[pick]) / norms[pick] ** 2) * grads[pick]
        adv = np.clip(image + (1.0 + overshoot) * r_total, 0.0, 1.0)
        used = it
    return _finish(params, image, adv, label, orig_pred, used)


def carlini_wagner_l2(params, image, label, config: AttackConfig) -> AttackResult:
    """L2-minimizing attack; returns the lowest-L2 successful example found."""
    if config.method != "cw":
        raise ValueError(f"config method {config.method!r} is not 'cw'")
    image = _check_images(params, np.asarray(image)[None])[0]
    _, orig_pred = model_mod.predict(params, image)
    adv, found, used = _cw_batch(params, image[None], np.array([label]), config)
    return _finish(params, image, adv[0], label, orig_pred, used[0])


# ---------------------------------------------------------------------------
# batch driver
# ---------------------------------------------------------------------------

def attack_batch(params, images, labels, config: AttackConfig):
    """Attack every (image, label) pair; keep only the successful results.

    Inputs must already be correctly classified. Returns (successes, summary)
    where the summary counts all attempts; an empty input yields a None rate.
    """
    images = _check_images(params, as_f64(images))
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        return [], AttackSummary(attempts=0, successes=0, success_rate=None)
    preds = model_mod.predict_batch(params, images)
    if np.any(preds != labels):
        bad = int(np.flatnonzero(preds != labels)[0])
        raise ValueError(f"input {bad} is not correctly classified (pred {preds[bad]}, label {labels[bad]})")

    method = config.method
    used = None
    if method == "fgsm":
        adv = _fgsm_batch(params, images, labels, config.epsilon)
        used = np.ones(len(images), dtype=np.int64)
    elif method == "bim":
        if config.alpha > config.epsilon:
            raise ValueError(f"step size {config.alpha} exceeds budget {config.epsilon}")
        adv = _bim_batch(params, images, labels, config.epsilon, config.alpha,
                         config.iterations)
        used = np.full(len(images), config.iterations, dtype=np.int64)
    elif method == "pgd":
        if config.alpha > config.epsilon:
            raise ValueError(f"step size {config.alpha} exceeds budget {config.epsilon}")
        start = _pgd_starts(images, config.epsilon, config.seed)
        adv = _bim_batch(params, images, labels, config.epsilon, config.alpha,
                         config.iterations, start=start)
        used = np.full(len(images), config.iterations, dtype=np.int64)
    elif method == "cw":
        adv, _, used = _cw_batch(params, images, labels, config)
    else:  # deepfool: per-sample early exit, so no batching
        results = [deepfool(params, images[i], int(labels[i]),
                            overshoot=config.overshoot,
                            max_iterations=config.iterations)
                   for i in range(len(images))]
        return _summarize(results)

    results = [_finish(params, images[i], adv[i], int(labels[i]), int(preds[i]),
                       int(used[i]))
               for i in range(len(images))]
    return _summarize(results)


def _summarize(results):
    successes = [r for r in results if r.success]
    return successes, AttackSummary(attempts=len(results), successes=len(successes),
                                    success_rate=len(successes) / len(results))
