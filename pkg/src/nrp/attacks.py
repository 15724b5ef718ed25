"""Feature-space and label-space attacks under an l-infinity budget.

The self-supervised attack ascends the feature distortion of a frozen
extractor at a chosen tap: no labels or task loss anywhere, so the
perturbation is model- and task-agnostic.  The supervised baselines
(fgsm, rfgsm, ifgsm, mifgsm, dim) ascend cross-entropy on the attacked
classifier.  All methods share one projection contract: clip to the
epsilon ball around the clean image, then to the valid pixel range.

Every attack is a deterministic function of (inputs, spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .networks import NetworkDef, forward, truncate_at
from .rng import SeededRng
from .tensor import Tape, Tensor, as_tensor

METHODS = ("fgsm", "rfgsm", "ifgsm", "mifgsm", "dim", "ssp", "bpda_ssp")
METRICS = ("mae", "l2", "cosine")


class AttackError(RuntimeError):
    """Invalid attack specification or a diverged attack run."""


@dataclass(frozen=True)
class AttackSpec:
    """Everything that determines one attack run.

    ``epsilon`` and ``step`` are on the [0, 1] pixel scale.  ``tap`` and
    ``metric`` matter for the feature-space methods only; ``momentum`` for
    mifgsm/dim; ``diversity_prob`` for dim.  ``rand_init_scale`` sizes the
    random first step of ssp as a fraction of epsilon.
    """

    method: str
    epsilon: float
    step: float
    iters: int = 10
    momentum: float = 1.0
    diversity_prob: float = 0.7
    tap: str | None = None
    metric: str = "mae"
    seed: int = 0
    rand_init_scale: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttackError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.metric not in METRICS:
            raise AttackError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.epsilon < 0:
            raise AttackError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon > 0 and not 0 < self.step <= self.epsilon:
            raise AttackError(f"step must satisfy 0 < step <= epsilon, got step={self.step} eps={self.epsilon}")
        if self.iters < 0:
            raise AttackError(f"iters must be >= 0, got {self.iters}")
        if not 0.0 <= self.diversity_prob <= 1.0:
            raise AttackError(f"diversity_prob must lie in [0, 1], got {self.diversity_prob}")
        if self.momentum < 0:
            raise AttackError(f"momentum must be >= 0, got {self.momentum}")

    def digest(self) -> str:
        """Stable provenance string for reports and logs."""
        parts = [f"method={self.method}", f"eps={self.epsilon:.6g}", f"step={self.step:.6g}",
                 f"iters={self.iters}", f"seed={self.seed}"]
        if self.method in ("mifgsm", "dim"):
            parts.append(f"mu={self.momentum:.6g}")
        if self.method == "dim":
            parts.append(f"p={self.diversity_prob:.6g}")
        if self.method in ("ssp", "bpda_ssp"):
            parts.append(f"tap={self.tap}")
            parts.append(f"metric={self.metric}")
        return ",".join(parts)


# ---------------------------------------------------------------------------
# Feature distortion (the self-supervision signal)


def _distance(ref: Tensor, feats: Tensor, metric: str) -> Tensor:
    if metric == "mae":
        return T.mean(T.absolute(T.sub(feats, ref)))
    reduce_axes = tuple(range(1, len(ref.shape)))
    if metric == "l2":
        d = T.sub(feats, ref)
        return T.mean(T.sqrt(T.tsum(T.mul(d, d), axis=reduce_axes)))
    if metric == "cosine":
        dot = T.tsum(T.mul(feats, ref), axis=reduce_axes)
        nf = T.sqrt(T.tsum(T.mul(feats, feats), axis=reduce_axes))
        nr = T.sqrt(T.tsum(T.mul(ref, ref), axis=reduce_axes))
        denom = T.add(T.mul(nf, nr), Tensor(np.asarray(1e-12, dtype=ref.dtype)))
        return T.mean(T.sub(Tensor(np.ones_like(dot.data)), T.div(dot, denom)))
    raise AttackError(f"unknown metric {metric!r}")


def feature_distortion(extractor: NetworkDef, x, x_adv, tap: str | None = None,
                       metric: str = "mae") -> Tensor:
    """Distance between tap activations of two batches; differentiable
    w.r.t. whatever is on the active tape."""
    tap = tap or extractor.meta.get("default_tap")
    x, x_adv = as_tensor(x), as_tensor(x_adv)
    if x.shape != x_adv.shape:
        raise AttackError(f"feature_distortion: shape mismatch {x.shape} vs {x_adv.shape}")
    _, taps_a = forward(extractor, x, taps=(tap,))
    _, taps_b = forward(extractor, x_adv, taps=(tap,))
    return _distance(taps_a[tap], taps_b[tap], metric)


def feature_distortion_per_sample(extractor: NetworkDef, x, x_adv, tap: str | None = None,
                                  metric: str = "mae") -> np.ndarray:
    """Per-image distortion values (evaluation helper, never taped)."""
    tap = tap or extractor.meta.get("default_tap")
    _, ta = forward(extractor, as_tensor(x), taps=(tap,))
    _, tb = forward(extractor, as_tensor(x_adv), taps=(tap,))
    a, b = ta[tap].data, tb[tap].data
    axes = tuple(range(1, a.ndim))
    if metric == "mae":
        return np.abs(b - a).mean(axis=axes)
    if metric == "l2":
        return np.sqrt(((b - a) ** 2).sum(axis=axes))
    if metric == "cosine":
        dot = (a * b).sum(axis=axes)
        return 1.0 - dot / (np.linalg.norm(a.reshape(len(a), -1), axis=1)
                            * np.linalg.norm(b.reshape(len(b), -1), axis=1) + 1e-12)
    raise AttackError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# Projection


def linf_project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Clip into the epsilon ball around x, then into the valid range [0, 1]."""
    if epsilon < 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}")
    if x_adv.shape != x.shape:
        raise AttackError(f"linf_project: shape mismatch {x_adv.shape} vs {x.shape}")
    eps = np.asarray(epsilon, dtype=x.dtype)
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _grad_of(tape: Tape, loss: Tensor, leaf: Tensor, what: str) -> np.ndarray:
    g = tape.backward(loss)[leaf]
    if not np.isfinite(g).all():
        raise AttackError(f"non-finite gradient during {what}")
    return g


def _l1_normalize(g: np.ndarray) -> np.ndarray:
    """Per-image l1 normalization over the whole image tensor; zero stays zero."""
    l1 = np.abs(g).sum(axis=tuple(range(1, g.ndim)), keepdims=True)
    out = np.zeros_like(g)
    np.divide(g, l1, out=out, where=l1 > 0)
    return out


# ---------------------------------------------------------------------------
# Self-supervised perturbation


def ssp_attack(extractor: NetworkDef, x: np.ndarray, spec: AttackSpec,
               rand_magnitude: float | None = None) -> np.ndarray:
    """Iterative sign ascent on the feature distortion of a frozen extractor.

    The first step is random: uniform noise of magnitude
    ``rand_init_scale * epsilon`` (overridable), projected into the budget.
    No labels and no task loss are consulted at any point.
    """
    if spec.method not in ("ssp", "bpda_ssp"):
        raise AttackError(f"ssp_attack needs an ssp spec, got {spec.method!r}")
    x = np.asarray(x)
    rng = SeededRng(spec.seed)
    mag = spec.rand_init_scale * spec.epsilon if rand_magnitude is None else rand_magnitude
    x_adv = linf_project(x + rng.uniform(x.shape, -mag, mag, dtype=x.dtype), x, spec.epsilon)

    tap = spec.tap or extractor.meta.get("default_tap")
    trunk = truncate_at(extractor, tap)
    ref = Tensor(forward(trunk, Tensor(x)).data)
    for _ in range(spec.iters):
        with Tape() as tape:
            leaf = Tensor(x_adv, requires_grad=True)
            delta = _distance(ref, forward(trunk, leaf), spec.metric)
        g = _grad_of(tape, delta, leaf, "ssp_attack")
        x_adv = linf_project(x_adv + np.asarray(spec.step, dtype=x.dtype) * np.sign(g), x, spec.epsilon)
    return x_adv


# ---------------------------------------------------------------------------
# Supervised baselines


def _cross_entropy_grad(classifier: NetworkDef, x_adv: np.ndarray, labels: np.ndarray,
                        transform=None, what: str = "attack") -> np.ndarray:
    with Tape() as tape:
        leaf = Tensor(x_adv, requires_grad=True)
        inp = transform(leaf) if transform is not None else leaf
        loss = T.softmax_cross_entropy(forward(classifier, inp), labels)
    return _grad_of(tape, loss, leaf, what)


def fgsm(classifier: NetworkDef, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Single step of size epsilon along the loss-gradient sign."""
    x = np.asarray(x)
    g = _cross_entropy_grad(classifier, x, labels, what="fgsm")
    return linf_project(x + np.asarray(spec.epsilon, dtype=x.dtype) * np.sign(g), x, spec.epsilon)


def rfgsm(classifier: NetworkDef, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Random step of size epsilon/3, then a gradient step of the remainder."""
    x = np.asarray(x)
    rng = SeededRng(spec.seed)
    alpha = spec.epsilon / 3.0
    x_adv = np.clip(x + np.asarray(alpha, dtype=x.dtype) * np.sign(rng.normal(x.shape, dtype=x.dtype)), 0.0, 1.0)
    g = _cross_entropy_grad(classifier, x_adv, labels, what="rfgsm")
    return linf_project(x_adv + np.asarray(spec.epsilon - alpha, dtype=x.dtype) * np.sign(g), x, spec.epsilon)


def ifgsm(classifier: NetworkDef, x: np.ndarray, labels: np.ndarray, spec: AttackSpec) -> np.ndarray:
    """Iterative fgsm: T sign steps of size step, each followed by projection."""
    x = np.asarray(x)
    x_adv = x.copy()
    for _ in range(spec.iters):
        g = _cross_entropy_grad(classifier, x_adv, labels, what="ifgsm")
        x_adv = linf_project(x_adv + np.asarray(spec.step, dtype=x.dtype) * np.sign(g), x, spec.epsilon)
    return x_adv


def mifgsm(classifier: NetworkDef, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
           trace: dict | None = None) -> np.ndarray:
    """Momentum iterative fgsm: accumulate l1-normalized gradients with decay
    ``momentum``, then step along the accumulator's sign.

    ``trace`` (optional) collects per-iteration raw gradients and momentum
    for oracle verification.
    """
    x = np.asarray(x)
    x_adv = x.copy()
    g_acc = np.zeros_like(x)
    for _ in range(spec.iters):
        g = _cross_entropy_grad(classifier, x_adv, labels, what="mifgsm")
        g_acc = spec.momentum * g_acc + _l1_normalize(g)
        if trace is not None:
            trace.setdefault("gradients", []).append(g.copy())
            trace.setdefault("momentum", []).append(g_acc.copy())
        x_adv = linf_project(x_adv + np.asarray(spec.step, dtype=x.dtype) * np.sign(g_acc), x, spec.epsilon)
    return x_adv


def input_diversity_transform(x, prob: float, seed) -> Tensor:
    """With probability ``prob``: random nearest-neighbour shrink to
    [0.85, 1.0] of the original extent, zero-padded back at a random
    offset.  Differentiable; identity otherwise."""
    x = as_tensor(x)
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    if float(rng.uniform(())) >= prob:
        return x
    n, c, h, w = x.shape
    s = float(rng.uniform((), 0.85, 1.0))
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    top = int(rng.integers(0, h - nh + 1))
    left = int(rng.integers(0, w - nw + 1))
    return T.pad2d(T.resize_nearest(x, nh, nw), top, h - nh - top, left, w - nw - left)


def dim(classifier: NetworkDef, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
        trace: dict | None = None) -> np.ndarray:
    """Diverse-input mifgsm: the diversity transform precedes each gradient
    evaluation with probability ``diversity_prob``."""
    x = np.asarray(x)
    rng = SeededRng(spec.seed)
    x_adv = x.copy()
    g_acc = np.zeros_like(x)
    for _ in range(spec.iters):
        g = _cross_entropy_grad(classifier, x_adv, labels,
                                transform=lambda t: input_diversity_transform(t, spec.diversity_prob, rng),
                                what="dim")
        g_acc = spec.momentum * g_acc + _l1_normalize(g)
        if trace is not None:
            trace.setdefault("momentum", []).append(g_acc.copy())
        x_adv = linf_project(x_adv + np.asarray(spec.step, dtype=x.dtype) * np.sign(g_acc), x, spec.epsilon)
    return x_adv


# ---------------------------------------------------------------------------
# Adaptive attack through the defense


def bpda_attack(purifier: NetworkDef, model: NetworkDef, x: np.ndarray, spec: AttackSpec,
                labels: np.ndarray | None = None) -> np.ndarray:
    """Attack the purified pipeline, substituting an identity gradient for
    the purifier (straight-through backward).

    The forward pass routes through purifier -> model; ``spec.method``
    selects the objective: ``bpda_ssp``/``ssp`` maximizes feature
    distortion of ``model`` (an extractor) against the clean reference,
    ``fgsm``/``ifgsm``/``mifgsm`` ascend cross-entropy on ``model`` (a
    classifier) and need labels.
    """
    x = np.asarray(x)
    feature_mode = spec.method in ("ssp", "bpda_ssp")
    if not feature_mode and spec.method not in ("fgsm", "ifgsm", "mifgsm"):
        raise AttackError(f"bpda_attack does not support base method {spec.method!r}")
    if not feature_mode and labels is None:
        raise AttackError("bpda_attack with a cross-entropy base needs labels")

    if feature_mode:
        rng = SeededRng(spec.seed)
        mag = spec.rand_init_scale * spec.epsilon
        x_adv = linf_project(x + rng.uniform(x.shape, -mag, mag, dtype=x.dtype), x, spec.epsilon)
        tap = spec.tap or model.meta.get("default_tap")
        trunk = truncate_at(model, tap)
        ref = Tensor(forward(trunk, Tensor(x)).data)
    else:
        x_adv = x.copy()

    iters = spec.iters if spec.method != "fgsm" else 1
    step = spec.step if spec.method != "fgsm" else spec.epsilon
    g_acc = np.zeros_like(x)
    for _ in range(iters):
        purified = np.clip(forward(purifier, Tensor(x_adv)).data, 0.0, 1.0)
        with Tape() as tape:
            leaf = Tensor(purified, requires_grad=True)
            if feature_mode:
                loss = _distance(ref, forward(trunk, leaf), spec.metric)
            else:
                loss = T.softmax_cross_entropy(forward(model, leaf), labels)
        g = _grad_of(tape, loss, leaf, "bpda_attack")  # identity backward through purifier
        if spec.method == "mifgsm":
            g_acc = spec.momentum * g_acc + _l1_normalize(g)
            direction = np.sign(g_acc)
        else:
            direction = np.sign(g)
        x_adv = linf_project(x_adv + np.asarray(step, dtype=x.dtype) * direction, x, spec.epsilon)
    return x_adv


# ---------------------------------------------------------------------------
# Dispatcher


def run_attack(spec: AttackSpec, x: np.ndarray, labels: np.ndarray | None = None,
               extractor: NetworkDef | None = None, classifier: NetworkDef | None = None,
               purifier: NetworkDef | None = None) -> np.ndarray:
    """Route a spec to its implementation, validating the required context."""
    if spec.method in ("ssp", "bpda_ssp") and extractor is None:
        raise AttackError(f"{spec.method} needs a feature extractor")
    if spec.method in ("fgsm", "rfgsm", "ifgsm", "mifgsm", "dim") and (classifier is None or labels is None):
        raise AttackError(f"{spec.method} needs a classifier and labels")
    if spec.method == "bpda_ssp":
        if purifier is None:
            raise AttackError("bpda_ssp needs the purifier under attack")
        return bpda_attack(purifier, extractor, x, spec)
    if spec.method == "ssp":
        return ssp_attack(extractor, x, spec)
    fn = {"fgsm": fgsm, "rfgsm": rfgsm, "ifgsm": ifgsm, "mifgsm": mifgsm, "dim": dim}[spec.method]
    return fn(classifier, x, labels, spec)
