"""Purifier training: hybrid loss, critic updates, ablations.

The loop follows the adversarial-training recipe: sample a clean batch,
manufacture adversaries against the frozen extractor at a sampled budget,
step the purifier on the weighted sum of relativistic-GAN, pixel and
feature losses, then step the critic to separate clean images from
purified ones.  Everything is driven by one explicit seed; two runs with
the same config produce bit-identical parameters.

Also hosts the small supervised trainer used to fit the extractor and the
toy classifier before they are frozen.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, feature_distortion, fgsm, linf_project, ssp_attack
from .data import Dataset, random_crop
from .networks import NetworkDef, forward, truncate_at
from .optim import Adam
from .rng import SeededRng
from .tensor import Tape, Tensor


class TrainingError(RuntimeError):
    """Diverged or mis-configured training run."""


ABLATIONS = ("full", "no-feat", "no-pixel", "vanilla-gan", "gaussian-purifier", "fgsm-purifier")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the hybrid objective: total = alpha*adv + gamma*img + lam*feat."""

    alpha: float = 5e-3
    gamma: float = 1e-2
    lam: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.gamma, self.lam) < 0:
            raise TrainingError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 16
    crop: int = 16
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    weights: LossWeights = LossWeights()
    ablation: str = "full"
    tap: str | None = None
    metric: str = "mae"
    adv_iters: int = 5
    adv_step_scale: float = 2.0           # training-attack step = scale * eps / iters
    eps_choices: tuple = (4 / 255, 8 / 255, 12 / 255, 16 / 255)
    rand_init_scale: float = 0.5
    seed: int = 0
    relativistic_average: bool = True     # batch-mean relativized scores; pairwise when False

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainingError("batch size must be >= 2 (critic batch-norm)")
        if self.ablation not in ABLATIONS:
            raise TrainingError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")

    def effective_weights(self) -> LossWeights:
        if self.ablation == "no-feat":
            return replace(self.weights, lam=0.0)
        if self.ablation == "no-pixel":
            return replace(self.weights, gamma=0.0)
        return self.weights

    def adversary_mode(self) -> str:
        return {"gaussian-purifier": "gaussian", "fgsm-purifier": "fgsm"}.get(self.ablation, "ssp")


# ---------------------------------------------------------------------------
# Loss functions


def loss_feat(extractor: NetworkDef, x, x_purified, tap: str | None = None,
              metric: str = "mae") -> Tensor:
    """Feature distortion between clean and purified batches; the single
    source of truth is the attack-side implementation."""
    return feature_distortion(extractor, x, x_purified, tap, metric)


def loss_img(x_purified, x) -> Tensor:
    """Pixel-space l2: per-image root-sum-square difference, mean over batch."""
    a, b = T.as_tensor(x_purified), T.as_tensor(x)
    if a.shape != b.shape:
        raise TrainingError(f"loss_img: shape mismatch {a.shape} vs {b.shape}")
    d = T.sub(a, b)
    return T.mean(T.sqrt(T.tsum(T.mul(d, d), axis=tuple(range(1, len(a.shape))))))


def loss_adv_from_scores(scores_real: Tensor, scores_fake: Tensor,
                         relativistic_average: bool = True) -> Tensor:
    """Generator-side relativistic loss: -log sigmoid(fake - reference-real),
    averaged over the fake batch.  Equal scores give ln 2."""
    if relativistic_average:
        rel = T.sub(scores_fake, T.mean(scores_real))
    else:
        rel = T.sub(scores_fake, scores_real)
    return T.mean(T.softplus(T.scale(rel, -1.0)))


def critic_loss_from_scores(scores_real: Tensor, scores_fake: Tensor,
                            relativistic_average: bool = True) -> Tensor:
    """Relativistic-average discriminator objective; equal scores give 2 ln 2,
    perfectly separated scores drive it to zero."""
    if relativistic_average:
        real_rel = T.sub(scores_real, T.mean(scores_fake))
        fake_rel = T.sub(scores_fake, T.mean(scores_real))
    else:
        real_rel = T.sub(scores_real, scores_fake)
        fake_rel = T.sub(scores_fake, scores_real)
    return T.add(T.mean(T.softplus(T.scale(real_rel, -1.0))),
                 T.mean(T.softplus(fake_rel)))


def vanilla_gen_loss_from_scores(scores_fake: Tensor) -> Tensor:
    """Non-saturating vanilla GAN generator loss: -log sigmoid(C(fake))."""
    return T.mean(T.softplus(T.scale(scores_fake, -1.0)))


def vanilla_critic_loss_from_scores(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    return T.add(T.mean(T.softplus(T.scale(scores_real, -1.0))),
                 T.mean(T.softplus(scores_fake)))


def loss_adv(critic: NetworkDef, x, x_purified, mode: str = "train",
             relativistic_average: bool = True) -> Tensor:
    sr = forward(critic, x, mode=mode)
    sf = forward(critic, x_purified, mode=mode)
    sr.assert_finite("critic scores (real)")
    sf.assert_finite("critic scores (fake)")
    return loss_adv_from_scores(sr, sf, relativistic_average)


def critic_loss(critic: NetworkDef, x, x_purified, mode: str = "train",
                relativistic_average: bool = True) -> Tensor:
    sr = forward(critic, x, mode=mode)
    sf = forward(critic, x_purified, mode=mode)
    return critic_loss_from_scores(sr, sf, relativistic_average)


def loss_total(weights: LossWeights, l_adv: Tensor | None, l_img: Tensor | None,
               l_feat: Tensor | None) -> Tensor | None:
    """Weighted hybrid objective.  Zero-weighted (or absent) terms are left
    off the tape entirely; all-zero weights yield None (no-op step)."""
    terms = []
    if l_adv is not None and weights.alpha > 0:
        terms.append(T.scale(l_adv, weights.alpha))
    if l_img is not None and weights.gamma > 0:
        terms.append(T.scale(l_img, weights.gamma))
    if l_feat is not None and weights.lam > 0:
        terms.append(T.scale(l_feat, weights.lam))
    if not terms:
        return None
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


# ---------------------------------------------------------------------------
# Training adversaries


def make_training_adversary(mode: str, x: np.ndarray, spec: AttackSpec,
                            extractor: NetworkDef | None = None,
                            classifier: NetworkDef | None = None,
                            labels: np.ndarray | None = None) -> np.ndarray:
    """Adversary source for purifier training: the self-supervised attack,
    clipped Gaussian noise, or single-step fgsm against the toy classifier."""
    if mode == "ssp":
        if extractor is None:
            raise TrainingError("ssp adversary needs the frozen extractor")
        return ssp_attack(extractor, x, spec)
    if mode == "gaussian":
        rng = SeededRng(spec.seed)
        noise = np.clip(rng.normal(x.shape, std=spec.epsilon / 2.0, dtype=x.dtype),
                        -spec.epsilon, spec.epsilon)
        return linf_project(x + noise, x, spec.epsilon)
    if mode == "fgsm":
        if classifier is None or labels is None:
            raise TrainingError("fgsm adversary needs the toy classifier and labels")
        one_step = AttackSpec(method="fgsm", epsilon=spec.epsilon,
                              step=spec.epsilon if spec.epsilon > 0 else 1.0,
                              iters=1, seed=spec.seed)
        return fgsm(classifier, x, labels, one_step)
    raise TrainingError(f"unknown adversary mode {mode!r}")


# ---------------------------------------------------------------------------
# The training loop


@dataclass
class TrainLog:
    """Per-step loss records plus the resolved weights/config echo."""

    weights: LossWeights
    config: TrainConfig
    rows: list = field(default_factory=list)  # (step, eps, l_adv, l_img, l_feat, total, critic_loss)

    def add(self, step, eps, l_adv, l_img, l_feat, total, c_loss):
        self.rows.append((step, eps, l_adv, l_img, l_feat, total, c_loss))

    def to_csv(self, path: str):
        from .checkpoint import atomic_write_text
        lines = ["step,l_adv,l_img,l_feat,total,critic_loss"]
        for step, _eps, l_adv, l_img, l_feat, total, c_loss in self.rows:
            lines.append(f"{step},{l_adv!r},{l_img!r},{l_feat!r},{total!r},{c_loss!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class TrainResult:
    purifier: NetworkDef
    critic: NetworkDef
    log: TrainLog


@contextmanager
def _frozen(net: NetworkDef):
    saved = [(p, p.requires_grad) for p in net.params.values()]
    for p in net.params.values():
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def freeze(net: NetworkDef) -> NetworkDef:
    """Permanently mark a network's parameters as non-trainable constants."""
    for p in net.params.values():
        p.requires_grad = False
    return net


def _named_grads(net: NetworkDef) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in net.params.items() if p.grad is not None}


def train_nrp(extractor: NetworkDef, purifier: NetworkDef, critic: NetworkDef,
              dataset: Dataset, config: TrainConfig,
              classifier: NetworkDef | None = None) -> TrainResult:
    """Adversarial purifier training.

    Per step: sample a batch (random crops), manufacture adversaries at a
    budget drawn from ``eps_choices``, minimize the hybrid loss over the
    purifier, then update the critic to separate clean from purified.  The
    extractor stays frozen throughout.  A non-finite loss aborts with the
    parameters of the last completed step restored.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if config.ablation == "fgsm-purifier" and classifier is None:
        raise TrainingError("fgsm-purifier ablation needs the toy classifier")

    weights = config.effective_weights()
    adv_mode = config.adversary_mode()
    tap = config.tap or extractor.meta.get("default_tap")
    trunk = truncate_at(extractor, tap)
    vanilla = config.ablation == "vanilla-gan"

    root = SeededRng(config.seed)
    data_rng, crop_rng, eps_rng, adv_rng = root.split(4)
    gen_opt = Adam(purifier.params, lr=config.lr_generator)
    critic_opt = Adam(critic.params, lr=config.lr_critic)
    log = TrainLog(weights=weights, config=config)

    need_feat_value = True  # always logged, even when excluded from the gradient
    for step in range(config.steps):
        prev_state = ({k: v.copy() for k, v in purifier.state().items()},
                      {k: v.copy() for k, v in critic.state().items()})

        batch = dataset.sample(config.batch_size, data_rng)
        x = random_crop(batch.images, config.crop, crop_rng)
        eps = float(config.eps_choices[int(eps_rng.integers(0, len(config.eps_choices)))])
        step_size = min(eps, config.adv_step_scale * eps / max(config.adv_iters, 1)) if eps > 0 else 1.0
        spec = AttackSpec(method="ssp", epsilon=eps, step=step_size if eps > 0 else 1.0,
                          iters=config.adv_iters, tap=tap, metric=config.metric,
                          seed=int(adv_rng.integers(0, 2**31)),
                          rand_init_scale=config.rand_init_scale)
        x_adv = make_training_adversary(adv_mode, x, spec, extractor=trunk,
                                        classifier=classifier, labels=batch.labels)

        # generator step: critic participates as a frozen scorer
        with _frozen(critic):
            with Tape() as tape:
                purified = forward(purifier, Tensor(x_adv))
                l_img_t = loss_img(purified, x)
                sr = forward(critic, Tensor(x), mode="train")
                sf = forward(critic, purified, mode="train")
                if vanilla:
                    l_adv_t = vanilla_gen_loss_from_scores(sf)
                else:
                    l_adv_t = loss_adv_from_scores(sr, sf, config.relativistic_average)
                l_feat_t = loss_feat(trunk, Tensor(x), purified, tap, config.metric) \
                    if weights.lam > 0 else None
                total_t = loss_total(weights, l_adv_t, l_img_t, l_feat_t)
            if total_t is not None:
                if not np.isfinite(total_t.item()):
                    _restore(purifier, critic, prev_state)
                    raise TrainingError(f"non-finite generator loss at step {step}")
                tape.backward(total_t)
                gen_opt.step(_named_grads(purifier))

        if weights.lam > 0:
            l_feat_value = l_feat_t.item()
        elif need_feat_value:
            l_feat_value = loss_feat(trunk, Tensor(x), Tensor(purified.data), tap, config.metric).item()

        # critic step on the same purified batch, detached from the generator
        fake = purified.data
        with Tape() as tape:
            sr = forward(critic, Tensor(x), mode="train")
            sf = forward(critic, Tensor(fake), mode="train")
            if vanilla:
                c_loss_t = vanilla_critic_loss_from_scores(sr, sf)
            else:
                c_loss_t = critic_loss_from_scores(sr, sf, config.relativistic_average)
        if not np.isfinite(c_loss_t.item()):
            _restore(purifier, critic, prev_state)
            raise TrainingError(f"non-finite critic loss at step {step}")
        tape.backward(c_loss_t)
        critic_opt.step(_named_grads(critic))

        total_value = total_t.item() if total_t is not None else 0.0
        log.add(step, eps, l_adv_t.item(), l_img_t.item(), l_feat_value, total_value, c_loss_t.item())
    return TrainResult(purifier=purifier, critic=critic, log=log)


def _restore(purifier: NetworkDef, critic: NetworkDef, prev_state):
    purifier.load_state(prev_state[0])
    critic.load_state(prev_state[1])


# ---------------------------------------------------------------------------
# Supervised pre-training (extractor and toy classifier)


@dataclass(frozen=True)
class FitConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


def train_supervised(net: NetworkDef, dataset: Dataset, config: FitConfig = FitConfig()) -> list:
    """Cross-entropy training of a logits-emitting network; returns the
    per-step (loss, accuracy) history."""
    if dataset.labels is None:
        raise TrainingError("supervised training needs labels")
    rng = SeededRng(config.seed)
    opt = Adam(net.params, lr=config.lr)
    history = []
    for _ in range(config.steps):
        batch = dataset.sample(config.batch_size, rng)
        with Tape() as tape:
            logits = forward(net, Tensor(batch.images))
            loss = T.softmax_cross_entropy(logits, batch.labels)
        tape.backward(loss)
        opt.step(_named_grads(net))
        acc = float((logits.data.argmax(axis=1) == batch.labels).mean())
        history.append((loss.item(), acc))
    return history


def accuracy(net: NetworkDef, dataset: Dataset, batch_size: int = 128) -> float:
    """Top-1 accuracy over a dataset, eval mode."""
    hits = 0
    for batch in dataset.batches(batch_size):
        logits = forward(net, Tensor(batch.images)).data
        hits += int((logits.argmax(axis=1) == batch.labels).sum())
    return hits / len(dataset)
