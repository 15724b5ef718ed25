"""Shared fixtures: tiny f64 networks for gradient checks, and one
session-scoped toy pipeline (data, frozen extractor, classifier, trained
purifiers) reused by the training/evaluation/acceptance suites."""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from nrp.attacks import AttackSpec, ssp_attack
from nrp.data import Dataset, SyntheticConfig, make_synthetic
from nrp.gradcheck import numeric_gradient, relative_error
from nrp.networks import (ClassifierConfig, CriticConfig, ExtractorConfig, NetworkDef,
                          PurifierConfig, build_critic, build_feature_extractor,
                          build_purifier, build_toy_classifier, forward)
from nrp.evaluation import predictions
from nrp.tensor import Tape, Tensor
from nrp.training import FitConfig, TrainConfig, freeze, train_nrp, train_supervised

GRAD_TOL = 1e-5

# Desk-scale pipeline constants: small enough for the CPU-minute budget,
# large enough that every directional result has real margin.
DATA_CONFIG = SyntheticConfig(texture_amp=0.10, color_amp=0.05, pixel_noise=0.07)
PIPE_EXTRACTOR = ExtractorConfig()
PIPE_PURIFIER = PurifierConfig(width=16, basic_blocks=1, growth=8)
PIPE_CRITIC = CriticConfig(widths=(8, 16, 16, 32, 32))
EVAL_EPS = 16 / 255
EVAL_SPEC = AttackSpec(method="ssp", epsilon=EVAL_EPS, step=1.6 / 255, iters=100,
                       tap="b3c3", seed=11)


def network_fd_check(net: NetworkDef, x: np.ndarray, loss_fn, mode="eval", tol=GRAD_TOL):
    """Finite-difference check of every parameter (and the input) of a full
    network pass; the numeric side only re-runs the forward function."""
    x = np.asarray(x, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    with Tape() as tape:
        loss = loss_fn(net, leaf, mode)
    tape.backward(loss)

    def value():
        return loss_fn(net, Tensor(x.copy()), mode).item()

    failures = []
    for name, p in net.params.items():
        err = relative_error(p.grad, numeric_gradient(value, p.data))
        if err >= tol:
            failures.append(f"{name}: {err:.2e}")
    err = relative_error(leaf.grad, numeric_gradient(value, x))
    if err >= tol:
        failures.append(f"<input>: {err:.2e}")
    assert not failures, "gradient mismatches: " + ", ".join(failures)


def tiny_extractor_f64(seed=0):
    cfg = ExtractorConfig(base_width=2, num_blocks=2, convs_per_block=2,
                          num_classes=2, dtype=np.float64)
    return build_feature_extractor(cfg, seed=seed)


def tiny_purifier_f64(seed=1):
    cfg = PurifierConfig(width=4, basic_blocks=1, dense_blocks=1, growth=2, dtype=np.float64)
    return build_purifier(cfg, seed=seed)


def tiny_critic_f64(seed=2):
    cfg = CriticConfig(widths=(3, 4), strides=(1, 2), dtype=np.float64)
    return build_critic(cfg, seed=seed)


def tiny_classifier_f64(seed=3):
    cfg = ClassifierConfig(widths=(3, 4), num_classes=3, dtype=np.float64)
    return build_toy_classifier(3, config=cfg, seed=seed)


# Fast float32 builders for behavioural (non-gradcheck) unit tests.


def small_extractor(seed=0, num_classes=4):
    return build_feature_extractor(
        ExtractorConfig(base_width=4, num_blocks=2, convs_per_block=2, num_classes=num_classes),
        seed=seed)


def small_purifier(seed=1):
    return build_purifier(PurifierConfig(width=6, basic_blocks=1, dense_blocks=1, growth=3),
                          seed=seed)


def small_critic(seed=2):
    return build_critic(CriticConfig(widths=(4, 6), strides=(1, 2)), seed=seed)


def small_classifier(seed=3, num_classes=4):
    return build_toy_classifier(num_classes, config=ClassifierConfig(widths=(4, 6),
                                                                     num_classes=num_classes),
                                seed=seed)


# ---------------------------------------------------------------------------
# Session-scoped toy pipeline


@dataclass
class ToyPipeline:
    train: Dataset
    test: Dataset
    extractor: NetworkDef
    classifier: NetworkDef
    clean_acc: float
    adv_images: np.ndarray
    adv_acc: float
    seconds: dict = field(default_factory=dict)
    purifiers: dict = field(default_factory=dict)   # mode -> NetworkDef
    critics: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)

    def purified_accuracy(self, purifier, images) -> float:
        from nrp.evaluation import purify_batch
        return float((predictions(self.classifier, purify_batch(purifier, images))
                      == self.test.labels).mean())


def _train_purifier(pipe: ToyPipeline, ablation: str, steps: int, seed: int):
    purifier = build_purifier(PIPE_PURIFIER, seed=100 + seed)
    critic = build_critic(PIPE_CRITIC, seed=200 + seed)
    config = TrainConfig(steps=steps, batch_size=16, crop=16, ablation=ablation, seed=seed)
    t0 = time.time()
    result = train_nrp(pipe.extractor, purifier, critic, pipe.train, config,
                       classifier=pipe.classifier)
    pipe.seconds[f"nrp-{ablation}"] = time.time() - t0
    pipe.purifiers[ablation] = result.purifier
    pipe.critics[ablation] = result.critic
    pipe.logs[ablation] = result.log
    return result


@pytest.fixture(scope="session")
def toy(request) -> ToyPipeline:
    """Datasets, trained+frozen extractor and classifier, and the SSP
    evaluation attack at the headline budget."""
    t_start = time.time()
    train = make_synthetic(2048, seed=1, config=DATA_CONFIG)
    test = make_synthetic(512, seed=2, config=DATA_CONFIG)

    classifier = build_toy_classifier(4, seed=3)
    train_supervised(classifier, train, FitConfig(steps=300, batch_size=32, lr=2e-3, seed=5))
    extractor = build_feature_extractor(PIPE_EXTRACTOR, seed=0)
    train_supervised(extractor, train, FitConfig(steps=300, batch_size=32, lr=2e-3, seed=6))
    freeze(extractor)
    freeze(classifier)
    t_pretrain = time.time()

    adv = np.concatenate([ssp_attack(extractor, test.images[s : s + 64], EVAL_SPEC)
                          for s in range(0, len(test), 64)])
    clean_acc = float((predictions(classifier, test.images) == test.labels).mean())
    adv_acc = float((predictions(classifier, adv) == test.labels).mean())
    pipe = ToyPipeline(train=train, test=test, extractor=extractor, classifier=classifier,
                       clean_acc=clean_acc, adv_images=adv, adv_acc=adv_acc)
    pipe.seconds["pretrain"] = t_pretrain - t_start
    pipe.seconds["eval-attack"] = time.time() - t_pretrain
    return pipe


@pytest.fixture(scope="session")
def toy_nrp(toy) -> ToyPipeline:
    """The toy pipeline plus a fully trained purifier (ablation: full)."""
    if "full" not in toy.purifiers:
        _train_purifier(toy, "full", steps=300, seed=33)
    return toy


@pytest.fixture(scope="session")
def toy_ablations(toy_nrp) -> ToyPipeline:
    """Adds the ablation purifiers used for the ordering criterion."""
    for ablation, seed in (("fgsm-purifier", 44), ("gaussian-purifier", 55), ("no-feat", 66)):
        if ablation not in toy_nrp.purifiers:
            _train_purifier(toy_nrp, ablation, steps=300, seed=seed)
    return toy_nrp
