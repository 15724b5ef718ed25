"""Evaluation drivers: rate metrics, distortion curves, defense tables.

Reports are collections of uniquely keyed rows carrying the full attack
digest and seed, so every number is reproducible from its own metadata.
Rate metrics live in [0, 1]; argmax ties break toward the lowest class
index to keep everything deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, feature_distortion_per_sample, run_attack
from .data import Dataset
from .networks import NetworkDef, forward
from .rng import SeededRng
from .tensor import Tensor


class ReportError(ValueError):
    """Malformed or duplicate report rows."""


RATE_METRICS = ("acc@1", "acc@5", "fooling")


@dataclass(frozen=True)
class EvalRow:
    model: str
    attack: str
    defense: str
    metric: str
    value: float
    n: int
    seed: int


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def add(self, model, attack, defense, metric, value, n, seed):
        if n <= 0:
            raise ReportError("sample count must be positive")
        if (metric in RATE_METRICS or metric.startswith("acc@")) and not 0.0 <= value <= 1.0:
            raise ReportError(f"rate metric {metric!r} outside [0, 1]: {value}")
        key = (model, attack, defense, metric)
        if any((r.model, r.attack, r.defense, r.metric) == key for r in self.rows):
            raise ReportError(f"duplicate report row {key}")
        self.rows.append(EvalRow(model, attack, defense, metric, float(value), int(n), int(seed)))

    def value(self, model, attack, defense, metric) -> float:
        for r in self.rows:
            if (r.model, r.attack, r.defense, r.metric) == (model, attack, defense, metric):
                return r.value
        raise ReportError(f"no row for {(model, attack, defense, metric)}")

    def to_csv(self, path: str):
        from .checkpoint import atomic_write_text
        lines = ["model,attack,defense,metric,value,n,seed"]
        for r in self.rows:
            lines.append(f"{r.model},{r.attack},{r.defense},{r.metric},{r.value!r},{r.n},{r.seed}")
        atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Rate metrics


def _as_batches(data):
    if isinstance(data, Dataset):
        return data.batches(128)
    return data


def top_k_accuracy(classifier: NetworkDef, batches, k: int = 1) -> float:
    """Fraction of samples whose label is among the k largest logits;
    ties resolve toward the lowest class index."""
    if k < 1:
        raise ReportError(f"k must be >= 1, got {k}")
    hits = total = 0
    for batch in _as_batches(batches):
        logits = forward(classifier, Tensor(batch.images)).data
        order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
        hits += int((order == batch.labels[:, None]).any(axis=1).sum())
        total += len(batch)
    if total == 0:
        raise ReportError("empty evaluation stream")
    return hits / total


def predictions(classifier: NetworkDef, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward(classifier, Tensor(images[start : start + batch_size])).data
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def fooling_rate(classifier: NetworkDef, clean_images: np.ndarray, adv_images: np.ndarray) -> float:
    """Fraction of samples whose predicted class changes under attack
    (measured against the model's own clean prediction, not the label)."""
    if clean_images.shape != adv_images.shape:
        raise ReportError("clean/adversarial shapes differ")
    return float((predictions(classifier, clean_images) != predictions(classifier, adv_images)).mean())


# ---------------------------------------------------------------------------
# Purification wrappers


def purify_batch(purifier: NetworkDef, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward through the purifier, clipped back to the valid pixel range."""
    out = []
    for start in range(0, len(x), batch_size):
        out.append(np.clip(forward(purifier, Tensor(x[start : start + batch_size])).data, 0.0, 1.0))
    return np.concatenate(out)


def dynamic_defense_purify(purifier: NetworkDef, x: np.ndarray, noise_magnitude: float,
                           seed: int) -> np.ndarray:
    """Random input-space step of the given magnitude, then purification."""
    if noise_magnitude < 0:
        raise ReportError("noise magnitude must be >= 0")
    rng = SeededRng(seed)
    noisy = np.clip(x + rng.uniform(x.shape, -noise_magnitude, noise_magnitude, dtype=x.dtype), 0.0, 1.0)
    return purify_batch(purifier, noisy)


# ---------------------------------------------------------------------------
# Experiment drivers


def _attack_in_batches(spec: AttackSpec, dataset: Dataset, extractor, classifier, purifier,
                       batch_size: int) -> np.ndarray:
    """Run one attack over a dataset, deterministic per-batch seeds."""
    chunks = []
    for i, batch in enumerate(dataset.batches(batch_size)):
        bspec = replace(spec, seed=spec.seed + 7919 * i)
        chunks.append(run_attack(bspec, batch.images, labels=batch.labels,
                                 extractor=extractor, classifier=classifier, purifier=purifier))
    return np.concatenate(chunks)


@dataclass(frozen=True)
class CurvePoint:
    iterations: int
    mean_distortion: float
    fooling: float


def distortion_curve(extractor: NetworkDef, spec: AttackSpec, dataset: Dataset,
                     grid, classifier: NetworkDef, tap: str | None = None,
                     batch_size: int = 64) -> list[CurvePoint]:
    """Feature distortion and transfer fooling rate as iterations grow.

    Feature-space specs attack the extractor; cross-entropy specs attack
    the extractor's own logits head (the source model), and fooling is
    always measured on the held-out ``classifier``.
    """
    tap = tap or extractor.meta.get("default_tap")
    points = []
    for iters in grid:
        t_spec = replace(spec, iters=int(iters))
        adv = _attack_in_batches(t_spec, dataset, extractor, extractor, None, batch_size)
        delta = feature_distortion_per_sample(extractor, dataset.images, adv, tap, t_spec.metric)
        points.append(CurvePoint(int(iters), float(delta.mean()),
                                 fooling_rate(classifier, dataset.images, adv)))
    return points


def layer_sweep(extractor: NetworkDef, dataset: Dataset, taps, spec: AttackSpec,
                classifier: NetworkDef, batch_size: int = 64) -> dict[str, float]:
    """Transfer fooling rate of the feature-space attack, per tap point."""
    rates = {}
    for tap in taps:
        t_spec = replace(spec, tap=tap)
        adv = _attack_in_batches(t_spec, dataset, extractor, None, None, batch_size)
        rates[tap] = fooling_rate(classifier, dataset.images, adv)
    return rates


def defense_table(classifier: NetworkDef, defenses: dict, attack_specs: dict, dataset: Dataset,
                  extractor: NetworkDef | None = None, batch_size: int = 64,
                  model_id: str = "toy", seed: int = 0) -> EvalReport:
    """Accuracy grid over {no attack, each attack} x {each defense}.

    ``defenses`` maps a name to a purifier network or None (no defense).
    Adversarial batches are generated once per attack and shared across
    defenses, so identical defenses yield bit-identical columns.
    """
    report = EvalReport()
    variants = {"none": dataset.images}
    for name, spec in attack_specs.items():
        variants[name] = _attack_in_batches(spec, dataset, extractor, classifier, None, batch_size)
    digests = {"none": "none"}
    digests.update({name: spec.digest() for name, spec in attack_specs.items()})

    for attack_name, images in variants.items():
        for defense_name, purifier in defenses.items():
            processed = images if purifier is None else purify_batch(purifier, images)
            acc = float((predictions(classifier, processed) == dataset.labels).mean())
            report.add(model_id, digests[attack_name], defense_name, "acc@1",
                       acc, len(dataset), seed)
    return report
