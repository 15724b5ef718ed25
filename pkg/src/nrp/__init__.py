"""Self-supervised perceptual adversaries and a purifier defense.

Layered as: a minimal numpy autodiff core (`tensor`, `optim`, `rng`),
declarative networks (`networks`), feature-space and label-space attacks
(`attacks`), adversarial purifier training (`training`), evaluation
drivers (`evaluation`), and data/checkpoint/CLI plumbing (`data`,
`checkpoint`, `cli`).
"""

from .tensor import Tensor, Tape

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
