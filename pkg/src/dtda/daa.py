"""Domain adversarial attack: push inputs up the domain classifier's loss so
that source domains become indistinguishable at the input."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float = None  # None -> epsilon / 4
    random_start: bool = True
    clamp_min: float = 0.0
    clamp_max: float = 1.0

    def __post_init__(self):
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"AttackConfig.epsilon: must be finite and >= 0 (got {self.epsilon})")
        if self.steps < 1:
            raise ConfigError(f"AttackConfig.steps: must be >= 1 (got {self.steps})")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigError(f"AttackConfig.step_size: must be > 0 (got {self.step_size})")
        if not self.clamp_min < self.clamp_max:
            raise ConfigError("AttackConfig.clamp_min must be < clamp_max")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    @classmethod
    def fgsm(cls, epsilon: float, **kw) -> "AttackConfig":
        """Single step of size epsilon from the clean input."""
        return cls(epsilon=epsilon, steps=1, step_size=epsilon if epsilon > 0 else None,
                   random_start=False, **kw)


def domain_loss(classifier, x, d):
    """Mean multi-class cross-entropy of the domain logits against ``d``."""
    if not torch.isfinite(x).all():
        raise InputError("domain_loss: non-finite input")
    return F.cross_entropy(classifier(x), d)


def input_gradient(classifier, x, d):
    x = x.detach().requires_grad_(True)
    (grad,) = torch.autograd.grad(domain_loss(classifier, x, d), x)
    return grad


def fgsm_step(x, grad, epsilon, clamp=(0.0, 1.0)):
    if grad.shape != x.shape:
        raise InputError(f"gradient shape {tuple(grad.shape)} != input shape {tuple(x.shape)}")
    return (x + epsilon * torch.sign(grad)).clamp(*clamp)


def pgd_attack(classifier, x, d, config: AttackConfig = AttackConfig(), generator=None):
    """L-inf PGD ascent on the domain loss.

    Each step moves by ``alpha * sign(grad)``, then projects onto the epsilon
    ball around the clean input and clamps to the pixel range. With one step of
    size epsilon and no random start this is exactly :func:`fgsm_step`.
    """
    if len(torch.unique(d)) < 2:
        raise ConfigError("pgd_attack: batch must span at least 2 domains")
    x0 = x.detach()
    lo, hi = config.clamp_min, config.clamp_max
    if config.epsilon == 0:
        return x0.clone()
    eps = config.epsilon
    lower, upper = x0 - eps, x0 + eps
    x_adv = x0.clone()
    if config.random_start:
        noise = torch.rand(x0.shape, generator=generator, dtype=x0.dtype) * (2 * eps) - eps
        x_adv = (x0 + noise).clamp(lo, hi)
    was_training = classifier.training
    classifier.eval()
    for _ in range(config.steps):
        grad = input_gradient(classifier, x_adv, d)
        x_adv = x_adv + config.alpha * torch.sign(grad)
        x_adv = torch.minimum(torch.maximum(x_adv, lower), upper).clamp(lo, hi)
    classifier.train(was_training)
    return x_adv.detach()


@torch.no_grad()
def _accuracy_and_loss(classifier, x, d):
    logits = classifier(x)
    return (float((logits.argmax(1) == d).float().sum()),
            float(F.cross_entropy(logits, d, reduction="sum")))


def domain_confusion_report(classifier, dataset, config: AttackConfig = AttackConfig(),
                            batch_size: int = 256, seed: int = 0) -> dict:
    """Domain accuracy and loss on clean versus attacked copies of ``dataset``."""
    classifier.eval()
    gen = torch.Generator().manual_seed(seed)
    # shuffle so that batches mix domains
    rows = np.random.default_rng([seed, 80]).permutation(len(dataset))
    x_all = torch.from_numpy(dataset.images[rows])
    d_all = torch.from_numpy(dataset.domain_id[rows])
    totals = np.zeros(4)
    for i in range(0, len(dataset), batch_size):
        x, d = x_all[i:i + batch_size], d_all[i:i + batch_size]
        totals[:2] += _accuracy_and_loss(classifier, x, d)
        x_adv = pgd_attack(classifier, x, d, config, gen) if len(torch.unique(d)) > 1 else x
        totals[2:] += _accuracy_and_loss(classifier, x_adv, d)
    n = len(dataset)
    return {"clean_acc": totals[0] / n, "clean_loss": totals[1] / n,
            "attacked_acc": totals[2] / n, "attacked_loss": totals[3] / n}
