"""Supervised pretraining of the frozen auxiliaries: domain classifier and teachers."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import Dataset, split
from .errors import ConfigError, DivergenceError
from .models import ArchConfig, OptimConfig, init_model

log = logging.getLogger(__name__)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled minibatch row indices for one epoch; a pure function of its inputs."""
    perm = np.random.default_rng([seed, 90, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _targets(dataset: Dataset, task: str) -> torch.Tensor:
    if task == "domain":
        return torch.from_numpy(dataset.domain_id.copy())
    if task == "identity":
        return torch.from_numpy(dataset.identity_id.copy())
    if task == "attributes":
        return torch.from_numpy(dataset.attributes.astype(np.float32))
    raise ConfigError(f"unknown task {task!r}")


def _loss(task, logits, y):
    if task == "attributes":
        return F.binary_cross_entropy_with_logits(logits, y)
    return F.cross_entropy(logits, y)


@torch.no_grad()
def accuracy(model, dataset: Dataset, task: str) -> float:
    """Top-1 accuracy, or mean per-attribute accuracy for ``task='attributes'``."""
    model.eval()
    x = torch.from_numpy(dataset.images.copy())
    logits = torch.cat([model(x[i:i + 512]) for i in range(0, len(x), 512)])
    y = _targets(dataset, task)
    if task == "attributes":
        return float(((logits > 0).float() == y).float().mean())
    return float((logits.argmax(1) == y).float().mean())


def fit_classifier(model, dataset: Dataset, task: str, opt: OptimConfig, seed: int,
                   on_batch=None, targets=None):
    """Plain minibatch SGD. Returns the per-step loss history."""
    x_all = torch.from_numpy(dataset.images.copy())
    y_all = _targets(dataset, task) if targets is None else targets
    ids = np.asarray(dataset.sample_ids)
    optimizer = opt.make_optimizer(model.parameters())
    total = opt.epochs * -(-len(dataset) // opt.batch_size)
    history, step = [], 0
    model.train()
    for epoch in range(opt.epochs):
        for rows in batch_order(len(dataset), opt.batch_size, seed, epoch):
            if on_batch is not None:
                on_batch(ids[rows].tolist())
            for group in optimizer.param_groups:
                group["lr"] = opt.lr_at(step, total)
            loss = _loss(task, model(x_all[rows]), y_all[rows])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite {task} loss", step=step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(loss.item())
            step += 1
    return history


def _train_frozen(kind, task, train: Dataset, opt, arch, seed, holdout, on_batch,
                  permute_labels=False):
    arch = arch or ArchConfig.for_spec(train.spec)
    arch.check_dataset(train.spec)
    fit_set, val_set = split(train, 1.0 - holdout, seed) if holdout > 0 else (train, None)
    targets = None
    if permute_labels:
        targets = _targets(fit_set, task)
        targets = targets[torch.from_numpy(np.random.default_rng([seed, 91]).permutation(len(targets)))]
    model = init_model(kind, arch, seed)
    history = fit_classifier(model, fit_set, task, opt, seed, on_batch=on_batch, targets=targets)
    model.report = {
        "task": task,
        "final_loss": history[-1],
        "steps": len(history),
        "train_accuracy": accuracy(model, fit_set, task),
        "heldout_accuracy": None if val_set is None or len(val_set) == 0
        else accuracy(model, val_set, task),
    }
    log.info("%s: %s", kind, model.report)
    return model.freeze()


def train_domain_classifier(train: Dataset, opt: OptimConfig = None, arch: ArchConfig = None,
                            seed: int = 0, holdout: float = 0.2, on_batch=None,
                            permute_labels: bool = False):
    if len(np.unique(train.domain_id)) < 2:
        raise ConfigError("domain classifier needs at least 2 source domains")
    return _train_frozen("domain_classifier", "domain", train, opt or OptimConfig(), arch,
                         seed, holdout, on_batch, permute_labels)


def train_teacher_perceptual(train: Dataset, opt: OptimConfig = None, arch: ArchConfig = None,
                             seed: int = 0, holdout: float = 0.2, on_batch=None):
    if len(np.unique(train.identity_id)) < 2:
        raise ConfigError("perceptual teacher needs at least 2 identities")
    return _train_frozen("teacher_perceptual", "identity", train, opt or OptimConfig(), arch,
                         seed, holdout, on_batch)


def train_teacher_generative(train: Dataset, opt: OptimConfig = None, arch: ArchConfig = None,
                             seed: int = 0, holdout: float = 0.2, on_batch=None):
    if train.spec.num_attributes < 1:
        raise ConfigError("generative teacher needs at least 1 attribute")
    return _train_frozen("teacher_generative", "attributes", train, opt or OptimConfig(), arch,
                         seed, holdout, on_batch)
