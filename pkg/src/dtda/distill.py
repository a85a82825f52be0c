"""Distillation losses and the student training loop.

One training step, in order:

1. perturb the batch with PGD on the frozen domain classifier;
2. run the student encoder once on the perturbed batch and evaluate all three heads;
3. anti-spoofing cross-entropy on the FAS head;
4. run both frozen teachers on the same perturbed batch;
5. tempered KL between each teacher and the matching student head;
6. one SGD update on ``L_f + lambda1 * L_fr + lambda2 * L_fa``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .daa import AttackConfig, pgd_attack
from .datagen import Dataset
from .errors import ConfigError, DivergenceError, InputError
from .models import OptimConfig, StudentModel, read_checkpoint, save_checkpoint
from .pretrain import batch_order

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("L_f", "L_fr", "L_fa", "L_sum")


@dataclass(frozen=True)
class KDConfig:
    tau: float = 1.0
    lambda1: float = 0.3
    lambda2: float = 0.3
    tau_squared_scaling: bool = True

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError(f"KDConfig.tau: must be finite and > 0 (got {self.tau})")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"KDConfig.{name}: must be finite and >= 0 (got {v})")


class Teachers(NamedTuple):
    perceptual: Optional[torch.nn.Module] = None
    generative: Optional[torch.nn.Module] = None


def kd_loss(teacher_logits, student_logits, tau, tau_squared=False):
    """KL(softmax(teacher / tau) || softmax(student / tau)), averaged over rows.

    A single tempered softmax is applied to each side.
    """
    if teacher_logits.shape != student_logits.shape:
        raise InputError(f"kd_loss: teacher shape {tuple(teacher_logits.shape)} "
                         f"!= student shape {tuple(student_logits.shape)}")
    log_p = F.log_softmax(teacher_logits / tau, dim=-1)
    log_q = F.log_softmax(student_logits / tau, dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()
    return kl * tau**2 if tau_squared else kl


def fas_loss(fas_logits, liveness):
    """Cross-entropy of the two-way live/spoof head; class 1 is live."""
    if liveness.dtype.is_floating_point or ((liveness != 0) & (liveness != 1)).any():
        raise InputError("fas_loss: liveness labels must be integers in {0, 1}")
    return F.cross_entropy(fas_logits, liveness)


def total_loss(l_f, l_fr, l_fa, config: KDConfig):
    return l_f + config.lambda1 * l_fr + config.lambda2 * l_fa


def _value(t):
    return float("nan") if t is None else t.item()


def train_step(student: StudentModel, teachers: Teachers, domain_classifier, batch,
               attack: AttackConfig, kd: KDConfig, optimizer, generator=None) -> dict:
    """One update of the student. ``batch`` is ``(x, liveness, domain_id)``.

    Loss terms with a zero weight (or a missing teacher) are skipped and logged
    as NaN; with both lambdas zero and no attack this is plain supervised
    cross-entropy training.
    """
    x, y, d = batch
    if attack.epsilon > 0 and domain_classifier is not None and len(torch.unique(d)) > 1:
        x = pgd_attack(domain_classifier, x, d, attack, generator)

    out = student(x)
    l_f = fas_loss(out.fas, y)
    l_fr = l_fa = None
    if kd.lambda1 > 0 and teachers.perceptual is not None:
        with torch.no_grad():
            p_rec = teachers.perceptual(x)
        l_fr = kd_loss(p_rec, out.rec, kd.tau, kd.tau_squared_scaling)
    if kd.lambda2 > 0 and teachers.generative is not None:
        with torch.no_grad():
            p_edi = teachers.generative(x)
        l_fa = kd_loss(p_edi, out.edit, kd.tau, kd.tau_squared_scaling)

    l_sum = l_f
    if l_fr is not None:
        l_sum = l_sum + kd.lambda1 * l_fr
    if l_fa is not None:
        l_sum = l_sum + kd.lambda2 * l_fa
    if not torch.isfinite(l_sum):
        raise DivergenceError("non-finite training loss")
    optimizer.zero_grad()
    l_sum.backward()
    optimizer.step()
    return {"L_f": l_f.item(), "L_fr": _value(l_fr), "L_fa": _value(l_fa), "L_sum": l_sum.item()}


@dataclass
class TrainState:
    optimizer: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)

    def losses(self, column: str) -> np.ndarray:
        return np.array([h[column] for h in self.history])

    def epoch_means(self, column: str, steps_per_epoch: int) -> np.ndarray:
        v = self.losses(column)
        return np.array([v[i:i + steps_per_epoch].mean() for i in range(0, len(v), steps_per_epoch)])


def write_loss_csv(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step",) + LOSS_COLUMNS)
        for i, h in enumerate(history):
            w.writerow([i] + [repr(h[c]) for c in LOSS_COLUMNS])
    return path


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        return [{c: float(r[c]) for c in LOSS_COLUMNS} for r in csv.DictReader(fh)]


def _save_train_state(student, state: TrainState, path, seed):
    buffers = {}
    for i, p in enumerate(student.parameters()):
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            buffers[f"momentum.{i}"] = buf
    save_checkpoint(student, path, step=state.step, seed=seed, extra_tensors=buffers,
                    extra={"epoch": state.epoch, "history": state.history})


def _load_train_state(student, optimizer, path) -> TrainState:
    ck = read_checkpoint(path, kind="student")
    student.load_state_dict(ck.model.state_dict())
    for i, p in enumerate(student.parameters()):
        buf = ck.extra_tensors.get(f"momentum.{i}")
        if buf is not None:
            optimizer.state[p]["momentum_buffer"] = buf.clone()
    return TrainState(optimizer=optimizer, step=ck.step, epoch=ck.extra["epoch"],
                      history=list(ck.extra["history"]))


def train(student: StudentModel, teachers: Teachers, domain_classifier, train_set: Dataset,
          optim: OptimConfig = OptimConfig(), attack: AttackConfig = AttackConfig(),
          kd: KDConfig = KDConfig(), seed: int = 0, on_batch=None, checkpoint_path=None,
          resume: bool = False, max_epochs: int = None):
    """Fixed-epoch training of the student over ``train_set``.

    ``checkpoint_path`` receives a resumable snapshot after every epoch.
    ``max_epochs`` stops early (used to simulate an interrupted run).
    """
    for t in (*teachers, domain_classifier):
        if t is not None and not getattr(t, "frozen", False):
            raise ConfigError("teachers and domain classifier must be frozen before student training")
    optimizer = optim.make_optimizer(student.parameters())
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        state = _load_train_state(student, optimizer, checkpoint_path)
        log.info("resumed at epoch %d step %d", state.epoch, state.step)
    else:
        state = TrainState(optimizer=optimizer)

    x_all = torch.from_numpy(train_set.images.copy())
    y_all = torch.from_numpy(train_set.liveness.copy())
    d_all = torch.from_numpy(train_set.domain_id.copy())
    ids = np.asarray(train_set.sample_ids)
    steps_per_epoch = -(-len(train_set) // optim.batch_size)
    total = optim.epochs * steps_per_epoch
    student.train()
    stop = optim.epochs if max_epochs is None else min(optim.epochs, max_epochs)
    while state.epoch < stop:
        for rows in batch_order(len(train_set), optim.batch_size, seed, state.epoch):
            if on_batch is not None:
                on_batch(ids[rows].tolist())
            for group in optimizer.param_groups:
                group["lr"] = optim.lr_at(state.step, total)
            gen = torch.Generator().manual_seed(seed * 1_000_003 + state.step)
            try:
                losses = train_step(student, teachers, domain_classifier,
                                    (x_all[rows], y_all[rows], d_all[rows]),
                                    attack, kd, optimizer, gen)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), step=state.step) from None
            state.history.append(losses)
            state.step += 1
        state.epoch += 1
        if checkpoint_path is not None:
            _save_train_state(student, state, checkpoint_path, seed)
    return student, state
