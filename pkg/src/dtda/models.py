"""Desk-scale networks: domain classifier, three-headed student, two teachers.

All networks share one convolutional encoder family built from ``ArchConfig``
so the domain classifier and the student have matching architectures.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, FormatError, InputError

CKPT_MAGIC = b"DTDACKPT"

NORMS = {
    "batch": nn.BatchNorm2d,
    "group": lambda c: nn.GroupNorm(max(1, c // 8), c),
    "none": lambda c: nn.Identity(),
}


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple = (16, 32, 64)
    num_domains: int = 4
    num_identities: int = 8
    num_attributes: int = 4
    in_channels: int = 3
    norm: str = "batch"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.norm not in NORMS:
            raise ConfigError(f"ArchConfig.norm: expected one of {sorted(NORMS)} (got {self.norm!r})")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError(f"ArchConfig.widths: need >= 1 positive width (got {self.widths})")
        for name in ("num_domains", "num_identities", "num_attributes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ArchConfig.{name}: must be positive")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @classmethod
    def for_spec(cls, spec, widths=(16, 32, 64), norm="batch") -> "ArchConfig":
        return cls(widths=widths, num_domains=spec.num_domains, num_identities=spec.num_identities,
                   num_attributes=spec.num_attributes, norm=norm)

    def check_dataset(self, spec):
        """Raise if the head widths cannot hold the dataset's label spaces."""
        for name in ("num_domains", "num_identities", "num_attributes"):
            if getattr(self, name) != getattr(spec, name):
                raise ConfigError(
                    f"ArchConfig.{name}={getattr(self, name)} does not match dataset "
                    f"{name}={getattr(spec, name)}")


@dataclass
class OptimConfig:
    """SGD with momentum, weight decay and cosine learning-rate decay."""

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 64
    cosine: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"OptimConfig.lr: must be > 0 (got {self.lr})")
        if self.epochs < 1:
            raise ConfigError(f"OptimConfig.epochs: must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            raise ConfigError(f"OptimConfig.batch_size: must be >= 1 (got {self.batch_size})")

    def lr_at(self, step: int, total: int) -> float:
        if not self.cosine or total <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total))

    def make_optimizer(self, params):
        return torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                               weight_decay=self.weight_decay)


class Encoder(nn.Module):
    """Stride-2 conv blocks (conv, norm, ReLU) and a global average pool."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers, c = [], arch.in_channels
        for w in arch.widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), NORMS[arch.norm](w), nn.ReLU()]
            c = w
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


def _check_input(x, in_channels):
    if x.dim() != 4 or x.shape[1] != in_channels:
        raise InputError(f"expected a [N, {in_channels}, H, W] batch, got {tuple(x.shape)}")


class Classifier(nn.Module):
    """Encoder plus one linear head. Base for the domain classifier and teachers."""

    kind = "classifier"

    def __init__(self, arch: ArchConfig, out_dim: int):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.head = nn.Linear(arch.feature_dim, out_dim)
        self.frozen = False

    def forward(self, x):
        _check_input(x, self.arch.in_channels)
        return self.head(self.encoder(x))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()


class DomainClassifier(Classifier):
    kind = "domain_classifier"

    def __init__(self, arch: ArchConfig):
        super().__init__(arch, arch.num_domains)


class TeacherPerceptual(Classifier):
    """Identity classifier; stands in for the face-recognition teacher."""

    kind = "teacher_perceptual"

    def __init__(self, arch: ArchConfig):
        super().__init__(arch, arch.num_identities)


class TeacherGenerative(Classifier):
    """Attribute classifier; stands in for the attribute-editing discriminator."""

    kind = "teacher_generative"

    def __init__(self, arch: ArchConfig):
        super().__init__(arch, arch.num_attributes)


class StudentOutput(NamedTuple):
    features: torch.Tensor
    edit: torch.Tensor
    rec: torch.Tensor
    fas: torch.Tensor


class StudentModel(nn.Module):
    """Shared encoder with editing, recognition and anti-spoofing heads."""

    kind = "student"

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.head_edit = nn.Linear(arch.feature_dim, arch.num_attributes)
        self.head_rec = nn.Linear(arch.feature_dim, arch.num_identities)
        self.head_fas = nn.Linear(arch.feature_dim, 2)
        self.frozen = False

    def forward(self, x) -> StudentOutput:
        _check_input(x, self.arch.in_channels)
        f = self.encoder(x)
        return StudentOutput(f, self.head_edit(f), self.head_rec(f), self.head_fas(f))

    @torch.no_grad()
    def live_probability(self, x, batch_size=512) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = [F.softmax(self(x[i:i + batch_size]).fas, dim=1)[:, 1]
               for i in range(0, len(x), batch_size)]
        self.train(was_training)
        return torch.cat(out).double().numpy()


MODEL_KINDS = {cls.kind: cls for cls in
               (DomainClassifier, TeacherPerceptual, TeacherGenerative, StudentModel)}


def _seeded_init(model: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                # Kaiming-uniform for ReLU nets, bias as in torch defaults
                w_bound = math.sqrt(6.0 / fan_in)
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-w_bound, w_bound, generator=gen))
                m.bias.copy_(torch.empty_like(m.bias).uniform_(-bound, bound, generator=gen))
    return model


def init_model(kind: str, arch: ArchConfig, seed: int) -> nn.Module:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None
    return _seeded_init(cls(arch), seed)


def init_student(arch: ArchConfig, seed: int, spec=None) -> StudentModel:
    if spec is not None:
        arch.check_dataset(spec)
    return init_model("student", arch, seed)


def forward_student(model: StudentModel, x) -> StudentOutput:
    return model(x)


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- #
# checkpoints
#
# layout: 8-byte magic | u64 header length | UTF-8 JSON header | float32 blob
# The blob holds every tensor listed in header["tensors"], in that order,
# little-endian, C-order. Model parameters come first in state_dict order,
# followed by any extra tensors (e.g. optimizer momentum buffers).

def _encode_rng(state):
    return None if state is None else base64.b64encode(state.numpy().tobytes()).decode()


def _decode_rng(text):
    if text is None:
        return None
    return torch.from_numpy(np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy())


def save_checkpoint(model: nn.Module, path, step: int = 0, seed=None, rng_state=None,
                    extra_tensors=None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [("model." + k, v) for k, v in model.state_dict().items()]
    tensors += [("extra." + k, v) for k, v in (extra_tensors or {}).items()]
    header = {
        "kind": model.kind,
        "arch": asdict(model.arch),
        "frozen": bool(getattr(model, "frozen", False)),
        "step": int(step),
        "seed": seed,
        "rng_state": _encode_rng(rng_state),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v.detach().cpu().numpy(), dtype="<f4").tobytes()
                    for _, v in tensors)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(head)) + head + blob)
    tmp.replace(path)
    return path


@dataclass
class LoadedCheckpoint:
    model: nn.Module
    step: int
    seed: object
    rng_state: object
    extra_tensors: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def read_checkpoint(path, kind=None) -> LoadedCheckpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint not found: {path}") from exc
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise FormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: kind is {header.get('kind')!r}, expected {kind!r}")
    try:
        arch = ArchConfig(**header["arch"])
        model = MODEL_KINDS[header["kind"]](arch)
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad architecture config ({exc})") from exc

    offset = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise FormatError(f"{path}: parameter blob truncated at {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after parameter blob")

    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    expected = model.state_dict()
    if set(state) != set(expected) or any(state[k].shape != expected[k].shape for k in state):
        raise FormatError(f"{path}: parameters do not match architecture {header['arch']}")
    model.load_state_dict(state)
    if header.get("frozen"):
        model.freeze()
    return LoadedCheckpoint(
        model=model,
        step=header.get("step", 0),
        seed=header.get("seed"),
        rng_state=_decode_rng(header.get("rng_state")),
        extra_tensors={k[len("extra."):]: v for k, v in tensors.items() if k.startswith("extra.")},
        extra=header.get("extra", {}),
    )


def load_checkpoint(path, kind=None) -> nn.Module:
    return read_checkpoint(path, kind).model
