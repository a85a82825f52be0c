"""Synthetic multi-domain live/spoof image proxies.

Every sample is rendered from four independent factors:

* identity  -> a low-frequency blob layout shared by identity pairs, plus a
  faint pixel-scale detail pattern unique to each identity
* attributes -> local overlay patterns, one per attribute bit
* liveness  -> spoofs are box-blurred (which wipes out the identity detail)
  and carry a periodic moire texture
* domain    -> a global tint, brightness offset and pixel-noise level, and
  the orientation of the moire grating (each domain has its own attack medium)

Blur and the presence of a grating mark every spoof in every domain; the
grating orientation is a domain-specific shortcut that does not transfer.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"DTDA"
HEADER = struct.Struct("<4sIIII")

# rendering constants
TEXTURE_PERIOD = (3.0, 5.0)
TINT_SCALE = 0.05
BRIGHTNESS_SCALE = 0.04
NOISE_SIGMA = (0.01, 0.12)


@dataclass(frozen=True)
class SynthSpec:
    num_domains: int = 4
    samples_per_domain: int = 160
    image_size: int = 32
    channels: int = 3
    num_identities: int = 8
    num_attributes: int = 4
    spoof_ratio: float = 0.5
    domain_shift_strength: float = 1.0
    seed: int = 0
    texture_amplitude: float = 0.08
    medium_jitter: Optional[float] = 0.15
    detail_amplitude: float = 0.06

    def __post_init__(self):
        def bad(name, why):
            raise ConfigError(f"SynthSpec.{name}: {why} (got {getattr(self, name)!r})")

        if self.num_domains < 2:
            bad("num_domains", "must be >= 2")
        if self.samples_per_domain < 1:
            bad("samples_per_domain", "must be positive")
        if self.image_size < 8:
            bad("image_size", "must be >= 8")
        if self.channels != 3:
            bad("channels", "must be 3")
        if self.num_identities < 2:
            bad("num_identities", "must be >= 2")
        if self.num_attributes < 1:
            bad("num_attributes", "must be >= 1")
        if not 0.0 < self.spoof_ratio < 1.0:
            bad("spoof_ratio", "must lie in (0, 1)")
        if not (self.domain_shift_strength >= 0 and math.isfinite(self.domain_shift_strength)):
            bad("domain_shift_strength", "must be finite and >= 0")
        if not 0 <= self.seed < 2**64:
            bad("seed", "must be a 64-bit unsigned integer")
        for name in ("texture_amplitude", "detail_amplitude"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                bad(name, "must be finite and >= 0")
        if self.medium_jitter is not None and not (0 <= self.medium_jitter <= math.pi):
            bad("medium_jitter", "must be None or lie in [0, pi]")

    @property
    def spoofs_per_domain(self) -> int:
        # round half up, not banker's rounding
        return int(math.floor(self.spoof_ratio * self.samples_per_domain + 0.5))


@dataclass(frozen=True)
class Sample:
    index: int
    image: np.ndarray
    liveness: int
    domain_id: int
    identity_id: int
    attributes: tuple

    @property
    def sample_id(self) -> str:
        return f"s{self.index:06d}"


@dataclass(frozen=True)
class DomainTransform:
    tint: tuple
    brightness: float
    noise_sigma: float
    texture_angle: float = 0.0
    texture_period: float = 4.0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store. ``index`` holds the original synthesis index."""

    spec: SynthSpec
    images: np.ndarray
    liveness: np.ndarray
    domain_id: np.ndarray
    identity_id: np.ndarray
    attributes: np.ndarray
    index: np.ndarray
    transforms: tuple = field(default=())

    def __post_init__(self):
        n = len(self.images)
        for name in ("liveness", "domain_id", "identity_id", "attributes", "index"):
            if len(getattr(self, name)) != n:
                raise FormatError(f"{name}: length {len(getattr(self, name))} != {n} images")
        for arr in (self.images, self.liveness, self.domain_id, self.identity_id,
                    self.attributes, self.index):
            arr.flags.writeable = False

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        return Sample(
            index=int(self.index[i]),
            image=self.images[i],
            liveness=int(self.liveness[i]),
            domain_id=int(self.domain_id[i]),
            identity_id=int(self.identity_id[i]),
            attributes=tuple(int(a) for a in self.attributes[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list:
        return list(self)

    @property
    def sample_ids(self) -> list:
        return [f"s{i:06d}" for i in self.index]

    @property
    def domains(self) -> list:
        return sorted(int(d) for d in np.unique(self.domain_id))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            spec=self.spec,
            images=self.images[rows].copy(),
            liveness=self.liveness[rows].copy(),
            domain_id=self.domain_id[rows].copy(),
            identity_id=self.identity_id[rows].copy(),
            attributes=self.attributes[rows].copy(),
            index=self.index[rows].copy(),
            transforms=self.transforms,
        )

    def select_domains(self, domains) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.domain_id, list(domains))))

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "samples": [
                {
                    "index": int(self.index[i]),
                    "liveness": int(self.liveness[i]),
                    "domain_id": int(self.domain_id[i]),
                    "identity_id": int(self.identity_id[i]),
                    "attributes": [int(a) for a in self.attributes[i]],
                }
                for i in range(len(self))
            ],
        }


def _rng(spec: SynthSpec, *tags) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *tags])


def domain_transforms(spec: SynthSpec) -> tuple:
    """Per-domain nuisance parameters, drawn once from ``spec.seed``.

    Tints sit on evenly spaced hues of a circle in the chromatic plane (random
    rotation), which keeps every pair of domains apart in mean colour. Noise
    levels are stratified over ``NOISE_SIGMA`` in a seeded order, so every
    seed has both a clean and a very noisy domain.
    """
    s = spec.domain_shift_strength
    rot = _rng(spec, 10).uniform(0, 2 * math.pi)
    noise_rank = _rng(spec, 12).permutation(spec.num_domains)
    lo, hi = NOISE_SIGMA
    tex_rot = _rng(spec, 13).uniform(0, math.pi)
    phases = np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3])
    out = []
    for d in range(spec.num_domains):
        rng = _rng(spec, 11, d)
        theta = rot + 2 * math.pi * d / spec.num_domains
        tint = TINT_SCALE * s * math.sqrt(2 / 3) * np.cos(theta - phases)
        brightness = BRIGHTNESS_SCALE * s * rng.uniform(-1, 1)
        sigma = s * (lo + (hi - lo) * (noise_rank[d] + rng.uniform()) / spec.num_domains)
        angle = tex_rot + math.pi * d / spec.num_domains
        period = rng.uniform(*TEXTURE_PERIOD)
        out.append(DomainTransform(tuple(float(t) for t in tint), float(brightness), float(sigma),
                                   float(angle), float(period)))
    return tuple(out)


def _identity_pattern(spec: SynthSpec, identity: int) -> np.ndarray:
    """Coarse blob layout shared by identity pairs, plus a per-identity
    pixel-scale detail pattern that tells the pair apart."""
    rng = _rng(spec, 20, identity // 2 if spec.detail_amplitude else identity)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    img = np.full((3, n, n), 0.5)
    for _ in range(4):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        width = rng.uniform(0.12, 0.25)
        colour = rng.uniform(-0.2, 0.2, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        img += colour[:, None, None] * blob
    if spec.detail_amplitude:
        detail = _rng(spec, 21, identity).choice([-1.0, 1.0], size=(n, n))
        img += spec.detail_amplitude * detail[None]
    return img


def _stamp(shape: int, k: int) -> np.ndarray:
    yy, xx = np.mgrid[0:k, 0:k]
    c, r = (k - 1) / 2, k / 2
    shapes = (
        (np.abs(yy - c) < 1) | (np.abs(xx - c) < 1),           # cross
        (np.maximum(np.abs(yy - c), np.abs(xx - c)) > r - 1.5),  # square ring
        np.abs(yy - xx) < 1,                                    # diagonal
        np.hypot(yy - c, xx - c) < r * 0.6,                     # disc
        np.abs(yy - c) < 1,                                     # bar
        (yy + xx) % 4 < 2,                                      # stripes
    )
    return shapes[shape % len(shapes)].astype(float)


def _attribute_overlay(spec: SynthSpec, attr: int) -> np.ndarray:
    """A distinct stamp per attribute (shape, sign, colour) at a fixed spot."""
    rng = _rng(spec, 30, attr)
    n = spec.image_size
    k = max(4, n // 4)
    y0, x0 = rng.integers(1, n - k - 1, size=2)
    sign = 1.0 if attr % 2 == 0 else -1.0
    colour = 0.7 + 0.3 * rng.random(3)
    overlay = np.zeros((3, n, n))
    overlay[:, y0:y0 + k, x0:x0 + k] = 0.3 * sign * colour[:, None, None] * _stamp(attr, k)[None]
    return overlay


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter with edge replication, per channel."""
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    n_h, n_w = img.shape[1:]
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + n_h, dx:dx + n_w]
    return acc / 9.0


def spoof_texture(spec: SynthSpec, rng: np.random.Generator, transform=None) -> np.ndarray:
    """Sinusoidal moire grating.

    With ``spec.medium_jitter`` set, each domain has its own attack medium: the
    grating orientation and period stay near the domain's values. Otherwise
    both are drawn per sample.
    """
    if spec.medium_jitter is None or transform is None:
        period = rng.uniform(*TEXTURE_PERIOD)
        angle = rng.uniform(0, math.pi)
    else:
        period = float(np.clip(transform.texture_period + rng.uniform(-0.25, 0.25), *TEXTURE_PERIOD))
        angle = transform.texture_angle + rng.uniform(-spec.medium_jitter, spec.medium_jitter)
    phase = rng.uniform(0, 2 * math.pi)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n]
    arg = 2 * math.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period + phase
    return spec.texture_amplitude * np.sin(arg)


def render(spec: SynthSpec, index: int, liveness: int, domain: int, identity: int,
           attributes, transform: DomainTransform) -> np.ndarray:
    """Pure function of its arguments; safe to call in any order or in parallel."""
    rng = _rng(spec, 40, index)
    img = _identity_pattern(spec, identity)
    for a, bit in enumerate(attributes):
        if bit:
            img = img + _attribute_overlay(spec, a)
    if liveness == 0:
        img = box_blur3(img) + spoof_texture(spec, rng, transform)[None]
    img = img + np.asarray(transform.tint)[:, None, None] + transform.brightness
    img = img + rng.normal(0.0, transform.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synthesize(spec: SynthSpec) -> Dataset:
    transforms = domain_transforms(spec)
    n_total = spec.num_domains * spec.samples_per_domain
    liveness = np.ones(n_total, dtype=np.int64)
    domain = np.repeat(np.arange(spec.num_domains), spec.samples_per_domain)
    for d in range(spec.num_domains):
        order = _rng(spec, 50, d).permutation(spec.samples_per_domain)
        spoof_rows = d * spec.samples_per_domain + order[: spec.spoofs_per_domain]
        liveness[spoof_rows] = 0
    label_rng = _rng(spec, 60)
    identity = label_rng.integers(0, spec.num_identities, size=n_total)
    attributes = label_rng.integers(0, 2, size=(n_total, spec.num_attributes))
    images = np.stack([
        render(spec, i, liveness[i], domain[i], identity[i], attributes[i], transforms[domain[i]])
        for i in range(n_total)
    ])
    return Dataset(
        spec=spec,
        images=images,
        liveness=liveness,
        domain_id=domain.astype(np.int64),
        identity_id=identity.astype(np.int64),
        attributes=attributes.astype(np.int64),
        index=np.arange(n_total, dtype=np.int64),
        transforms=transforms,
    )


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple:
    """Stratified disjoint split over (domain_id, liveness) cells."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1) (got {train_fraction!r})")
    if len(dataset) == 0:
        raise ConfigError("cannot split an empty dataset")
    rng = np.random.default_rng([seed, 70])
    train_rows, test_rows = [], []
    cells = sorted(set(zip(dataset.domain_id.tolist(), dataset.liveness.tolist())))
    for d, y in cells:
        rows = np.flatnonzero((dataset.domain_id == d) & (dataset.liveness == y))
        rows = rows[rng.permutation(len(rows))]
        k = int(math.floor(train_fraction * len(rows) + 0.5))
        train_rows.append(rows[:k])
        test_rows.append(rows[k:])
    return (dataset.subset(np.sort(np.concatenate(train_rows))),
            dataset.subset(np.sort(np.concatenate(test_rows))))


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, c, h, w = dataset.images.shape
    with open(path / "images.bin", "wb") as fh:
        fh.write(HEADER.pack(MAGIC, n, c, h, w))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f4").tobytes())
    (path / "manifest.json").write_text(json.dumps(dataset.manifest(), indent=1) + "\n")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"manifest.json: missing in {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json: invalid JSON ({exc})") from exc
    try:
        spec = SynthSpec(**manifest["spec"])
        rows = manifest["samples"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest.json: missing or malformed field {exc}") from exc

    try:
        raw = (path / "images.bin").read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"images.bin: missing in {path}") from exc
    if len(raw) < HEADER.size:
        raise FormatError("images.bin: truncated header")
    magic, n, c, h, w = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"images.bin: bad magic {magic!r}")
    expected = HEADER.size + 4 * n * c * h * w
    if len(raw) != expected:
        raise FormatError(f"images.bin: payload is {len(raw)} bytes, header implies {expected}")
    if len(rows) != n:
        raise FormatError(f"manifest.samples: {len(rows)} entries but images.bin holds {n}")
    if (c, h, w) != (spec.channels, spec.image_size, spec.image_size):
        raise FormatError(f"images.bin: shape {(c, h, w)} does not match manifest.spec")
    images = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(n, c, h, w)
    images = images.astype(np.float32)

    def column(key, width=None):
        try:
            arr = np.array([r[key] for r in rows], dtype=np.int64)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"manifest.samples[].{key}: {exc}") from exc
        if width is not None and arr.shape != (n, width):
            raise FormatError(f"manifest.samples[].{key}: expected width {width}")
        return arr

    return Dataset(
        spec=spec,
        images=images,
        liveness=column("liveness"),
        domain_id=column("domain_id"),
        identity_id=column("identity_id"),
        attributes=column("attributes", spec.num_attributes),
        index=column("index"),
        transforms=domain_transforms(spec),
    )
