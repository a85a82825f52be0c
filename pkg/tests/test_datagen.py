import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtda import datagen as G
from dtda.errors import ConfigError, FormatError

small_specs = st.builds(
    G.SynthSpec,
    num_domains=st.integers(2, 4),
    samples_per_domain=st.integers(1, 12),
    image_size=st.sampled_from([8, 16]),
    num_identities=st.integers(2, 5),
    num_attributes=st.integers(1, 4),
    spoof_ratio=st.floats(0.05, 0.95),
    domain_shift_strength=st.floats(0, 3),
    seed=st.integers(0, 2**63),
)


@pytest.fixture(scope="module")
def default_ds():
    return G.synthesize(G.SynthSpec())


@settings(max_examples=40, deadline=None)
@given(small_specs)
def test_counts_labels_and_range(spec):
    ds = G.synthesize(spec)
    assert len(ds) == spec.num_domains * spec.samples_per_domain
    for d in range(spec.num_domains):
        assert (ds.liveness[ds.domain_id == d] == 0).sum() == spec.spoofs_per_domain
    assert np.isfinite(ds.images).all()
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert ds.images.dtype == np.float32
    assert ds.domain_id.max() < spec.num_domains and ds.identity_id.max() < spec.num_identities
    assert set(np.unique(ds.attributes)) <= {0, 1}


def test_spoof_count_rounds_half_up():
    assert G.SynthSpec(samples_per_domain=100, spoof_ratio=0.5).spoofs_per_domain == 50
    assert G.SynthSpec(samples_per_domain=5, spoof_ratio=0.5).spoofs_per_domain == 3
    assert G.SynthSpec(samples_per_domain=3, spoof_ratio=0.5).spoofs_per_domain == 2


def test_example_sizes():
    ds = G.synthesize(G.SynthSpec(num_domains=3, samples_per_domain=100))
    assert len(ds) == 300
    assert [(ds.liveness[ds.domain_id == d] == 0).sum() for d in range(3)] == [50, 50, 50]


def test_deterministic():
    a = G.synthesize(G.SynthSpec(seed=7, samples_per_domain=10))
    b = G.synthesize(G.SynthSpec(seed=7, samples_per_domain=10))
    assert np.array_equal(a.images, b.images) and a.manifest() == b.manifest()
    c = G.synthesize(G.SynthSpec(seed=8, samples_per_domain=10))
    assert not np.array_equal(a.images, c.images)


def test_render_is_order_free():
    spec = G.SynthSpec(samples_per_domain=6)
    ds = G.synthesize(spec)
    s = ds[17]
    again = G.render(spec, s.index, s.liveness, s.domain_id, s.identity_id, s.attributes,
                     ds.transforms[s.domain_id])
    assert np.array_equal(again, s.image)


@pytest.mark.parametrize("kw", [
    dict(num_domains=1), dict(samples_per_domain=0), dict(spoof_ratio=0.0), dict(spoof_ratio=1.5),
    dict(num_identities=1), dict(num_attributes=0), dict(domain_shift_strength=-1.0),
    dict(channels=1), dict(texture_amplitude=-0.1), dict(medium_jitter=4.0),
])
def test_invalid_spec(kw):
    with pytest.raises(ConfigError, match="SynthSpec." + next(iter(kw))):
        G.SynthSpec(**kw)


def band_peak(images, period=(3.0, 5.0)):
    """Largest spectral power in the ring of the moire periods, channel-averaged."""
    n = images.shape[-1]
    f = np.fft.fftfreq(n)
    r = np.hypot(*np.meshgrid(f, f, indexing="ij"))
    ring = (r >= 1 / period[1] - 1 / n) & (r <= 1 / period[0] + 1 / n)
    grey = images.mean(axis=1)
    power = np.abs(np.fft.fft2(grey - grey.mean(axis=(1, 2), keepdims=True))) ** 2
    return power[:, ring].max(axis=1)


def best_threshold_accuracy(feature, label):
    order = np.sort(feature)
    cands = np.concatenate([[order[0] - 1], (order[1:] + order[:-1]) / 2, [order[-1] + 1]])
    return max(np.mean((feature > c) == (label == 0)) for c in cands)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_texture_band_separates_liveness(seed):
    """A single threshold on one spectral feature, pooled over all domains."""
    ds = G.synthesize(G.SynthSpec(seed=seed))
    assert best_threshold_accuracy(band_peak(ds.images), ds.liveness) > 0.95


@pytest.mark.parametrize("seed,shift", [(0, 1.0), (1, 1.0), (2, 0.5), (3, 2.0)])
def test_domains_differ_in_mean_colour(seed, shift):
    ds = G.synthesize(G.SynthSpec(seed=seed, domain_shift_strength=shift))
    means = [ds.images[ds.domain_id == d].mean(axis=(0, 2, 3)) for d in range(4)]
    for a, b in itertools.combinations(means, 2):
        assert np.abs(a - b).max() >= 0.5 * shift * G.TINT_SCALE


def test_zero_shift_means_identical_domain_transforms():
    ts = G.domain_transforms(G.SynthSpec(domain_shift_strength=0.0))
    assert all(t.tint == (0.0, 0.0, 0.0) and t.brightness == 0.0 and t.noise_sigma == 0.0
               for t in ts)


def test_blur_removes_identity_detail():
    spec = G.SynthSpec()
    base = G._identity_pattern(spec, 0)
    pair = G._identity_pattern(spec, 1)
    gap = np.abs(base - pair).mean()
    blurred_gap = np.abs(G.box_blur3(base) - G.box_blur3(pair)).mean()
    assert blurred_gap < 0.5 * gap


class TestSplit:
    def test_sizes_and_partition(self):
        ds = G.synthesize(G.SynthSpec(num_domains=3, samples_per_domain=100))
        a, b = G.split(ds, 0.8, seed=1)
        assert (len(a), len(b)) == (240, 60)
        assert set(a.index).isdisjoint(b.index)
        assert sorted(np.concatenate([a.index, b.index])) == list(range(300))

    @settings(max_examples=25, deadline=None)
    @given(small_specs, st.floats(0.05, 0.95), st.integers(0, 1000))
    def test_stratified(self, spec, frac, seed):
        ds = G.synthesize(spec)
        a, _ = G.split(ds, frac, seed)
        for d, y in itertools.product(range(spec.num_domains), (0, 1)):
            cell = ((ds.domain_id == d) & (ds.liveness == y)).sum()
            got = ((a.domain_id == d) & (a.liveness == y)).sum()
            assert abs(got - frac * cell) <= 1

    def test_deterministic(self, default_ds):
        a1, _ = G.split(default_ds, 0.7, 3)
        a2, _ = G.split(default_ds, 0.7, 3)
        assert np.array_equal(a1.index, a2.index)

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.5, 2.0])
    def test_bad_fraction(self, default_ds, frac):
        with pytest.raises(ConfigError):
            G.split(default_ds, frac, 0)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = G.synthesize(G.SynthSpec(samples_per_domain=8, seed=5))
        G.save_dataset(ds, tmp_path)
        again = G.load_dataset(tmp_path)
        assert np.array_equal(again.images, ds.images)
        assert again.manifest() == ds.manifest()
        assert again.transforms == ds.transforms

    def test_header_layout(self, tmp_path):
        ds = G.synthesize(G.SynthSpec(samples_per_domain=2))
        G.save_dataset(ds, tmp_path)
        raw = (tmp_path / "images.bin").read_bytes()
        assert raw[:4] == b"DTDA" and len(raw) == 20 + 4 * ds.images.size
        assert np.frombuffer(raw[4:20], "<u4").tolist() == [8, 3, 32, 32]

    def _saved(self, tmp_path):
        G.save_dataset(G.synthesize(G.SynthSpec(samples_per_domain=2)), tmp_path)
        return tmp_path

    def test_truncated_payload(self, tmp_path):
        p = self._saved(tmp_path) / "images.bin"
        p.write_bytes(p.read_bytes()[:-4])
        with pytest.raises(FormatError, match="images.bin"):
            G.load_dataset(tmp_path)

    def test_truncated_header(self, tmp_path):
        p = self._saved(tmp_path) / "images.bin"
        p.write_bytes(p.read_bytes()[:10])
        with pytest.raises(FormatError, match="header"):
            G.load_dataset(tmp_path)

    def test_bad_magic(self, tmp_path):
        p = self._saved(tmp_path) / "images.bin"
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            G.load_dataset(tmp_path)

    def test_count_mismatch(self, tmp_path):
        m = self._saved(tmp_path) / "manifest.json"
        data = json.loads(m.read_text())
        data["samples"].pop()
        m.write_text(json.dumps(data))
        with pytest.raises(FormatError, match="manifest.samples"):
            G.load_dataset(tmp_path)

    def test_bad_attribute_width(self, tmp_path):
        m = self._saved(tmp_path) / "manifest.json"
        data = json.loads(m.read_text())
        data["samples"][0]["attributes"] = [1]
        m.write_text(json.dumps(data))
        with pytest.raises(FormatError, match="attributes"):
            G.load_dataset(tmp_path)

    def test_missing_and_corrupt_manifest(self, tmp_path):
        with pytest.raises(FormatError, match="manifest.json"):
            G.load_dataset(tmp_path)
        self._saved(tmp_path)
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError, match="manifest.json"):
            G.load_dataset(tmp_path)


def test_dataset_is_immutable(default_ds):
    with pytest.raises(ValueError):
        default_ds.images[0, 0, 0, 0] = 0.5


def test_select_domains_and_ids(default_ds):
    sub = default_ds.select_domains([1, 2])
    assert sub.domains == [1, 2]
    assert all(default_ds[int(i)].sample_id == sid for i, sid in zip(sub.index, sub.sample_ids))
