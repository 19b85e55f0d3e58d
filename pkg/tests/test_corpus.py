import itertools
import json
from dataclasses import replace

import numpy as np
import pytest

from timbre_gmvae import corpus as C
from timbre_gmvae import dsp
from timbre_gmvae.corpus import ARCHETYPES, CorpusConfig


@pytest.fixture(scope="module")
def small_corpus():
    return C.build_corpus(CorpusConfig(n_instruments=3, n_pitches=6, samples_per_pair=4, seed=3))


class TestSynthTone:
    def test_pure_sine_limit(self):
        arch = replace(ARCHETYPES[5], rolloff=40.0, inharmonicity=0.0, brightness_jitter=0.0)
        x = C.synth_tone(arch, 69, np.random.default_rng(0))
        spec = np.abs(np.fft.rfft(x[2000:10192] * np.hanning(8192)))
        freqs = np.fft.rfftfreq(8192, 1 / 22050)
        peak = freqs[np.argmax(spec)]
        assert abs(peak - 440) < 22050 / 8192 * 1.5
        second = spec[np.abs(freqs - 880) < 10].max()
        assert second < 1e-3 * spec.max()

    def test_a4_is_440(self):
        assert C.midi_to_hz(69) == 440.0

    def test_peak_normalised(self):
        x = C.synth_tone(ARCHETYPES[0], 60, np.random.default_rng(1))
        assert np.max(np.abs(x)) == pytest.approx(0.9)
        assert x.size == int(0.6 * 22050)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            C.synth_tone(ARCHETYPES[5], 40, np.random.default_rng(0), pitch_range=(60, 76))

    def test_archetype_centroids_differ(self):
        stats = dsp.NormalizationStats(np.log(1e-10), 10.0)
        archs = ARCHETYPES[:6]
        for midi in (52, 60, 66, 72):
            cents = {}
            for a in archs:
                lo, hi = a.midi_range(48, 30)
                if lo <= midi <= hi:
                    vals = [dsp.spectral_centroid(stats.normalize(dsp.log_mel(
                        C.synth_tone(a, midi, np.random.default_rng(s)))), stats) for s in range(3)]
                    cents[a.name] = np.mean(vals)
            for (_, c1), (_, c2) in itertools.combinations(cents.items(), 2):
                assert abs(c1 - c2) / min(c1, c2) > 0.10

    def test_archetype_table_invariants(self):
        params = [tuple(v for k, v in a.__dict__.items() if k != "name") for a in ARCHETYPES]
        assert len(set(params)) == len(params)
        for a in ARCHETYPES:
            assert a.range_frac[0] <= a.range_frac[1]
            assert min(a.attack, a.decay, a.release) > 0
        full = [a for a in ARCHETYPES[:6] if a.midi_range(48, 30) == (48, 77)]
        assert len(full) == 1


class TestBuild:
    def test_tiny(self):
        c = C.build_corpus(CorpusConfig(n_instruments=2, n_pitches=2, samples_per_pair=1))
        assert len(c) == 4
        assert np.isfinite([c.stats.min_log_mag, c.stats.max_log_mag]).all()

    @pytest.mark.parametrize("k,m", [(1, 5), (3, 1)])
    def test_config_error(self, k, m):
        with pytest.raises(C.CorpusConfigError):
            C.build_corpus(CorpusConfig(n_instruments=k, n_pitches=m, samples_per_pair=1))

    def test_shapes_and_range(self, small_corpus):
        assert small_corpus.spectrograms.shape[1:] == (43, 256)
        assert small_corpus.spectrograms.min() >= -1 and small_corpus.spectrograms.max() <= 1

    def test_every_pair_present(self, small_corpus):
        ranges = small_corpus.pitch_ranges()
        seen = set(zip(small_corpus.instrument.tolist(), small_corpus.pitch.tolist()))
        for k, (lo, hi) in enumerate(ranges):
            for p in range(lo, hi + 1):
                assert (k, p) in seen

    def test_stats_from_train_only(self, small_corpus):
        train = small_corpus.indices("train")
        assert small_corpus.spectrograms[train].min() == -1.0
        assert small_corpus.spectrograms[train].max() == 1.0

    def test_deterministic_bytes(self, tmp_path):
        cfg = CorpusConfig(n_instruments=2, n_pitches=3, samples_per_pair=2, seed=9)
        a = C.build_corpus(cfg, out_dir=tmp_path / "a")
        b = C.build_corpus(cfg, out_dir=tmp_path / "b")
        assert a.spectrograms.tobytes() == b.spectrograms.tobytes()
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
        for rec in a.manifest.records:
            assert (tmp_path / "a" / rec.path).read_bytes() == (tmp_path / "b" / rec.path).read_bytes()

    def test_stratified_split(self):
        labels = np.repeat(np.arange(5), [63, 251, 120, 99, 180])
        split = C.stratified_split(labels, 0.1, np.random.default_rng(0))
        for k, n in zip(range(5), [63, 251, 120, 99, 180]):
            n_val = np.sum((labels == k) & (split == "val"))
            assert abs(n_val - 0.1 * n) <= 1


class TestStorage:
    def test_spec_roundtrip(self, tmp_path):
        x = np.random.default_rng(0).uniform(-1, 1, (43, 256)).astype(np.float32)
        C.write_spec(tmp_path / "x.spec", x)
        raw = (tmp_path / "x.spec").read_bytes()
        assert raw[:6] == b"SPEC1\0" and len(raw) == 6 + 8 + 43 * 256 * 4
        assert C.read_spec(tmp_path / "x.spec").tobytes() == x.tobytes()

    def test_spec_truncated(self, tmp_path):
        C.write_spec(tmp_path / "x.spec", np.zeros((3, 4)))
        (tmp_path / "y.spec").write_bytes((tmp_path / "x.spec").read_bytes()[:-2])
        with pytest.raises(ValueError):
            C.read_spec(tmp_path / "y.spec")

    def test_manifest_roundtrip(self, small_corpus):
        text = small_corpus.manifest.to_json()
        again = C.CorpusManifest.from_json(text)
        assert again == small_corpus.manifest
        assert again.to_json() == text
        doc = json.loads(text)
        assert doc["M"] == 6 and doc["K"] == 3

    def test_corpus_save_load(self, small_corpus, tmp_path):
        small_corpus.save(tmp_path)
        back = C.Corpus.load(tmp_path)
        assert back.manifest == small_corpus.manifest
        assert back.spectrograms.tobytes() == small_corpus.spectrograms.tobytes()


class TestMasking:
    def test_zero(self, small_corpus):
        m = C.mask_labels(small_corpus, 0, np.random.default_rng(0))
        train = m.indices("train")
        assert np.all(m.instrument[train] == -1)
        val = m.indices("val")
        np.testing.assert_array_equal(m.instrument[val], small_corpus.instrument[val])

    def test_hundred(self, small_corpus):
        m = C.mask_labels(small_corpus, 100, np.random.default_rng(0))
        np.testing.assert_array_equal(m.instrument, small_corpus.instrument)

    def test_pitch_never_masked(self, small_corpus):
        m = C.mask_labels(small_corpus, 25, np.random.default_rng(0))
        np.testing.assert_array_equal(m.pitch, small_corpus.pitch)

    @pytest.mark.parametrize("n", [25, 50, 75])
    def test_per_instrument_fraction(self, n):
        c = C.build_corpus(CorpusConfig(n_instruments=3, n_pitches=4, samples_per_pair=10, seed=1))
        m = C.mask_labels(c, n, np.random.default_rng(2))
        train = c.indices("train")
        for k in range(3):
            idx = train[c.instrument[train] == k]
            kept = np.sum(m.instrument[idx] == k)
            assert abs(kept - n / 100 * idx.size) <= 1
        assert m.manifest.n_labels_percent == n


class TestBatches:
    def _corpus(self, n_train):
        recs = [C.Record(i, f"{i}.spec", 60, 0, 0, "train" if i < n_train else "val") for i in range(n_train + 3)]
        man = C.CorpusManifest(2, 2, ["a", "b"], 48, recs, dsp.NormalizationStats(0, 1), 0, {}, "x")
        return C.Corpus(man, np.zeros((len(recs), 1, 1), dtype=np.float32))

    def test_sizes(self):
        sizes = [len(b) for b in C.batches(self._corpus(130), "train", 128, np.random.default_rng(0))]
        assert sizes == [128, 2]

    def test_partition_and_determinism(self):
        c = self._corpus(300)
        a = list(C.batches(c, "train", 64, np.random.default_rng(5)))
        b = list(C.batches(c, "train", 64, np.random.default_rng(5)))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        np.testing.assert_array_equal(np.sort(np.concatenate(a)), np.arange(300))

    def test_empty_split(self):
        c = self._corpus(0)
        with pytest.raises(ValueError):
            list(C.batches(c, "train"))
