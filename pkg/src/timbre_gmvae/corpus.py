"""Synthetic labelled corpus of instrument notes.

A fixed table of additive-synthesis archetypes plays every pitch in its
range; notes are rendered, turned into normalised log-mel spectrograms and
split 90/10 per instrument.  The whole corpus is a pure function of
(config, seed).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import dsp
from .dsp import MelConfig, NormalizationStats

SPEC_MAGIC = b"SPEC1\0"
TONE_SECONDS = 0.6


class CorpusConfigError(ValueError):
    pass


@dataclass(frozen=True)
class InstrumentArchetype:
    name: str
    rolloff: float  # partial n has amplitude n**-rolloff
    even_gain: float  # extra gain on even partials
    inharmonicity: float  # B in f_n = n f0 sqrt(1 + B n^2)
    attack: float
    decay: float
    sustain: float  # level, not a time
    release: float
    partial_damping: float  # per-partial extra decay rate (1/s per harmonic number)
    brightness_jitter: float  # +- range added to rolloff per note
    range_frac: tuple[float, float]  # pitch range as a fraction of the corpus range

    def midi_range(self, midi_lo: int, n_pitches: int) -> tuple[int, int]:
        top = n_pitches - 1
        lo = int(round(self.range_frac[0] * top))
        hi = int(round(self.range_frac[1] * top))
        return midi_lo + lo, midi_lo + max(hi, lo)


# Index 0 is the only archetype spanning every pitch (the piano analogue).
ARCHETYPES: tuple[InstrumentArchetype, ...] = (
    InstrumentArchetype("keys", 1.7, 1.0, 4e-4, 0.004, 0.25, 0.25, 0.05, 0.35, 0.15, (0.0, 1.0)),
    InstrumentArchetype("bowed_hi", 0.75, 0.9, 0.0, 0.07, 0.10, 0.85, 0.05, 0.0, 0.12, (0.35, 0.97)),
    InstrumentArchetype("bowed_lo", 1.25, 0.55, 0.0, 0.05, 0.12, 0.8, 0.05, 0.0, 0.12, (0.0, 0.6)),
    InstrumentArchetype("reed", 1.0, 0.08, 0.0, 0.025, 0.05, 0.9, 0.04, 0.0, 0.1, (0.1, 0.75)),
    InstrumentArchetype("horn", 0.45, 1.0, 0.0, 0.06, 0.15, 0.75, 0.05, 0.0, 0.15, (0.03, 0.65)),
    InstrumentArchetype("flute", 3.6, 0.5, 0.0, 0.05, 0.08, 0.9, 0.05, 0.0, 0.2, (0.4, 0.95)),
    InstrumentArchetype("double_reed", 0.9, 0.7, 0.0, 0.03, 0.08, 0.85, 0.04, 0.0, 0.1, (0.0, 0.55)),
    InstrumentArchetype("oboe", 0.6, 0.35, 0.0, 0.02, 0.06, 0.85, 0.04, 0.0, 0.1, (0.45, 0.97)),
    InstrumentArchetype("trumpet", 0.5, 1.0, 0.0, 0.03, 0.1, 0.8, 0.04, 0.0, 0.15, (0.3, 0.85)),
    InstrumentArchetype("trombone", 1.4, 1.0, 0.0, 0.05, 0.12, 0.8, 0.05, 0.0, 0.15, (0.0, 0.5)),
    InstrumentArchetype("sax", 0.85, 0.6, 1e-4, 0.04, 0.1, 0.8, 0.05, 0.0, 0.15, (0.2, 0.8)),
    InstrumentArchetype("pluck", 1.3, 0.8, 2e-4, 0.002, 0.15, 0.1, 0.05, 0.6, 0.15, (0.15, 0.9)),
)


@dataclass(frozen=True)
class CorpusConfig:
    n_instruments: int = 6
    n_pitches: int = 30
    midi_lo: int = 48
    total_samples: int = 1800
    samples_per_pair: int | None = None  # overrides total_samples when set
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.n_instruments < 2 or self.n_pitches < 2:
            raise CorpusConfigError("need at least 2 instruments and 2 pitches")
        if self.n_instruments > len(ARCHETYPES):
            raise CorpusConfigError(f"at most {len(ARCHETYPES)} instruments available")
        if not 0 <= self.val_fraction < 1:
            raise CorpusConfigError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DESK_CONFIG = CorpusConfig()
FULL_CONFIG = CorpusConfig(n_instruments=12, n_pitches=82, midi_lo=24, total_samples=1885)


def midi_to_hz(midi: float) -> float:
    return 440.0 * 2.0 ** ((midi - 69) / 12)


def adsr(n: int, sr: int, a: float, d: float, s: float, r: float) -> np.ndarray:
    t = np.arange(n) / sr
    env = np.where(t < a, t / a, s + (1 - s) * np.exp(-(t - a) / d))
    rel_start = n / sr - r
    env = np.where(t > rel_start, env * np.clip((n / sr - t) / r, 0, 1), env)
    return env


PARTIAL_JITTER = 0.1  # log-amplitude std per partial


def synth_tone(arch: InstrumentArchetype, midi: int, rng: np.random.Generator,
               sample_rate: int = 22050, pitch_range: tuple[int, int] | None = None) -> np.ndarray:
    """Render a 600 ms note of ``arch`` at ``midi``, peak-normalised to 0.9."""
    if pitch_range is not None and not pitch_range[0] <= midi <= pitch_range[1]:
        raise ValueError(f"midi {midi} outside {arch.name} range {pitch_range}")
    n = int(round(TONE_SECONDS * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = midi_to_hz(midi)
    rolloff = arch.rolloff + rng.uniform(-arch.brightness_jitter, arch.brightness_jitter)
    k = np.arange(1, 61)
    freqs = f0 * k * np.sqrt(1.0 + arch.inharmonicity * k**2)
    keep = freqs < 0.95 * sample_rate / 2
    k, freqs = k[keep], freqs[keep]
    amps = k.astype(float) ** -rolloff
    amps[k % 2 == 0] *= arch.even_gain
    amps *= np.exp(rng.normal(0.0, PARTIAL_JITTER, size=k.size))
    phases = rng.uniform(0, 2 * np.pi, size=k.size)
    damping = np.exp(-np.outer(arch.partial_damping * (k - 1), t))
    x = (amps[:, None] * damping * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    jit = np.exp(rng.uniform(-0.1, 0.1, size=3))
    x *= adsr(n, sample_rate, arch.attack * jit[0], arch.decay * jit[1], arch.sustain, arch.release * jit[2])
    x += rng.normal(0.0, 1e-3, size=n)
    return 0.9 * x / np.max(np.abs(x))


# ------------------------------------------------------------------- storage
def write_spec(path: str | Path, spec: np.ndarray) -> None:
    spec = np.asarray(spec, dtype="<f4")
    t, f = spec.shape
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC + struct.pack("<II", t, f) + spec.tobytes(order="C"))


def read_spec(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != SPEC_MAGIC or len(raw) < 14:
        raise ValueError(f"{path}: not a SPEC1 file")
    t, f = struct.unpack("<II", raw[6:14])
    if len(raw) != 14 + 4 * t * f:
        raise ValueError(f"{path}: truncated SPEC1 payload")
    return np.frombuffer(raw, dtype="<f4", offset=14).reshape(t, f).astype(np.float32)


@dataclass
class Record:
    id: int
    path: str
    midi: int
    pitch_label: int
    instrument_label: int | None
    split: str


@dataclass
class CorpusManifest:
    n_pitches: int
    n_instruments: int
    instrument_names: list[str]
    midi_lo: int
    records: list[Record]
    stats: NormalizationStats
    seed: int
    config: dict
    config_hash: str
    n_labels_percent: float = 100.0

    def to_json(self) -> str:
        doc = {
            "M": self.n_pitches,
            "K": self.n_instruments,
            "instrument_names": self.instrument_names,
            "midi_lo": self.midi_lo,
            "records": [asdict(r) for r in self.records],
            "stats": {"min_log_mag": self.stats.min_log_mag, "max_log_mag": self.stats.max_log_mag},
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "n_labels_percent": self.n_labels_percent,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        d = json.loads(text)
        return cls(
            n_pitches=d["M"],
            n_instruments=d["K"],
            instrument_names=list(d["instrument_names"]),
            midi_lo=d["midi_lo"],
            records=[Record(**r) for r in d["records"]],
            stats=NormalizationStats(**d["stats"]),
            seed=d["seed"],
            config=d["config"],
            config_hash=d["config_hash"],
            n_labels_percent=d.get("n_labels_percent", 100.0),
        )


@dataclass
class Corpus:
    """Manifest plus the stacked spectrograms, (n, T, F) float32."""

    manifest: CorpusManifest
    spectrograms: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_pitches(self) -> int:
        return self.manifest.n_pitches

    @property
    def n_instruments(self) -> int:
        return self.manifest.n_instruments

    @property
    def stats(self) -> NormalizationStats:
        return self.manifest.stats

    def __len__(self) -> int:
        return len(self.manifest.records)

    def _column(self, name):
        if name not in self._cache:
            recs = self.manifest.records
            if name == "pitch":
                v = np.array([r.pitch_label for r in recs], dtype=np.int64)
            elif name == "instrument":
                v = np.array([-1 if r.instrument_label is None else r.instrument_label for r in recs],
                             dtype=np.int64)
            elif name == "split":
                v = np.array([r.split for r in recs])
            else:
                v = np.array([r.midi for r in recs], dtype=np.int64)
            self._cache[name] = v
        return self._cache[name]

    @property
    def pitch(self) -> np.ndarray:
        return self._column("pitch")

    @property
    def instrument(self) -> np.ndarray:
        """Instrument labels, -1 where masked."""
        return self._column("instrument")

    @property
    def midi(self) -> np.ndarray:
        return self._column("midi")

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self._column("split") == split)

    def pitch_ranges(self) -> list[tuple[int, int]]:
        """Per-instrument (lo, hi) pitch labels, from the generating table."""
        cfg = self.manifest.config
        out = []
        for arch in ARCHETYPES[: self.n_instruments]:
            lo, hi = arch.midi_range(cfg["midi_lo"], cfg["n_pitches"])
            out.append((lo - cfg["midi_lo"], hi - cfg["midi_lo"]))
        return out

    def save(self, root: str | Path) -> Path:
        root = Path(root)
        (root / "spectrograms").mkdir(parents=True, exist_ok=True)
        for rec, spec in zip(self.manifest.records, self.spectrograms):
            write_spec(root / rec.path, spec)
        path = root / "manifest.json"
        path.write_text(self.manifest.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, root: str | Path) -> "Corpus":
        root = Path(root)
        manifest = CorpusManifest.from_json((root / "manifest.json").read_text(encoding="utf-8"))
        specs = np.stack([read_spec(root / r.path) for r in manifest.records])
        return cls(manifest, specs)


# -------------------------------------------------------------------- build
def instrument_counts(cfg: CorpusConfig, ranges: Sequence[tuple[int, int]],
                      rng: np.random.Generator) -> list[int]:
    sizes = [hi - lo + 1 for lo, hi in ranges]
    if cfg.samples_per_pair is not None:
        return [s * cfg.samples_per_pair for s in sizes]
    weights = rng.uniform(0.35, 1.0, size=len(sizes))
    raw = cfg.total_samples * weights / weights.sum()
    return [max(s, int(round(c))) for s, c in zip(sizes, raw)]


def stratified_split(labels: np.ndarray, val_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Array of "train"/"val", with round(val_fraction * n_k) val examples per class."""
    split = np.full(labels.size, "train", dtype=object)
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        n_val = int(round(val_fraction * idx.size))
        split[rng.permutation(idx)[:n_val]] = "val"
    return split


def build_corpus(cfg: CorpusConfig = DESK_CONFIG, mel: MelConfig = MelConfig(),
                 out_dir: str | Path | None = None) -> Corpus:
    cfg.validate()
    root_seq = np.random.SeedSequence(cfg.seed)
    plan_rng = np.random.default_rng(root_seq.spawn(1)[0])
    archs = ARCHETYPES[: cfg.n_instruments]
    ranges = [a.midi_range(cfg.midi_lo, cfg.n_pitches) for a in archs]
    counts = instrument_counts(cfg, ranges, plan_rng)

    plan: list[tuple[int, int]] = []
    for k, ((lo, hi), n) in enumerate(zip(ranges, counts)):
        pitches = np.arange(lo, hi + 1)
        reps = np.resize(pitches, n)  # every pitch at least once, then cycle
        plan.extend((k, int(m)) for m in np.sort(reps))

    note_seqs = root_seq.spawn(len(plan) + 1)[1:]
    log_mels = np.empty((len(plan), mel.n_frames, mel.n_mels), dtype=np.float64)
    for i, ((k, midi), seq) in enumerate(zip(plan, note_seqs)):
        wave_ = synth_tone(archs[k], midi, np.random.default_rng(seq), mel.sample_rate, ranges[k])
        log_mels[i] = dsp.log_mel(wave_, mel)

    inst = np.array([k for k, _ in plan])
    split = stratified_split(inst, cfg.val_fraction, plan_rng)
    train = split == "train"
    stats = NormalizationStats(float(log_mels[train].min()), float(log_mels[train].max()))
    specs = stats.normalize(log_mels).astype(np.float32)

    records = [
        Record(id=i, path=f"spectrograms/{i:05d}.spec", midi=midi, pitch_label=midi - cfg.midi_lo,
               instrument_label=k, split=str(split[i]))
        for i, (k, midi) in enumerate(plan)
    ]
    manifest = CorpusManifest(
        n_pitches=cfg.n_pitches,
        n_instruments=cfg.n_instruments,
        instrument_names=[a.name for a in archs],
        midi_lo=cfg.midi_lo,
        records=records,
        stats=stats,
        seed=cfg.seed,
        config=cfg.to_dict(),
        config_hash=cfg.hash(),
    )
    corpus = Corpus(manifest, specs)
    if out_dir is not None:
        corpus.save(out_dir)
    return corpus


def mask_labels(corpus: Corpus, n_percent: float, rng: np.random.Generator) -> Corpus:
    """Keep instrument labels on n_percent of each instrument's train examples."""
    if not 0 <= n_percent <= 100:
        raise ValueError("n_percent must be in [0, 100]")
    recs = corpus.manifest.records
    keep = np.zeros(len(recs), dtype=bool)
    true = np.array([-1 if r.instrument_label is None else r.instrument_label for r in recs])
    train = np.array([r.split == "train" for r in recs])
    keep[~train] = True
    for k in np.unique(true[train & (true >= 0)]):
        idx = np.flatnonzero(train & (true == k))
        n_keep = int(round(n_percent / 100 * idx.size))
        keep[rng.permutation(idx)[:n_keep]] = True
    new_recs = [r if keep[i] else replace(r, instrument_label=None) for i, r in enumerate(recs)]
    manifest = replace(corpus.manifest, records=new_recs, n_labels_percent=float(n_percent))
    return Corpus(manifest, corpus.spectrograms)


def batches(corpus: Corpus, split: str, batch_size: int = 128,
            rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Shuffled index batches covering ``split`` once; the short tail batch is kept."""
    idx = corpus.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    if rng is not None:
        idx = rng.permutation(idx)
    for start in range(0, idx.size, batch_size):
        yield idx[start : start + batch_size]
