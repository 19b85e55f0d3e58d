"""Latent-space applications: component sampling, timbre transfer, traversal, export.

Transfer and traversal operate on posterior means, so they are deterministic
for a fixed checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import Corpus
from .model import GmvaeModel, MixturePrior, decode, encode

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class SynthesisRequest:
    pitch_class: int
    instrument_class: int
    w: float = 0.0
    repetitions: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("w must be non-negative")
        if self.repetitions < 1:
            raise ValueError("repetitions must be positive")


@dataclass(frozen=True)
class TransferRequest:
    source: np.ndarray
    source_class: int
    target_class: int
    alphas: tuple = DEFAULT_ALPHAS

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alpha values must lie in [0, 1]")
        if self.source_class == self.target_class and any(a != 0 for a in self.alphas):
            raise ValueError("source and target class coincide")


def _check_class(prior: MixturePrior, class_id: int, what: str) -> None:
    if not 0 <= int(class_id) < prior.n_components:
        raise ValueError(f"{what} class {class_id} outside [0, {prior.n_components})")


def sample_component(prior: MixturePrior, class_id: int, w: float,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw from N(mu_class, w * std^2 I).

    ``w`` multiplies the covariance, so the spread grows as sqrt(w).  With
    w=0 this is a lookup of the component mean and ``rng`` is left untouched.
    """
    _check_class(prior, class_id, "component")
    if w < 0:
        raise ValueError("w must be non-negative")
    mu = prior.means.data[int(class_id)].astype(np.float64)
    if w == 0:
        return mu.copy()
    if rng is None:
        raise ValueError("an rng is required when w > 0")
    return mu + np.sqrt(w) * prior.std * rng.standard_normal(mu.shape)


def synthesize(model: GmvaeModel, req: SynthesisRequest) -> np.ndarray:
    """(repetitions, T, F) spectrograms decoded from sampled pitch and timbre codes."""
    if model.mode != "gmvae":
        raise ValueError("synthesis needs a model with a timbre mixture prior")
    _check_class(model.pitch_prior, req.pitch_class, "pitch")
    _check_class(model.timbre_prior, req.instrument_class, "instrument")
    rng = np.random.default_rng(req.seed)
    z_p, z_t = [], []
    for _ in range(req.repetitions):
        z_p.append(sample_component(model.pitch_prior, req.pitch_class, req.w, rng))
        z_t.append(sample_component(model.timbre_prior, req.instrument_class, req.w, rng))
    return decode(model, np.stack(z_p), np.stack(z_t))


def transfer_codes(z_t: np.ndarray, mu_source: np.ndarray, mu_target: np.ndarray,
                   alpha: float) -> np.ndarray:
    """z_t + alpha * (mu_target - mu_source)."""
    return np.asarray(z_t, dtype=np.float64) + alpha * (np.asarray(mu_target, np.float64)
                                                         - np.asarray(mu_source, np.float64))


def transfer_timbre(model: GmvaeModel, req: TransferRequest) -> dict[float, np.ndarray]:
    """Map each alpha to the (B, T, F) transferred spectrograms of the sources."""
    prior = model.timbre_prior
    if model.mode != "gmvae":
        raise ValueError("timbre transfer needs a model with a timbre mixture prior")
    _check_class(prior, req.source_class, "source")
    _check_class(prior, req.target_class, "target")
    x = np.asarray(req.source)
    if x.ndim == 2:
        x = x[None]
    z_p, _ = encode(model, x, "pitch")
    z_t, _ = encode(model, x, "timbre")
    mu = prior.means.data
    out = {}
    for a in req.alphas:
        if a == 0:
            codes = z_t
        else:
            codes = transfer_codes(z_t, mu[req.source_class], mu[req.target_class], a).astype(z_t.dtype)
        out[float(a)] = decode(model, z_p, codes)
    return out


def traverse_dimension(model: GmvaeModel, x: np.ndarray, dim: int, delta: float) -> np.ndarray:
    """Decode with ``delta`` added to one timbre dimension; pitch code untouched."""
    L = model.config.latent
    if not 0 <= dim < L:
        raise ValueError(f"dim {dim} outside [0, {L})")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    z_p, _ = encode(model, x, "pitch")
    z_t, _ = encode(model, x, "timbre")
    if delta != 0:
        z_t = z_t.copy()
        z_t[:, dim] += delta
    return decode(model, z_p, z_t)


def centroids(specs: np.ndarray, stats: dsp.NormalizationStats) -> np.ndarray:
    """Spectral centroid in Hz of each spectrogram; band count taken from the data."""
    cfg = dsp.MelConfig(n_mels=specs.shape[-1])
    return np.array([dsp.spectral_centroid(s, stats, cfg) for s in specs])


def find_centroid_dimension(model: GmvaeModel, corpus: Corpus, delta: float | None = None,
                            split: str = "val") -> tuple[int, np.ndarray]:
    """Timbre dimension whose +/-delta shift moves the spectral centroid most.

    Returns the argmax dimension and the per-dimension mean absolute centroid
    difference in Hz.  ``delta`` defaults to twice the timbre prior std.
    """
    delta = 2.0 * model.timbre_prior.std if delta is None else delta
    x = corpus.spectrograms[corpus.indices(split)]
    stats = corpus.manifest.stats
    z_p, _ = encode(model, x, "pitch")
    z_t, _ = encode(model, x, "timbre")
    effects = np.zeros(model.config.latent)
    for d in range(model.config.latent):
        shifted = {}
        for sign in (-1, 1):
            codes = z_t.copy()
            codes[:, d] += sign * delta
            shifted[sign] = centroids(decode(model, z_p, codes), stats)
        effects[d] = np.mean(np.abs(shifted[1] - shifted[-1]))
    return int(np.argmax(effects)), effects


def export_latents(model: GmvaeModel, corpus: Corpus, path: str | Path) -> int:
    """Write per-example posterior means plus prior component means as CSV; return row count."""
    L = model.config.latent
    x = corpus.spectrograms
    z_t, _ = encode(model, x, "timbre")
    z_p, _ = encode(model, x, "pitch")
    header = (["kind", "id", "split", "pitch_label", "instrument_label"]
              + [f"zt_{i}" for i in range(L)] + [f"zp_{i}" for i in range(L)])
    blank = [""] * L
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for i, rec in enumerate(corpus.manifest.records):
            out.writerow(["example", rec.id, rec.split, int(corpus.pitch[i]), int(corpus.instrument[i])]
                         + [repr(float(v)) for v in z_t[i]] + [repr(float(v)) for v in z_p[i]])
            rows += 1
        for m, mu in enumerate(model.pitch_prior.means.data):
            out.writerow(["pitch_mean", m, "", m, -1] + blank + [repr(float(v)) for v in mu])
            rows += 1
        for k, mu in enumerate(model.timbre_prior.means.data):
            out.writerow(["timbre_mean", k, "", -1, k] + [repr(float(v)) for v in mu] + blank)
            rows += 1
    return rows
