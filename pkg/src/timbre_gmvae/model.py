"""Gaussian-mixture VAE with separate pitch and timbre encoders.

Both encoders map a (T, F) log-mel spectrogram, viewed as F channels of
length T, to a diagonal Gaussian over an L-dimensional code.  The decoder
consumes the concatenated ``[z_t, z_p]``.  The pitch code has an M-component
mixture prior with observed component (the pitch label); the timbre code has
a K-component mixture prior whose component is inferred, optionally guided
by instrument labels.  ``mode="vae"`` is the baseline whose timbre prior is a
standard normal and which trains an auxiliary instrument classifier on z_t.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import Corpus, batches
from .optim import AdamState, adam_step, xavier_init
from .tensor import BatchNormState, Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GMVAE1\0"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class ModeMismatchError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when a loss term becomes non-finite during fit."""

    def __init__(self, term: str, epoch: int, step: int):
        super().__init__(f"non-finite {term} at epoch {epoch}, step {step}")
        self.term, self.epoch, self.step = term, epoch, step


@dataclass(frozen=True)
class ModelConfig:
    n_freq: int = 256
    n_frames: int = 43
    channels: int = 512
    hidden: int = 512
    latent: int = 16
    kernel: int = 3
    n_pitches: int = 82
    n_instruments: int = 12
    pitch_std: float = math.exp(-2.0)
    timbre_std: float = 1.0
    gamma: float = 10.0
    logvar_limit: float = 10.0
    aux_hidden: int = 128
    mode: str = "gmvae"
    pitch_init_scale: float = 1.0  # multiplies the Xavier draw for the pitch prior means
    timbre_init_scale: float = 1.0
    prior_lr_scale: float = 1.0  # Adam step multiplier for the mixture means

    def __post_init__(self):
        if self.mode not in ("gmvae", "vae"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.pitch_std <= 0 or self.timbre_std <= 0:
            raise ValueError("prior std must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ networks
class Module:
    """Named parameters and batch-norm states, in a fixed order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, BatchNormState):
                out.append((f"{prefix}{name}.scale", value.scale))
                out.append((f"{prefix}{name}.shift", value.shift))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{prefix}{name}."))
        return out

    def named_batchnorms(self, prefix: str = "") -> list[tuple[str, BatchNormState]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_batchnorms(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


def _weight(shape, rng):
    return Tensor(xavier_init(shape, rng), requires_grad=True)


def _bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


class ConvTrunk(Module):
    """conv -> BN -> relu, twice, then dense -> BN -> relu."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, k = cfg.channels, cfg.kernel
        self.conv1_w, self.conv1_b = _weight((c, cfg.n_freq, k), rng), _bias(c)
        self.bn1 = BatchNormState.create(c)
        self.conv2_w, self.conv2_b = _weight((c, c, k), rng), _bias(c)
        self.bn2 = BatchNormState.create(c)
        self.fc_w, self.fc_b = _weight((cfg.hidden, c * cfg.n_frames), rng), _bias(cfg.hidden)
        self.bn3 = BatchNormState.create(cfg.hidden)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        h = x.transpose(0, 2, 1)  # (B, T, F) -> (B, F, T): frequency bins are channels
        h = T.relu(T.batchnorm(T.conv1d(h, self.conv1_w, self.conv1_b), self.bn1, mode))
        h = T.relu(T.batchnorm(T.conv1d(h, self.conv2_w, self.conv2_b), self.bn2, mode))
        h = h.reshape(h.shape[0], -1)
        return T.relu(T.batchnorm(T.dense(h, self.fc_w, self.fc_b), self.bn3, mode))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.limit = cfg.logvar_limit
        self.trunk = ConvTrunk(cfg, rng)
        self.mean_w, self.mean_b = _weight((cfg.latent, cfg.hidden), rng), _bias(cfg.latent)
        self.logvar_w, self.logvar_b = _weight((cfg.latent, cfg.hidden), rng), _bias(cfg.latent)

    def __call__(self, x: Tensor, mode: str) -> tuple[Tensor, Tensor]:
        h = self.trunk(x, mode)
        mean = T.dense(h, self.mean_w, self.mean_b)
        log_var = T.clamp(T.dense(h, self.logvar_w, self.logvar_b), -self.limit, self.limit)
        return mean, log_var


class Decoder(Module):
    """Mirror of the encoder: dense, dense to C*T, then two same-padded convs."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c, k = cfg.channels, cfg.kernel
        self.channels, self.n_frames = c, cfg.n_frames
        self.fc1_w, self.fc1_b = _weight((cfg.hidden, 2 * cfg.latent), rng), _bias(cfg.hidden)
        self.bn1 = BatchNormState.create(cfg.hidden)
        self.fc2_w, self.fc2_b = _weight((c * cfg.n_frames, cfg.hidden), rng), _bias(c * cfg.n_frames)
        self.bn2 = BatchNormState.create(c * cfg.n_frames)
        self.conv1_w, self.conv1_b = _weight((c, c, k), rng), _bias(c)
        self.bn3 = BatchNormState.create(c)
        self.conv2_w, self.conv2_b = _weight((cfg.n_freq, c, k), rng), _bias(cfg.n_freq)

    def __call__(self, z_t: Tensor, z_p: Tensor, mode: str) -> Tensor:
        h = T.concat([z_t, z_p], axis=1)
        h = T.relu(T.batchnorm(T.dense(h, self.fc1_w, self.fc1_b), self.bn1, mode))
        h = T.relu(T.batchnorm(T.dense(h, self.fc2_w, self.fc2_b), self.bn2, mode))
        h = h.reshape(h.shape[0], self.channels, self.n_frames)
        h = T.relu(T.batchnorm(T.conv1d(h, self.conv1_w, self.conv1_b), self.bn3, mode))
        h = T.tanh(T.conv1d(h, self.conv2_w, self.conv2_b))
        return h.transpose(0, 2, 1)


class MixturePrior(Module):
    """Equal-weight Gaussian mixture with learnable means and one fixed std."""

    def __init__(self, means: np.ndarray, std: float, learnable: bool = True):
        self.means = Tensor(means, requires_grad=learnable)
        self.std = float(std)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]


class AuxClassifier(Module):
    """Two 128-unit layers on z_t, used by the VAE baseline."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h = cfg.aux_hidden
        self.fc1_w, self.fc1_b = _weight((h, cfg.latent), rng), _bias(h)
        self.fc2_w, self.fc2_b = _weight((h, h), rng), _bias(h)
        self.out_w, self.out_b = _weight((cfg.n_instruments, h), rng), _bias(cfg.n_instruments)

    def __call__(self, z: Tensor) -> Tensor:
        h = T.relu(T.dense(z, self.fc1_w, self.fc1_b))
        h = T.relu(T.dense(h, self.fc2_w, self.fc2_b))
        return T.dense(h, self.out_w, self.out_b)


class GmvaeModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.pitch_encoder = Encoder(cfg, rng)
        self.timbre_encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.pitch_prior = MixturePrior(cfg.pitch_init_scale * xavier_init((cfg.n_pitches, cfg.latent), rng),
                                        cfg.pitch_std)
        if cfg.mode == "gmvae":
            self.timbre_prior = MixturePrior(cfg.timbre_init_scale * xavier_init((cfg.n_instruments, cfg.latent), rng),
                                             cfg.timbre_std)
            self.aux_classifier = None
        else:
            self.timbre_prior = MixturePrior(np.zeros((1, cfg.latent)), 1.0, learnable=False)
            self.aux_classifier = AuxClassifier(cfg, rng)
        self.optimizer = AdamState()
        self.meta: dict = {"epoch": 0, "n_labels_percent": None, "seed": seed}

    @property
    def mode(self) -> str:
        return self.config.mode

    def astype(self, dtype) -> "GmvaeModel":
        """Cast every parameter and running statistic in place (float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        self.timbre_prior.means.data = self.timbre_prior.means.data.astype(dtype)
        for _, bn in self.named_batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self


# -------------------------------------------------------------- primitives
def reparameterize(mean, log_var, eps):
    """z = mean + exp(log_var / 2) * eps, for Tensors or arrays."""
    if isinstance(mean, Tensor):
        return mean + T.exp(log_var * 0.5) * eps
    return np.asarray(mean) + np.exp(np.asarray(log_var) / 2) * np.asarray(eps)


def kl_diag_gaussian(mean_q, log_var_q, mean_p, std_p: float) -> float:
    """KL(N(mean_q, diag exp(log_var_q)) || N(mean_p, std_p^2 I)), summed over the last axis."""
    if std_p <= 0:
        raise ValueError("std_p must be positive")
    mq, lv, mp = (np.asarray(a, dtype=np.float64) for a in (mean_q, log_var_q, mean_p))
    terms = math.log(std_p) - 0.5 * lv + (np.exp(lv) + (mq - mp) ** 2) / (2 * std_p**2) - 0.5
    return terms.sum(axis=-1)


def _kl_tensor(mean: Tensor, log_var: Tensor, prior_mean: Tensor, std: float) -> Tensor:
    """Per-row KL with the prior mean broadcast against ``mean`` (last axis summed)."""
    diff = mean - prior_mean
    inner = (T.exp(log_var) + T.square(diff)) * (1.0 / (2 * std * std)) - log_var * 0.5
    return inner.sum(axis=-1) + (math.log(std) - 0.5) * mean.shape[-1]


def _component_logits(z: Tensor, prior: MixturePrior) -> Tensor:
    """log N(z; mu_k, std^2 I) up to a constant shared by all k, shape (B, K)."""
    diff = z.reshape(z.shape[0], 1, z.shape[1]) - prior.means.reshape(1, *prior.means.shape)
    return T.square(diff).sum(axis=-1) * (-1.0 / (2 * prior.std**2))


def infer_instrument_posterior(model: GmvaeModel, z_t) -> np.ndarray:
    """p(y_t = k | z_t) under the uniform mixture prior; rows sum to one."""
    z = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    mu = model.timbre_prior.means.data.astype(np.float64)
    logits = -((z[:, None, :] - mu[None]) ** 2).sum(-1) / (2 * model.timbre_prior.std**2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if np.ndim(z_t) == 1 else p


# -------------------------------------------------------------------- loss
@dataclass
class LossBreakdown:
    reconstruction: Tensor
    kl_pitch: Tensor
    expected_kl_timbre: Tensor
    kl_categorical: Tensor
    supervised_ce: Tensor
    total: Tensor

    TERMS = ("reconstruction", "kl_pitch", "expected_kl_timbre", "kl_categorical", "supervised_ce")

    def as_floats(self) -> dict[str, float]:
        return {name: getattr(self, name).item() for name in self.TERMS + ("total",)}


@contextlib.contextmanager
def _term(name: str):
    try:
        yield
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(name) from exc


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_labels(model, pitch, n):
    pitch = np.asarray(pitch)
    if pitch.shape != (n,) or np.any(pitch < 0) or np.any(pitch >= model.config.n_pitches):
        raise T.ContractError("every example needs a pitch label in [0, M)")
    return pitch


def _forward_common(model: GmvaeModel, x: Tensor, pitch, rng, mode):
    b, latent = x.shape[0], model.config.latent
    with _term("reconstruction"):
        mp, lvp = model.pitch_encoder(x, mode)
        mt, lvt = model.timbre_encoder(x, mode)
        eps = rng.standard_normal((2, b, latent)).astype(x.dtype)
        z_p = reparameterize(mp, lvp, eps[0])
        z_t = reparameterize(mt, lvt, eps[1])
        x_hat = model.decoder(z_t, z_p, mode)
        recon = T.square(x - x_hat).sum() * (0.5 / b)
    with _term("kl_pitch"):
        mu = T.gather_rows(model.pitch_prior.means, pitch)
        kl_p = _kl_tensor(mp, lvp, mu, model.pitch_prior.std).sum() * (1.0 / b)
    return recon, kl_p, (mt, lvt, z_t)


def elbo_loss(model: GmvaeModel, x, pitch, instrument, rng: np.random.Generator,
              mode: str = "train") -> LossBreakdown:
    """Negative ELBO averaged over the batch.

    ``instrument`` holds class ids, -1 for unlabelled examples.  Labelled
    examples use their one-hot label in the timbre KL expectation and add
    gamma * cross-entropy of the inferred posterior.
    """
    if model.mode != "gmvae":
        raise ModeMismatchError("elbo_loss needs a gmvae-mode model")
    x = _as_tensor(x)
    b = x.shape[0]
    pitch = _check_labels(model, pitch, b)
    instrument = np.asarray(instrument)
    labelled = instrument >= 0
    recon, kl_p, (mt, lvt, z_t) = _forward_common(model, x, pitch, rng, mode)
    prior = model.timbre_prior
    k = prior.n_components
    with _term("expected_kl_timbre"):
        logits = _component_logits(z_t, prior)
        q = T.softmax(logits, axis=1)
        log_q = T.log_softmax(logits, axis=1)
        kl_mat = _kl_tensor(mt.reshape(b, 1, -1), lvt.reshape(b, 1, -1),
                            prior.means.reshape(1, k, -1), prior.std)
        onehot = np.zeros((b, k), dtype=x.dtype)
        onehot[np.flatnonzero(labelled), instrument[labelled]] = 1.0
        unl = (~labelled).astype(x.dtype)[:, None]
        weights = q * unl + onehot
        kl_t = (weights * kl_mat).sum() * (1.0 / b)
    with _term("kl_categorical"):
        neg_entropy = (q * log_q).sum(axis=1) + math.log(k)
        kl_cat = (neg_entropy * unl[:, 0]).sum() * (1.0 / b)
    with _term("supervised_ce"):
        ce = (log_q * onehot).sum() * (-model.config.gamma / b)
    total = recon + kl_p + kl_t + kl_cat + ce
    return LossBreakdown(recon, kl_p, kl_t, kl_cat, ce, total)


def vae_baseline_loss(model: GmvaeModel, x, pitch, instrument, rng: np.random.Generator,
                      mode: str = "train") -> LossBreakdown:
    """Baseline: standard-normal timbre KL plus auxiliary classifier CE on z_t."""
    if model.mode != "vae":
        raise ModeMismatchError("vae_baseline_loss needs a vae-mode model")
    x = _as_tensor(x)
    b = x.shape[0]
    pitch = _check_labels(model, pitch, b)
    instrument = np.asarray(instrument)
    labelled = instrument >= 0
    recon, kl_p, (mt, lvt, z_t) = _forward_common(model, x, pitch, rng, mode)
    with _term("expected_kl_timbre"):
        kl_t = ((T.exp(lvt) + T.square(mt) - lvt - 1.0).sum() * (0.5 / b))
    zero = Tensor(0.0, dtype=x.dtype)
    with _term("supervised_ce"):
        if labelled.any():
            log_p = T.log_softmax(model.aux_classifier(z_t), axis=1)
            onehot = np.zeros(log_p.shape, dtype=x.dtype)
            onehot[np.flatnonzero(labelled), instrument[labelled]] = 1.0
            ce = (log_p * onehot).sum() * (-model.config.gamma / b)
        else:
            ce = zero
    total = recon + kl_p + kl_t + ce
    return LossBreakdown(recon, kl_p, kl_t, zero, ce, total)


def model_loss(model: GmvaeModel, *args, **kwargs) -> LossBreakdown:
    fn = elbo_loss if model.mode == "gmvae" else vae_baseline_loss
    return fn(model, *args, **kwargs)


# --------------------------------------------------------------- inference
def _infer_batches(n: int, size: int = 256):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def encode(model: GmvaeModel, x: np.ndarray, which: str) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mean, log_var), each (B, L), with batch norm in infer mode."""
    enc = {"pitch": model.pitch_encoder, "timbre": model.timbre_encoder}.get(which)
    if enc is None:
        raise ValueError(f"which must be 'pitch' or 'timbre', not {which!r}")
    x = np.asarray(x)
    cfg = model.config
    if x.ndim != 3 or x.shape[1:] != (cfg.n_frames, cfg.n_freq):
        raise T.ContractError(f"expected (B, {cfg.n_frames}, {cfg.n_freq}) input, got {x.shape}")
    means, lvs = [], []
    for sl in _infer_batches(len(x)):
        m, lv = enc(Tensor(x[sl], dtype=model.pitch_prior.means.dtype), "infer")
        means.append(m.data)
        lvs.append(lv.data)
    return np.concatenate(means), np.concatenate(lvs)


def decode(model: GmvaeModel, z_p: np.ndarray, z_t: np.ndarray) -> np.ndarray:
    """Decode (B, L) pitch and timbre codes to (B, T, F) spectrograms."""
    z_p, z_t = np.atleast_2d(z_p), np.atleast_2d(z_t)
    L = model.config.latent
    if z_p.shape != z_t.shape or z_p.shape[1] != L:
        raise T.ContractError(f"codes must both be (B, {L}); got {z_p.shape} and {z_t.shape}")
    dt = model.pitch_prior.means.dtype
    out = [model.decoder(Tensor(z_t[sl], dtype=dt), Tensor(z_p[sl], dtype=dt), "infer").data
           for sl in _infer_batches(len(z_p))]
    return np.concatenate(out)


def reconstruct(model: GmvaeModel, x: np.ndarray) -> np.ndarray:
    mp, _ = encode(model, x, "pitch")
    mt, _ = encode(model, x, "timbre")
    return decode(model, mp, mt)


# -------------------------------------------------------------------- fit
def _epoch_batches(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    out = list(batches(corpus, "train", batch_size, rng))
    if len(out) > 1 and len(out[-1]) == 1:
        # batch norm cannot train on a single example
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def fit(model: GmvaeModel, corpus: Corpus, epochs: int, seed: int = 0, lr: float = 1e-4,
        batch_size: int = 128, checkpoint_dir: str | Path | None = None,
        on_epoch: Callable[[int, dict], None] | None = None) -> list[dict]:
    """Train with Adam on all learnable parameters, prior means included.

    Returns one dict per epoch with the mean of every loss term.
    """
    if corpus.n_pitches != model.config.n_pitches or corpus.n_instruments != model.config.n_instruments:
        raise T.ContractError("corpus class counts do not match the model")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    means = {id(model.pitch_prior.means), id(model.timbre_prior.means)}
    lr_scale = [model.config.prior_lr_scale if id(p) in means else 1.0 for p in params]
    model.optimizer.lr = lr
    model.meta["n_labels_percent"] = corpus.manifest.n_labels_percent
    history = []
    x_all, pitch_all, inst_all = corpus.spectrograms, corpus.pitch, corpus.instrument
    for _ in range(epochs):
        epoch = model.meta["epoch"] + 1
        sums = dict.fromkeys(LossBreakdown.TERMS + ("total",), 0.0)
        n_seen = 0
        for step, idx in enumerate(_epoch_batches(corpus, batch_size, rng)):
            try:
                parts = model_loss(model, x_all[idx], pitch_all[idx], inst_all[idx], rng)
            except T.NonFiniteError as exc:
                raise TrainingAborted(str(exc), epoch, step) from exc
            grads = T.backward(parts.total, params)
            bad = [n for n, p in model.named_parameters() if not np.all(np.isfinite(grads[p]))]
            if bad:
                raise TrainingAborted(f"gradient of {bad[0]}", epoch, step)
            adam_step(params, [grads[p] for p in params], model.optimizer, lr_scale)
            for name, v in parts.as_floats().items():
                sums[name] += v * len(idx)
            n_seen += len(idx)
        model.meta["epoch"] = epoch
        record = {"epoch": epoch, **{k: v / n_seen for k, v in sums.items()}}
        history.append(record)
        log.info("epoch %d total %.3f", epoch, record["total"])
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt")
        if on_epoch is not None:
            on_epoch(epoch, record)
    return history


# ------------------------------------------------------------- checkpoints
def _blocks(model: GmvaeModel) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.data) for name, p in model.named_parameters()]
    if model.mode == "vae":
        out.append(("timbre_prior.means", model.timbre_prior.means.data))
    for name, bn in model.named_batchnorms():
        out.append((f"{name}.running_mean", bn.running_mean))
        out.append((f"{name}.running_var", bn.running_var))
    opt = model.optimizer
    if opt.m:
        names = [n for n, _ in model.named_parameters()]
        out += [(f"adam.m.{n}", m) for n, m in zip(names, opt.m)]
        out += [(f"adam.v.{n}", v) for n, v in zip(names, opt.v)]
    return out


def save_checkpoint(model: GmvaeModel, path: str | Path) -> None:
    blocks = _blocks(model)
    opt = model.optimizer
    header = {
        "config": asdict(model.config),
        "mode": model.mode,
        "meta": model.meta,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step},
        "bn_updates": {n: bn.n_updates for n, bn in model.named_batchnorms()},
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack("<I", len(head)) + head)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, expected_mode: str | None = None) -> GmvaeModel:
    raw = Path(path).read_bytes()
    n_magic = len(CHECKPOINT_MAGIC)
    if raw[:n_magic] != CHECKPOINT_MAGIC or len(raw) < n_magic + 5:
        raise CheckpointFormatError(f"{path}: bad magic")
    if raw[n_magic] != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {raw[n_magic]}")
    (head_len,) = struct.unpack("<I", raw[n_magic + 1 : n_magic + 5])
    start = n_magic + 5
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    payload = raw[start + head_len :]
    expected = sum(4 * int(np.prod(b["shape"])) for b in header["blocks"])
    if len(payload) != expected:
        raise CheckpointFormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    if expected_mode is not None and header["mode"] != expected_mode:
        raise ModeMismatchError(f"checkpoint mode {header['mode']!r}, expected {expected_mode!r}")

    model = GmvaeModel(ModelConfig.from_dict(header["config"]))
    model.meta = header["meta"]
    arrays, offset = {}, 0
    for b in header["blocks"]:
        n = int(np.prod(b["shape"]))
        arrays[b["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(b["shape"]).copy()
        offset += 4 * n
    for name, p in model.named_parameters():
        p.data = arrays[name].astype(np.float32)
    if model.mode == "vae":
        model.timbre_prior.means.data = arrays["timbre_prior.means"]
    for name, bn in model.named_batchnorms():
        bn.running_mean = arrays[f"{name}.running_mean"]
        bn.running_var = arrays[f"{name}.running_var"]
        bn.n_updates = header["bn_updates"][name]
    a = header["adam"]
    model.optimizer = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
    names = [n for n, _ in model.named_parameters()]
    if f"adam.m.{names[0]}" in arrays:
        model.optimizer.m = [arrays[f"adam.m.{n}"] for n in names]
        model.optimizer.v = [arrays[f"adam.v.{n}"] for n in names]
    return model


def state_bytes(model: GmvaeModel) -> bytes:
    """Concatenated float32 bytes of everything a checkpoint stores."""
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in _blocks(model))
