"""Evaluation harness: probes, CNN baselines, and the application studies.

Every score is computed on the validation split.  Linear probes read
posterior means; CNN baselines read spectrograms.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from . import apps
from . import tensor as T
from .corpus import Corpus
from .model import ConvTrunk, GmvaeModel, ModelConfig, Module, encode
from .optim import AdamState, adam_step, xavier_init
from .tensor import Tensor

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- metrics
def macro_f1(predictions, truths, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``truths``.

    Classes absent from the truth are excluded; a present class that is
    never predicted correctly scores 0.
    """
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("need aligned, non-empty predictions and truths")
    scores = []
    for c in np.unique(true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def welch_t(a, b) -> tuple[float, float, float]:
    """Welch's t statistic, its degrees of freedom, and the two-tailed p-value.

    p uses the Student-t tail through the regularised incomplete beta:
    P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        return (0.0, float(a.size + b.size - 2), 1.0) if diff == 0 else (np.inf * np.sign(diff), np.nan, 0.0)
    t = diff / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return float(t), float(df), p


# ------------------------------------------------------------- classifiers
class LinearProbe(Module):
    def __init__(self, n_in: int, n_classes: int, rng: np.random.Generator):
        self.w = Tensor(xavier_init((n_classes, n_in), rng), requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)

    def __call__(self, x: Tensor, mode: str = "infer") -> Tensor:
        return T.dense(x, self.w, self.b)


class CnnClassifier(Module):
    """Encoder-shaped trunk followed by a softmax layer."""

    def __init__(self, cfg: ModelConfig, n_classes: int, rng: np.random.Generator):
        self.trunk = ConvTrunk(cfg, rng)
        self.out_w = Tensor(xavier_init((n_classes, cfg.hidden), rng), requires_grad=True)
        self.out_b = Tensor(np.zeros(n_classes), requires_grad=True)

    def __call__(self, x: Tensor, mode: str = "infer") -> Tensor:
        return T.dense(self.trunk(x, mode), self.out_w, self.out_b)


@dataclass
class ClassifierParams:
    kind: str
    n_classes: int
    net: Module

    def predict_proba(self, features: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        for start in range(0, len(features), batch):
            logits = self.net(Tensor(features[start : start + batch]), "infer")
            out.append(T.softmax(logits, axis=1).data)
        return np.concatenate(out).astype(np.float64)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.predict_proba(features).argmax(axis=1)


def train_classifier(kind: str, features: np.ndarray, labels: np.ndarray, seed: int = 0,
                     n_classes: int | None = None, epochs: int | None = None, lr: float | None = None,
                     batch_size: int = 128, model_config: ModelConfig | None = None) -> ClassifierParams:
    """Cross-entropy training with Adam.

    kind="linear": one dense layer on (N, L) features, lr 1e-3, 100 epochs.
    kind="cnn": encoder-shaped network on (N, T, F) spectrograms, lr 1e-4, 50 epochs.
    """
    labels = np.asarray(labels)
    if len(features) != len(labels):
        raise ValueError("features and labels are not aligned")
    if np.unique(labels).size < 2:
        raise ValueError("need at least two classes to train a classifier")
    n_classes = int(n_classes or labels.max() + 1)
    rng = np.random.default_rng(seed)
    if kind == "linear":
        net: Module = LinearProbe(features.shape[1], n_classes, rng)
        epochs, lr = epochs or 100, lr or 1e-3
    elif kind == "cnn":
        cfg = model_config or ModelConfig(n_frames=features.shape[1], n_freq=features.shape[2])
        net = CnnClassifier(cfg, n_classes, rng)
        epochs, lr = epochs or 50, lr or 1e-4
    else:
        raise ValueError(f"unknown classifier kind {kind!r}")
    params = net.parameters()
    opt = AdamState(lr=lr)
    features = np.asarray(features, dtype=np.float32)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2 and kind == "cnn":
                continue
            logp = T.log_softmax(net(Tensor(features[idx]), "train"), axis=1)
            onehot = np.zeros(logp.shape, dtype=np.float32)
            onehot[np.arange(len(idx)), labels[idx]] = 1.0
            loss = (logp * onehot).sum() * (-1.0 / len(idx))
            grads = T.backward(loss, params)
            adam_step(params, [grads[p] for p in params], opt)
    return ClassifierParams(kind, n_classes, net)


# ------------------------------------------------------------------ probes
FEATURES = ("z_t", "z_p")
TASKS = ("instrument", "pitch")


def _labels(corpus: Corpus, task: str) -> np.ndarray:
    """Full label set; evaluation never sees the semi-supervision mask."""
    return corpus.pitch if task == "pitch" else corpus.instrument


def _n_classes(corpus: Corpus, task: str) -> int:
    return corpus.manifest.n_pitches if task == "pitch" else corpus.manifest.n_instruments


def probe_scores(model: GmvaeModel, corpus: Corpus, seed: int = 0, **train_kw) -> dict[str, dict[str, float]]:
    """Linear-probe macro F1 on the val split for every (feature, task) cell."""
    tr, va = corpus.indices("train"), corpus.indices("val")
    codes = {"z_t": encode(model, corpus.spectrograms, "timbre")[0],
             "z_p": encode(model, corpus.spectrograms, "pitch")[0]}
    out: dict[str, dict[str, float]] = {}
    for feat in FEATURES:
        out[feat] = {}
        for task in TASKS:
            y = _labels(corpus, task)
            clf = train_classifier("linear", codes[feat][tr], y[tr], seed=seed,
                                   n_classes=_n_classes(corpus, task), **train_kw)
            out[feat][task] = macro_f1(clf.predict(codes[feat][va]), y[va])
    return out


def train_cnn_baselines(corpus: Corpus, model_config: ModelConfig, seed: int = 0,
                        epochs: int | None = None) -> dict[str, ClassifierParams]:
    """Reference CNNs on raw spectrograms, one per task."""
    tr = corpus.indices("train")
    x = corpus.spectrograms[tr]
    return {task: train_classifier("cnn", x, _labels(corpus, task)[tr], seed=seed,
                                   n_classes=_n_classes(corpus, task), epochs=epochs,
                                   model_config=model_config)
            for task in TASKS}


def cnn_scores(cnns: dict[str, ClassifierParams], corpus: Corpus) -> dict[str, float]:
    va = corpus.indices("val")
    x = corpus.spectrograms[va]
    return {task: macro_f1(cnns[task].predict(x), _labels(corpus, task)[va]) for task in TASKS}


def disentanglement_table(models: dict, corpus: Corpus, seed: int = 0,
                          cnns: dict[str, ClassifierParams] | None = None) -> dict:
    """{feature: {task: {N: F1}}} for a grid of models keyed by label percentage.

    The CNN baseline does not depend on N, so its row repeats one score.
    """
    if not models:
        raise ValueError("no models to evaluate")
    table: dict = {feat: {task: {} for task in TASKS} for feat in FEATURES + ("raw",)}
    raw = cnn_scores(cnns, corpus) if cnns else None
    for n, model in sorted(models.items()):
        scores = probe_scores(model, corpus, seed)
        for feat in FEATURES:
            for task in TASKS:
                table[feat][task][n] = scores[feat][task]
        for task in TASKS:
            table["raw"][task][n] = None if raw is None else raw[task]
    return table


# -------------------------------------------------------- controllability
def controllability_eval(model: GmvaeModel, cnn_instr: ClassifierParams, cnn_pitch: ClassifierParams,
                         w_grid: Sequence[float], corpus: Corpus, repetitions: int = 30,
                         seed: int = 0) -> dict[float, dict[str, float]]:
    """Macro F1 of the reference CNNs on samples synthesised for every val target."""
    if cnn_instr is None or cnn_pitch is None:
        raise ValueError("controllability needs both reference classifiers")
    va = corpus.indices("val")
    targets = list(zip(corpus.instrument[va].tolist(), corpus.pitch[va].tolist()))
    out: dict[float, dict[str, float]] = {}
    for w in w_grid:
        reps = 1 if w == 0 else repetitions
        specs, truth_k, truth_m = [], [], []
        for i, (k, m) in enumerate(targets):
            req = apps.SynthesisRequest(m, k, w, reps, seed=seed + i)
            specs.append(apps.synthesize(model, req))
            truth_k += [k] * reps
            truth_m += [m] * reps
        x = np.concatenate(specs)
        out[float(w)] = {"instrument": macro_f1(cnn_instr.predict(x), np.array(truth_k)),
                         "pitch": macro_f1(cnn_pitch.predict(x), np.array(truth_m))}
    return out


# --------------------------------------------------------- posterior shift
def representative_pairs(corpus: Corpus, n: int = 4) -> list[tuple[int, int]]:
    """Cyclic pairs over the ``n`` instruments with the most examples."""
    counts = np.bincount(corpus.instrument[corpus.instrument >= 0], minlength=corpus.manifest.n_instruments)
    top = sorted(np.argsort(-counts, kind="stable")[:n].tolist())
    return [(top[i], top[(i + 1) % len(top)]) for i in range(len(top))]


def range_compatible(corpus: Corpus, source: int, target: int) -> bool:
    ranges = corpus.pitch_ranges()
    return ranges[target][0] <= ranges[source][0] and ranges[source][1] <= ranges[target][1]


def posterior_shift_eval(model: GmvaeModel, cnn_instr: ClassifierParams, cnn_pitch: ClassifierParams,
                         pairs: Sequence[tuple[int, int]], alphas: Sequence[float],
                         corpus: Corpus) -> dict[str, dict]:
    """Mean instrument posterior and pitch-preservation F1 per pair and alpha."""
    va = corpus.indices("val")
    K = corpus.manifest.n_instruments
    out: dict[str, dict] = {}
    for src, tgt in pairs:
        if not (0 <= src < K and 0 <= tgt < K) or src == tgt:
            raise ValueError(f"invalid transfer pair {src}->{tgt}")
        idx = va[corpus.instrument[va] == src]
        if idx.size == 0:
            raise ValueError(f"no validation examples of instrument {src}")
        specs = apps.transfer_timbre(model, apps.TransferRequest(corpus.spectrograms[idx], src, tgt,
                                                                 tuple(alphas)))
        rows = {}
        for a in alphas:
            post = cnn_instr.predict_proba(specs[float(a)]).mean(axis=0)
            rows[float(a)] = {"posterior": post.tolist(),
                              "pitch_f1": macro_f1(cnn_pitch.predict(specs[float(a)]), corpus.pitch[idx])}
        target_mass = np.array([rows[float(a)]["posterior"][tgt] for a in alphas])
        steps = np.diff(target_mass)
        biggest = int(np.argmax(steps)) if steps.size else 0
        out[f"{src}->{tgt}"] = {
            "source": int(src), "target": int(tgt), "n_sources": int(idx.size),
            "range_compatible": range_compatible(corpus, src, tgt),
            "alphas": rows,
            "largest_step": [float(alphas[biggest]), float(alphas[biggest + 1])] if steps.size else None,
        }
    return out


def step_straddles_half(step) -> bool:
    return step is not None and step[0] <= 0.5 <= step[1]


# ----------------------------------------------------------- centroid test
def centroid_ttest(model: GmvaeModel, corpus: Corpus, dim: int, delta: float | None = None) -> dict[str, dict]:
    """Welch test between centroid populations at -delta and +delta, per instrument."""
    delta = 2.0 * model.timbre_prior.std if delta is None else delta
    va = corpus.indices("val")
    stats = corpus.manifest.stats
    out: dict[str, dict] = {}
    for k, name in enumerate(corpus.manifest.instrument_names):
        idx = va[corpus.instrument[va] == k]
        if idx.size < 2:
            log.warning("skipping %s: fewer than two validation examples", name)
            continue
        x = corpus.spectrograms[idx]
        lo = apps.centroids(apps.traverse_dimension(model, x, dim, -delta), stats)
        hi = apps.centroids(apps.traverse_dimension(model, x, dim, delta), stats)
        t, df, p = welch_t(hi, lo)
        out[name] = {"n": int(idx.size), "minus_mean": float(lo.mean()), "minus_std": float(lo.std(ddof=1)),
                     "plus_mean": float(hi.mean()), "plus_std": float(hi.std(ddof=1)),
                     "t": t, "df": df, "p": p, "direction": int(np.sign(hi.mean() - lo.mean()))}
    return out


# ------------------------------------------------------------------ report
@dataclass
class EvalReport:
    f_scores: dict = field(default_factory=dict)
    controllability: dict = field(default_factory=dict)
    posterior_shift: dict = field(default_factory=dict)
    centroid_stats: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        def f1s():
            for feat in self.f_scores.values():
                for task in feat.values():
                    yield from (v for v in task.values() if v is not None)
            for by_w in self.controllability.values():
                for by_task in by_w.values():
                    yield from by_task.values()
        for v in f1s():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"F1 {v} outside [0, 1]")
        for pair in self.posterior_shift.values():
            for row in pair["alphas"].values():
                if abs(sum(row["posterior"]) - 1.0) > 1e-6:
                    raise ValueError("posterior row does not sum to 1")

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True)

    def save(self, out_dir: str | Path) -> list[Path]:
        """Write report.json plus one flat CSV per fragment; return the paths written."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = [out_dir / "report.json"]
        written[0].write_text(self.to_json())
        tables = {
            "f_scores.csv": (["feature", "task", "n_labels_percent", "f1"],
                             [[f, t, n, v] for f, ts in self.f_scores.items()
                              for t, ns in ts.items() for n, v in ns.items()]),
            "controllability.csv": (["n_labels_percent", "w", "task", "f1"],
                                    [[n, w, t, v] for n, ws in self.controllability.items()
                                     for w, ts in ws.items() for t, v in ts.items()]),
            "posterior_shift.csv": (["pair", "alpha", "target_mass", "pitch_f1"],
                                    [[p, a, r["posterior"][d["target"]], r["pitch_f1"]]
                                     for p, d in self.posterior_shift.items() for a, r in d["alphas"].items()]),
            "centroid_stats.csv": (["instrument", "minus_mean", "minus_std", "plus_mean", "plus_std", "p",
                                    "direction"],
                                   [[k, s["minus_mean"], s["minus_std"], s["plus_mean"], s["plus_std"], s["p"],
                                     s["direction"]] for k, s in self.centroid_stats.items()]),
        }
        for name, (header, rows) in tables.items():
            path = out_dir / name
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                w.writerows(rows)
            written.append(path)
        return written


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj
