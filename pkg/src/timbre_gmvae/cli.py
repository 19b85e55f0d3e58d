"""Command-line entry point: ``timbre-gmvae <verb> [options]``.

Every verb reads an optional JSON run config, applies flag overrides, prints
the resolved config with its hash, then runs.  Exit codes: 0 success,
2 config error, 3 training abort, 4 bad request, 5 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import apps, dsp
from . import corpus as C
from . import evaluate as E
from . import model as M

log = logging.getLogger("timbre_gmvae")

EXIT_CONFIG, EXIT_TRAIN, EXIT_REQUEST, EXIT_MISSING = 2, 3, 4, 5
FRAGMENTS = ("disentanglement", "controllability", "transfer", "centroid")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ config
@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ExperimentConfig:
    n_grid: list = field(default_factory=lambda: [25, 50, 100])
    w_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    alphas: list = field(default_factory=lambda: list(apps.DEFAULT_ALPHAS))
    pairs: list | None = None  # None picks cyclic pairs over the most frequent instruments
    repetitions: int = 30
    cnn_epochs: int = 50
    seed: int = 0


@dataclass
class PathsConfig:
    corpus_dir: str = "runs/desk/corpus"
    run_dir: str = "runs/desk"


def _desk_model() -> dict:
    return {"channels": 64, "hidden": 128, "pitch_init_scale": 10.0, "timbre_init_scale": 5.0,
            "prior_lr_scale": 10.0}


@dataclass
class RunConfig:
    corpus: C.CorpusConfig = field(default_factory=C.CorpusConfig)
    model: dict = field(default_factory=_desk_model)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def model_config(self, mode: str = "gmvae") -> M.ModelConfig:
        known = {f.name for f in fields(M.ModelConfig)}
        unknown = set(self.model) - known
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        d = {**self.model, "mode": mode, "n_pitches": self.corpus.n_pitches,
             "n_instruments": self.corpus.n_instruments}
        return M.ModelConfig(**d)

    def to_dict(self) -> dict:
        return {"corpus": asdict(self.corpus), "model": dict(self.model), "training": asdict(self.training),
                "experiment": asdict(self.experiment), "paths": asdict(self.paths)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        extra = set(d) - {"corpus", "model", "training", "experiment", "paths"}
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        cfg = cls(corpus=C.CorpusConfig(**d.get("corpus", {})),
                  model={**_desk_model(), **d.get("model", {})},
                  training=TrainingConfig(**d.get("training", {})),
                  experiment=ExperimentConfig(**d.get("experiment", {})),
                  paths=PathsConfig(**d.get("paths", {})))
        cfg.corpus.validate()
        cfg.model_config()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


PRESETS = {
    "desk": {},
    "paper": {"corpus": asdict(C.FULL_CONFIG),
              "model": {"channels": 512, "hidden": 512, "pitch_init_scale": 1.0,
                        "timbre_init_scale": 1.0, "prior_lr_scale": 1.0},
              "training": {"lr": 1e-4, "epochs": 100},
              "experiment": {"n_grid": [0, 25, 50, 75, 100]},
              "paths": {"corpus_dir": "runs/paper/corpus", "run_dir": "runs/paper"}},
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    try:
        base = json.loads(Path(args.config).read_text()) if args.config else dict(PRESETS[args.preset])
        cfg = RunConfig.from_dict(base)
        if getattr(args, "epochs", None) is not None:
            cfg.training.epochs = args.epochs
        if getattr(args, "lr", None) is not None:
            cfg.training.lr = args.lr
        if args.corpus_dir:
            cfg.paths.corpus_dir = args.corpus_dir
        if args.run_dir:
            cfg.paths.run_dir = args.run_dir
        env_seed = os.environ.get("GMVAE_SEED")
        if env_seed is not None:
            seed = int(env_seed)
            cfg.training.seed = seed
            cfg.experiment.seed = seed
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, f"config file not found: {exc.filename}") from exc
    except (ValueError, TypeError, C.CorpusConfigError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from exc
    print(cfg.to_json())
    log.info("config hash %s, training seed %d", cfg.hash(), cfg.training.seed)
    return cfg


# ----------------------------------------------------------------- helpers
def _load_corpus(cfg: RunConfig) -> C.Corpus:
    root = Path(cfg.paths.corpus_dir)
    if not (root / "manifest.json").exists():
        raise CliError(EXIT_MISSING, f"no corpus at {root}; run gen-corpus first")
    return C.Corpus.load(root)


def _load_model(path: str | Path, mode: str | None = None) -> M.GmvaeModel:
    path = Path(path)
    if not path.exists():
        raise CliError(EXIT_MISSING, f"checkpoint not found: {path}")
    try:
        return M.load_checkpoint(path, expected_mode=mode)
    except (M.CheckpointFormatError, M.ModeMismatchError) as exc:
        raise CliError(EXIT_MISSING, str(exc)) from exc


def run_name(mode: str, n_labels: float) -> str:
    return f"{mode}_n{int(n_labels)}"


def checkpoint_path(cfg: RunConfig, mode: str, n_labels: float) -> Path:
    return Path(cfg.paths.run_dir) / run_name(mode, n_labels) / "final.ckpt"


def _write_specs(out_dir: Path, specs: np.ndarray, rows: list[dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec, row in zip(specs, rows):
        C.write_spec(out_dir / row["file"], spec)
    with open(out_dir / "index.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} spectrograms to {out_dir}")


# ------------------------------------------------------------------- verbs
def cmd_gen_corpus(cfg: RunConfig, args) -> int:
    corpus = C.build_corpus(cfg.corpus, out_dir=cfg.paths.corpus_dir)
    counts = np.bincount(corpus.instrument, minlength=cfg.corpus.n_instruments)
    print(f"corpus: {len(corpus)} examples, K={corpus.n_instruments}, M={corpus.n_pitches}, "
          f"train={corpus.indices('train').size}, val={corpus.indices('val').size}")
    for name, n in zip(corpus.manifest.instrument_names, counts):
        print(f"  {name}: {n}")
    print(f"manifest hash {hashlib.sha256((Path(cfg.paths.corpus_dir) / 'manifest.json').read_bytes()).hexdigest()[:16]}")
    return 0


def train_one(cfg: RunConfig, corpus: C.Corpus, n_labels: float, mode: str) -> Path:
    seed = cfg.training.seed
    masked = C.mask_labels(corpus, n_labels, np.random.default_rng(seed))
    model = M.GmvaeModel(cfg.model_config(mode), seed=seed)
    model.meta["n_labels_percent"] = n_labels
    out = Path(cfg.paths.run_dir) / run_name(mode, n_labels)
    out.mkdir(parents=True, exist_ok=True)
    loss_path = out / "losses.csv"
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *M.LossBreakdown.TERMS, "total"])

        def on_epoch(epoch, rec):
            w.writerow([epoch, *(rec[k] for k in M.LossBreakdown.TERMS), rec["total"]])
            fh.flush()
            print(f"[{run_name(mode, n_labels)}] epoch {epoch} total {rec['total']:.3f}", flush=True)

        try:
            M.fit(model, masked, cfg.training.epochs, seed=seed, lr=cfg.training.lr,
                  batch_size=cfg.training.batch_size, checkpoint_dir=out, on_epoch=on_epoch)
        except M.TrainingAborted as exc:
            raise CliError(EXIT_TRAIN, f"training aborted: {exc}") from exc
    M.save_checkpoint(model, out / "final.ckpt")
    return out / "final.ckpt"


def cmd_train(cfg: RunConfig, args) -> int:
    corpus = _load_corpus(cfg)
    path = train_one(cfg, corpus, args.n_labels, args.mode)
    print(f"checkpoint {path}")
    return 0


def _check_class(value: int, n: int, what: str) -> None:
    if not 0 <= value < n:
        raise CliError(EXIT_REQUEST, f"{what} {value} outside [0, {n})")


def cmd_synth(cfg: RunConfig, args) -> int:
    model = _load_model(args.checkpoint, "gmvae")
    _check_class(args.pitch, model.config.n_pitches, "pitch class")
    _check_class(args.instrument, model.config.n_instruments, "instrument class")
    if args.w < 0:
        raise CliError(EXIT_REQUEST, "w must be non-negative")
    req = apps.SynthesisRequest(args.pitch, args.instrument, args.w, args.repetitions, args.seed)
    specs = apps.synthesize(model, req)
    rows = [{"file": f"synth_{i:03d}.spec", "pitch": args.pitch, "instrument": args.instrument, "w": args.w}
            for i in range(len(specs))]
    _write_specs(Path(args.out), specs, rows)
    return 0


def cmd_transfer(cfg: RunConfig, args) -> int:
    model = _load_model(args.checkpoint, "gmvae")
    corpus = _load_corpus(cfg)
    K = model.config.n_instruments
    _check_class(args.source_class, K, "source class")
    _check_class(args.target_class, K, "target class")
    va = corpus.indices("val")
    idx = va[corpus.instrument[va] == args.source_class]
    if idx.size == 0:
        raise CliError(EXIT_REQUEST, f"no validation examples of instrument {args.source_class}")
    alphas = tuple(args.alpha or apps.DEFAULT_ALPHAS)
    try:
        req = apps.TransferRequest(corpus.spectrograms[idx], args.source_class, args.target_class, alphas)
    except ValueError as exc:
        raise CliError(EXIT_REQUEST, str(exc)) from exc
    out = apps.transfer_timbre(model, req)
    specs, rows = [], []
    for a, batch in out.items():
        for rid, spec in zip(idx, batch):
            specs.append(spec)
            rows.append({"file": f"transfer_{int(rid):05d}_a{a:.2f}.spec", "source_id": int(rid),
                         "source_class": args.source_class, "target_class": args.target_class, "alpha": a})
    _write_specs(Path(args.out), np.stack(specs), rows)
    return 0


def cmd_traverse(cfg: RunConfig, args) -> int:
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(cfg)
    if args.dim == "auto":
        dim, effects = apps.find_centroid_dimension(model, corpus)
        print(f"centroid dimension {dim} (effects in Hz: {np.round(effects, 1).tolist()})")
    else:
        dim = int(args.dim)
        _check_class(dim, model.config.latent, "dimension")
    delta = args.delta if args.delta is not None else 2.0 * model.timbre_prior.std
    va = corpus.indices("val")
    specs, rows = [], []
    for sign in (-1, 1):
        out = apps.traverse_dimension(model, corpus.spectrograms[va], dim, sign * delta)
        for rid, spec in zip(va, out):
            specs.append(spec)
            rows.append({"file": f"traverse_{int(rid):05d}_{'minus' if sign < 0 else 'plus'}.spec",
                         "source_id": int(rid), "dim": dim, "delta": sign * delta,
                         "centroid_hz": dsp.spectral_centroid(spec, corpus.manifest.stats)})
    _write_specs(Path(args.out), np.stack(specs), rows)
    return 0


def cmd_export_latents(cfg: RunConfig, args) -> int:
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(cfg)
    n = apps.export_latents(model, corpus, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def run_eval(cfg: RunConfig, corpus: C.Corpus, only: list[str] | None = None) -> E.EvalReport:
    """Evaluate the N-grid checkpoints under ``run_dir`` and return the report."""
    only = only or list(FRAGMENTS)
    exp = cfg.experiment
    models = {n: _load_model(checkpoint_path(cfg, "gmvae", n), "gmvae") for n in exp.n_grid}
    top = max(exp.n_grid)
    report = E.EvalReport(meta={"config_hash": cfg.hash(), "seed": exp.seed, "n_grid": list(exp.n_grid)})
    need_cnn = any(f in only for f in ("disentanglement", "controllability", "transfer"))
    cnns = E.train_cnn_baselines(corpus, cfg.model_config(), exp.seed, exp.cnn_epochs) if need_cnn else None
    if "disentanglement" in only:
        report.f_scores = E.disentanglement_table(models, corpus, exp.seed, cnns)
        vae_path = checkpoint_path(cfg, "vae", top)
        if vae_path.exists():
            report.meta["vae_f_scores"] = E.probe_scores(_load_model(vae_path, "vae"), corpus, exp.seed)
    if "controllability" in only:
        report.controllability = {n: E.controllability_eval(m, cnns["instrument"], cnns["pitch"], exp.w_grid,
                                                            corpus, exp.repetitions, exp.seed)
                                  for n, m in models.items()}
    if "transfer" in only:
        pairs = [tuple(p) for p in exp.pairs] if exp.pairs else E.representative_pairs(corpus)
        report.posterior_shift = E.posterior_shift_eval(models[top], cnns["instrument"], cnns["pitch"],
                                                        pairs, exp.alphas, corpus)
    if "centroid" in only:
        dim, effects = apps.find_centroid_dimension(models[top], corpus)
        report.meta["centroid_dim"] = dim
        report.meta["centroid_effects"] = effects.tolist()
        report.centroid_stats = E.centroid_ttest(models[top], corpus, dim)
    report.validate()
    return report


def cmd_eval(cfg: RunConfig, args) -> int:
    corpus = _load_corpus(cfg)
    report = run_eval(cfg, corpus, args.only)
    out = Path(args.out or Path(cfg.paths.run_dir) / "eval")
    for p in report.save(out):
        print(f"wrote {p}")
    return 0


def cmd_make_paper_run(cfg: RunConfig, args) -> int:
    cmd_gen_corpus(cfg, args)
    corpus = C.Corpus.load(cfg.paths.corpus_dir)
    for n in cfg.experiment.n_grid:
        train_one(cfg, corpus, n, "gmvae")
    train_one(cfg, corpus, max(cfg.experiment.n_grid), "vae")
    args.only, args.out = None, None
    return cmd_eval(cfg, args)


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: built-in preset)")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--corpus-dir")
    common.add_argument("--run-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="timbre-gmvae",
        description="Train and probe a pitch/timbre Gaussian-mixture VAE on synthetic instrument notes.",
        epilog="exit codes: 0 ok, 2 config error, 3 training abort, 4 bad request, 5 missing artifact")
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("gen-corpus", parents=[common], help="synthesise and store the corpus")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--n-labels", type=float, default=100.0, help="percent of instrument labels revealed")
    p.add_argument("--mode", choices=["gmvae", "vae"], default="gmvae")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("synth", parents=[common], help="decode samples drawn from mixture components")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pitch", type=int, required=True)
    p.add_argument("--instrument", type=int, required=True)
    p.add_argument("--w", type=float, default=0.0)
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synth_out")

    p = sub.add_parser("transfer", parents=[common], help="timbre transfer on validation sources")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source-class", type=int, required=True)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--alpha", type=float, action="append")
    p.add_argument("--out", default="transfer_out")

    p = sub.add_parser("traverse", parents=[common], help="shift one timbre dimension by +/- delta")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dim", default="auto", help="dimension index or 'auto'")
    p.add_argument("--delta", type=float)
    p.add_argument("--out", default="traverse_out")

    p = sub.add_parser("export-latents", parents=[common], help="dump posterior and prior means as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="latents.csv")

    p = sub.add_parser("eval", parents=[common], help="evaluate the N-grid checkpoints")
    p.add_argument("--only", action="append", choices=FRAGMENTS)
    p.add_argument("--out")

    p = sub.add_parser("make-paper-run", parents=[common], help="corpus, training grid and evaluation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    return parser


VERBS = {"gen-corpus": cmd_gen_corpus, "train": cmd_train, "synth": cmd_synth, "transfer": cmd_transfer,
         "traverse": cmd_traverse, "export-latents": cmd_export_latents, "eval": cmd_eval,
         "make-paper-run": cmd_make_paper_run}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return VERBS[args.verb](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
