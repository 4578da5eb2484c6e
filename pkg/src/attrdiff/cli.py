"""Command-line entry point: ``attrdiff <subcommand> --out DIR [flags]``.

Every stage reads its inputs from and writes its outputs to the run directory::

    DIR/data/corpus.{train,val,test,config.json}   gen-data
    DIR/vae.ckpt, DIR/vae_loss.tsv                  train-vae
    DIR/lam{L}/diff.ckpt, DIR/lam{L}/loss.tsv       train-diff
    DIR/lam{L}/samples_{mode}_seed{S}.jsonl         sample
    DIR/lam{L}/report_{mode}.txt, timing_{mode}.txt eval
    DIR/embeddings.csv                              export-emb
    DIR/summary.tsv                                 pipeline
    DIR/run_config.txt                              resolved config, every stage
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import CorpusConfig, generate_corpus, load_corpus, save_corpus, token_array
from .denoiser import DenoiserConfig, DenoiserModel
from .diffusion import DiffTrainConfig, build_train_set, train_diffusion
from .metrics import (DIRECTIONS, METRICS, EvalReport, evaluate_generated, export_embeddings, generate,
                      train_oracle)
from .sampler import MODES, GuidanceConfig, SampleTrace
from .schedule import build_linear_schedule
from .vae import VaeConfig, VaeLossWeights, VaeModel, train_vae

log = logging.getLogger("attrdiff")

SUBCOMMANDS = ("gen-data", "train-vae", "train-diff", "sample", "eval", "export-emb", "pipeline")


@dataclass
class RunConfig:
    # corpus
    data_seed: int = 0
    parallel: bool = True
    n_train: int = 1600
    n_val: int = 200
    n_test: int = 200
    marker_overlap: float = 0.0
    # model dims
    vocab_size: int = 32
    seq_len: int = 16
    latent_dim: int = 16
    vae_embed: int = 32
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    # vae
    alpha: float = 0.1
    beta: float = 1.0
    vae_epochs: int = 6
    vae_lr: float = 2e-3
    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lam: float = 3.0
    lambdas: list[float] = field(default_factory=lambda: [0.0, 1.0, 3.0, 5.0, 10.0])
    p_drop: float = 0.2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    train_seed: int = 0
    # sampling / eval
    mode: str = "cfg"
    gamma: float = 2.0
    ddim_steps: int = 50
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])

    def validate(self) -> None:
        self.corpus_config().validate()
        DenoiserConfig(**self._denoiser_kwargs())
        DiffTrainConfig(lam=self.lam, p_drop=self.p_drop)
        VaeLossWeights(self.alpha, self.beta)
        build_linear_schedule(self.T, self.beta_start, self.beta_end)
        self.guidance().validate(self.T)
        if any(lam < 0 for lam in self.lambdas):
            raise ValueError("lambdas must be non-negative")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for name in ("vae_epochs", "epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    # ---------------------------------------------------------- derived configs
    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(vocab_size=self.vocab_size, seq_len=self.seq_len, parallel=self.parallel,
                            n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                            marker_overlap=self.marker_overlap, seed=self.data_seed)

    def vae_config(self) -> VaeConfig:
        return VaeConfig(vocab_size=self.vocab_size, seq_len=self.seq_len, latent_dim=self.latent_dim,
                         embed_dim=self.vae_embed, epochs=self.vae_epochs, lr=self.vae_lr,
                         batch_size=self.batch_size)

    def _denoiser_kwargs(self) -> dict:
        return dict(latent_dim=self.latent_dim, seq_len=self.seq_len, hidden=self.hidden,
                    layers=self.layers, heads=self.heads, T=self.T)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(**self._denoiser_kwargs())

    def diff_config(self, lam: float | None = None) -> DiffTrainConfig:
        return DiffTrainConfig(lam=self.lam if lam is None else lam, p_drop=self.p_drop, T=self.T,
                               beta_start=self.beta_start, beta_end=self.beta_end, lr=self.lr,
                               epochs=self.epochs, batch_size=self.batch_size, seed=self.train_seed)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(mode=self.mode, gamma=self.gamma, ddim_steps=self.ddim_steps)

    # ---------------------------------------------------------- key=value file
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) for x in v)
            else:
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_value(cls, name: str, text: str):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if name not in types:
            raise ValueError(f"unknown config key '{name}'")
        typ = types[name]
        text = text.strip().strip("'\"")
        if typ == "bool":
            if text not in ("True", "False", "true", "false", "1", "0"):
                raise ValueError(f"{name}: expected a boolean, got {text!r}")
            return text in ("True", "true", "1")
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
        if typ == "str":
            return text
        if typ == "list[float]":
            return [float(x) for x in text.split(",") if x.strip()]
        if typ == "list[int]":
            return [int(x) for x in text.split(",") if x.strip()]
        raise ValueError(f"unsupported config type {typ}")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, val = line.split("=", 1)
            setattr(cfg, key.strip(), cls.parse_value(key.strip(), val))
        return cfg


# ---------------------------------------------------------------- paths & loaders

def lam_tag(lam: float) -> str:
    return f"lam{lam:g}"


def corpus_prefix(out: Path) -> Path:
    return out / "data" / "corpus"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run '{stage}' first")
    return path


def run_corpus(out: Path):
    _require(Path(f"{corpus_prefix(out)}.config.json"), "gen-data")
    return load_corpus(corpus_prefix(out))


def load_vae(cfg: RunConfig, out: Path) -> VaeModel:
    model = VaeModel(cfg.vae_config())
    checkpoint.load_into(model.params, _require(out / "vae.ckpt", "train-vae"))
    return model.freeze()


def load_denoiser(cfg: RunConfig, out: Path, lam: float) -> DenoiserModel:
    model = DenoiserModel(cfg.denoiser_config())
    checkpoint.load_into(model.params, _require(out / lam_tag(lam) / "diff.ckpt", "train-diff"))
    for p in model.params.values():
        p.requires_grad = False
    return model


# ---------------------------------------------------------------- stages

def stage_gen_data(cfg: RunConfig, out: Path) -> None:
    corpus = generate_corpus(cfg.corpus_config())
    save_corpus(corpus, corpus_prefix(out))
    log.info("wrote corpus to %s.*", corpus_prefix(out))


def stage_train_vae(cfg: RunConfig, out: Path) -> None:
    corpus = run_corpus(out)
    with open(out / "vae_loss.tsv", "w") as fh:
        model, _ = train_vae(corpus.train, cfg.vae_config(), VaeLossWeights(cfg.alpha, cfg.beta),
                             seed=cfg.train_seed, log_fh=fh)
    checkpoint.save_checkpoint(model.params, out / "vae.ckpt")


def stage_train_diff(cfg: RunConfig, out: Path, lam: float) -> None:
    corpus = run_corpus(out)
    vae = load_vae(cfg, out)
    data = build_train_set(corpus.train, vae)
    d = out / lam_tag(lam)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "loss.tsv", "w") as fh:
        model, _ = train_diffusion(data, vae, cfg.diff_config(lam), cfg.denoiser_config(), log_fh=fh)
    checkpoint.save_checkpoint(model.params, d / "diff.ckpt")


def samples_path(out: Path, lam: float, mode: str, seed: int) -> Path:
    return out / lam_tag(lam) / f"samples_{mode}_seed{seed}.jsonl"


def stage_sample(cfg: RunConfig, out: Path, lam: float) -> float:
    """Write one JSONL of transfers per seed; returns the mean wall-clock seconds per DDIM step."""
    corpus = run_corpus(out)
    vae = load_vae(cfg, out)
    den = load_denoiser(cfg, out, lam)
    sched = build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    steps: list[float] = []
    for seed in cfg.seeds:
        trace = SampleTrace()
        toks = generate(corpus.test, vae, den, sched, cfg.guidance(), seed=seed, trace=trace)
        steps.extend(trace.step_seconds)
        with open(samples_path(out, lam, cfg.mode, seed), "w") as fh:
            for ex, gen in zip(corpus.test, toks):
                fh.write(json.dumps({"src": list(ex.src), "tgt_label": ex.tgt_label,
                                     "generated": gen.tolist()}) + "\n")
    mean_step = float(np.mean(steps))
    (out / lam_tag(lam) / f"timing_{cfg.mode}.txt").write_text(f"mean_step_seconds={mean_step!r}\n")
    return mean_step


def read_samples(path: Path) -> np.ndarray:
    with open(path) as fh:
        return np.array([json.loads(line)["generated"] for line in fh if line.strip()], dtype=np.int64)


def stage_eval(cfg: RunConfig, out: Path, lam: float) -> EvalReport:
    """Score the samples written by 'sample' (generating any that are missing)."""
    missing = [s for s in cfg.seeds if not samples_path(out, lam, cfg.mode, s).exists()]
    if missing:
        stage_sample(cfg, out, lam)
    corpus = run_corpus(out)
    vae = load_vae(cfg, out)
    oracle = train_oracle(corpus.train, cfg.vocab_size, seed=cfg.data_seed)
    generated = {s: read_samples(samples_path(out, lam, cfg.mode, s)) for s in cfg.seeds}
    report = evaluate_generated(corpus.test, generated, vae, oracle, corpus.grammar)
    report.save(out / lam_tag(lam) / f"report_{cfg.mode}.txt")
    return report


def stage_export_emb(cfg: RunConfig, out: Path) -> None:
    corpus = run_corpus(out)
    vae = load_vae(cfg, out)
    lat, labels, tags = [], [], []
    for name in ("train", "test"):
        split = corpus.splits()[name]
        lat.append(vae.encode_mean(token_array(split, "src")).mean(axis=1))
        labels += [e.src_label for e in split]
        tags += [name] * len(split)
    export_embeddings(np.concatenate(lat), labels, out / "embeddings.csv", tags)


def write_summary(reports: dict[float, EvalReport], path: Path) -> None:
    cols = [f"{d}.{m}" for d in DIRECTIONS for m in METRICS]
    with open(path, "w") as fh:
        fh.write("\t".join(["lambda"] + cols) + "\n")
        for lam, rep in reports.items():
            vals = [f"{rep.mean[d][m]:.4f}" for d in DIRECTIONS for m in METRICS]
            fh.write("\t".join([f"{lam:g}"] + vals) + "\n")


def stage_pipeline(cfg: RunConfig, out: Path) -> dict[float, EvalReport]:
    stage_gen_data(cfg, out)
    stage_train_vae(cfg, out)
    stage_export_emb(cfg, out)
    reports = {}
    for lam in cfg.lambdas:
        stage_train_diff(cfg, out, lam)
        stage_sample(cfg, out, lam)
        reports[lam] = stage_eval(cfg, out, lam)
    write_summary(reports, out / "summary.tsv")
    return reports


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrdiff", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--out", required=True, type=Path, help="run directory")
    parser.add_argument("--config", type=Path, help="key=value file (e.g. an echoed run_config.txt)")
    parser.add_argument("--seed", type=int, help="corpus and training seed")
    parser.add_argument("--seeds", help="comma-separated sampling seeds")
    parser.add_argument("--lambda", dest="lam", type=float, help="regularization weight for one stage")
    parser.add_argument("--lambdas", help="comma-separated weights for pipeline")
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--steps", type=int, help="diffusion steps T")
    parser.add_argument("--ddim-steps", type=int)
    parser.add_argument("--mode", choices=MODES)
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument("--parallel", dest="parallel", action="store_true", default=None)
    mode.add_argument("--nonparallel", dest="parallel", action="store_false")
    parser.add_argument("--epochs", type=int, help="diffusion epochs")
    parser.add_argument("--vae-epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--alpha", type=float, help="VAE KL weight")
    parser.add_argument("--beta", type=float, help="VAE classifier weight")
    parser.add_argument("--n-train", type=int)
    parser.add_argument("--n-test", type=int)
    parser.add_argument("--dims", help="denoiser LAYERS,HIDDEN,HEADS (e.g. 6,256,8)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_text(args.config.read_text()) if args.config else RunConfig()
    if args.seed is not None:
        cfg.data_seed = cfg.train_seed = args.seed
    if args.seeds is not None:
        cfg.seeds = RunConfig.parse_value("seeds", args.seeds)
    if args.lambdas is not None:
        cfg.lambdas = RunConfig.parse_value("lambdas", args.lambdas)
    direct = {"lam": "lam", "gamma": "gamma", "steps": "T", "ddim_steps": "ddim_steps", "mode": "mode",
              "parallel": "parallel", "epochs": "epochs", "vae_epochs": "vae_epochs", "lr": "lr",
              "alpha": "alpha", "beta": "beta", "n_train": "n_train", "n_test": "n_test"}
    for arg, key in direct.items():
        val = getattr(args, arg)
        if val is not None:
            setattr(cfg, key, val)
    if args.dims is not None:
        parts = args.dims.split(",")
        if len(parts) != 3:
            raise ValueError("--dims expects LAYERS,HIDDEN,HEADS")
        cfg.layers, cfg.hidden, cfg.heads = (int(x) for x in parts)
    cfg.validate()
    return cfg


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        print(f"attrdiff: invalid configuration: {exc}", file=sys.stderr)
        return 1
    out: Path = args.out
    stage = args.subcommand
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.txt").write_text(cfg.to_text())
        if stage == "gen-data":
            stage_gen_data(cfg, out)
        elif stage == "train-vae":
            stage_train_vae(cfg, out)
        elif stage == "train-diff":
            stage_train_diff(cfg, out, cfg.lam)
        elif stage == "sample":
            stage_sample(cfg, out, cfg.lam)
        elif stage == "eval":
            report = stage_eval(cfg, out, cfg.lam)
            print("\n".join(report.to_lines()))
        elif stage == "export-emb":
            stage_export_emb(cfg, out)
        elif stage == "pipeline":
            stage_pipeline(cfg, out)
            print((out / "summary.tsv").read_text(), end="")
    except Exception as exc:  # noqa: BLE001 - report any stage failure with its name
        print(f"attrdiff: stage '{stage}' failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
