"""Evaluation: oracle style accuracy, latent cosine similarity, grammar validity,
cluster separability, and 2-D embedding export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score

from .data import Grammar, StyledExample, token_array
from .denoiser import DenoiserModel
from .sampler import GuidanceConfig, SampleTrace, sample
from .schedule import NoiseSchedule
from .vae import VaeModel

log = logging.getLogger(__name__)

DIRECTIONS = {"a2b": 0, "b2a": 1}  # name -> source label
METRICS = ("style_accuracy", "semantic_similarity", "validity_rate")


def bag_of_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    counts = np.zeros((len(tokens), vocab_size))
    np.add.at(counts, (np.repeat(np.arange(len(tokens)), tokens.shape[1]), tokens.reshape(-1)), 1.0)
    counts[:, 0] = 0.0  # padding carries no style
    return counts


class OracleStyleClassifier:
    """Logistic regression on token counts, trained on raw sentences (independent of any VAE)."""

    def __init__(self, vocab_size: int, seed: int = 0):
        self.vocab_size = vocab_size
        self.model = LogisticRegression(C=1.0, max_iter=2000, random_state=seed)

    def fit(self, tokens: np.ndarray, labels: np.ndarray) -> "OracleStyleClassifier":
        self.model.fit(bag_of_tokens(tokens, self.vocab_size), np.asarray(labels))
        return self

    def predict(self, tokens: np.ndarray) -> np.ndarray:
        return self.model.predict(bag_of_tokens(tokens, self.vocab_size)).astype(np.int64)


def labelled_sentences(examples: list[StyledExample]) -> tuple[np.ndarray, np.ndarray]:
    toks = [token_array(examples, "src")]
    labels = [np.array([e.src_label for e in examples])]
    paired = [e for e in examples if e.tgt is not None]
    if paired:
        toks.append(token_array(paired, "tgt"))
        labels.append(np.array([e.tgt_label for e in paired]))
    return np.concatenate(toks), np.concatenate(labels)


def train_oracle(examples: list[StyledExample], vocab_size: int, seed: int = 0) -> OracleStyleClassifier:
    return OracleStyleClassifier(vocab_size, seed).fit(*labelled_sentences(examples))


def style_accuracy(generated: np.ndarray, target_labels, oracle: OracleStyleClassifier) -> float:
    generated = np.atleast_2d(np.asarray(generated))
    target_labels = np.asarray(target_labels)
    if generated.size == 0 or len(target_labels) == 0:
        raise ValueError("style_accuracy on empty input")
    return float((oracle.predict(generated) == target_labels).mean())


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    denom = na * nb
    zero = denom == 0
    if zero.any():
        log.warning("zero pooled embedding in %d pair(s); similarity set to 0", int(zero.sum()))
    out = np.zeros(len(a))
    out[~zero] = (a[~zero] * b[~zero]).sum(-1) / denom[~zero]
    return out


def sentence_embeddings(tokens: np.ndarray, vae: VaeModel) -> np.ndarray:
    """Pooled encoder means, (N, D)."""
    return vae.encode_mean(np.atleast_2d(tokens)).mean(axis=1)


def semantic_similarity(a, b, vae: VaeModel) -> float | np.ndarray:
    """Cosine of pooled encoder means; scalar for single sequences, per-row for batches."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise ValueError("semantic_similarity on empty input")
    single = a.ndim == 1
    sims = _cosine_rows(sentence_embeddings(a, vae), sentence_embeddings(b, vae))
    return float(sims[0]) if single else sims


def silhouette(embeddings, labels) -> float:
    """Mean Euclidean silhouette; a point alone in its cluster scores 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("silhouette needs at least two labels")
    if len(np.unique(labels)) >= len(x):
        return 0.0
    return float(silhouette_score(x, labels, metric="euclidean"))


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((0, 2))
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    proj = xc @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def export_embeddings(latents, labels, path, split=None) -> None:
    """CSV of PCA coordinates with label and split tag, one row per point after a header."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if latents.ndim == 3:  # per-position latents: pool first
        latents = latents.mean(axis=1)
    latents = latents.reshape(n, -1) if n else np.zeros((0, 2))
    if split is None or isinstance(split, str):
        split = [split or "all"] * n
    coords = pca_2d(latents)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pc1", "pc2", "label", "split"])
        for (x, y), lab, tag in zip(coords, labels, split):
            w.writerow([repr(float(x)), repr(float(y)), int(lab), tag])


# ---------------------------------------------------------------- full-run evaluation

@dataclass
class EvalReport:
    seeds: list[int]
    per_seed: dict[int, dict[str, dict[str, float]]]
    silhouette: float
    mean: dict[str, dict[str, float]] = field(default_factory=dict)
    step_seconds: float = float("nan")

    def __post_init__(self):
        if not self.mean:
            self.mean = {
                d: {m: float(np.mean([self.per_seed[s][d][m] for s in self.seeds])) for m in METRICS}
                for d in DIRECTIONS
            }
        self.validate()

    def validate(self) -> None:
        for s in self.seeds:
            for d in DIRECTIONS:
                r = self.per_seed[s][d]
                if not (0 <= r["style_accuracy"] <= 1 and 0 <= r["validity_rate"] <= 1
                        and -1 - 1e-9 <= r["semantic_similarity"] <= 1 + 1e-9):
                    raise ValueError(f"metric out of range for seed {s} direction {d}: {r}")
        if not -1 <= self.silhouette <= 1:
            raise ValueError("silhouette out of range")

    def to_lines(self) -> list[str]:
        # wall-clock step time stays out of the file so reports are reproducible bit for bit
        lines = [f"seeds={','.join(map(str, self.seeds))}", f"silhouette={self.silhouette!r}"]
        for s in self.seeds:
            for d in DIRECTIONS:
                for m in METRICS:
                    lines.append(f"seed{s}.{d}.{m}={self.per_seed[s][d][m]!r}")
        for d in DIRECTIONS:
            for m in METRICS:
                lines.append(f"mean.{d}.{m}={self.mean[d][m]!r}")
        return lines

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in open(path).read().splitlines() if line.strip())
        seeds = [int(s) for s in kv["seeds"].split(",")]
        per_seed = {s: {d: {m: float(kv[f"seed{s}.{d}.{m}"]) for m in METRICS} for d in DIRECTIONS} for s in seeds}
        mean = {d: {m: float(kv[f"mean.{d}.{m}"]) for m in METRICS} for d in DIRECTIONS}
        return cls(seeds=seeds, per_seed=per_seed, silhouette=float(kv["silhouette"]), mean=mean)


def generate(examples: list[StyledExample], vae: VaeModel, denoiser: DenoiserModel, sched: NoiseSchedule,
             guidance: GuidanceConfig, seed: int, trace: SampleTrace | None = None) -> np.ndarray:
    """Transfer every example to its target label and decode; returns tokens (N, S)."""
    z_src = vae.encode_mean(token_array(examples, "src"))
    labels = np.array([e.tgt_label for e in examples])
    z = sample(z_src, labels, denoiser, sched, guidance, seed=seed, vae=vae, trace=trace)
    return vae.decode_tokens(z)


def evaluate_generated(examples: list[StyledExample], generated: dict[int, np.ndarray], vae: VaeModel,
                       oracle: OracleStyleClassifier, grammar: Grammar) -> EvalReport:
    """Score pre-generated transfers; ``generated[seed]`` holds tokens aligned with ``examples``."""
    if not vae.frozen:
        raise ValueError("evaluation needs a frozen VAE")
    seeds = list(generated)
    per_seed: dict[int, dict[str, dict[str, float]]] = {}
    for s in seeds:
        gen_all = np.asarray(generated[s])
        if len(gen_all) != len(examples):
            raise ValueError(f"seed {s}: {len(gen_all)} generations for {len(examples)} examples")
        per_seed[s] = {}
        for name, src_label in DIRECTIONS.items():
            idx = [i for i, e in enumerate(examples) if e.src_label == src_label]
            if not idx:
                raise ValueError(f"no test examples for direction {name}")
            gen = gen_all[idx]
            subset = [examples[i] for i in idx]
            refs = np.array([e.tgt if e.tgt is not None else e.src for e in subset])
            per_seed[s][name] = {
                "style_accuracy": style_accuracy(gen, [e.tgt_label for e in subset], oracle),
                "semantic_similarity": float(np.mean(semantic_similarity(gen, refs, vae))),
                "validity_rate": float(np.mean([grammar.is_valid(g) for g in gen])),
            }
    src_tokens = token_array(examples, "src")
    sil = silhouette(sentence_embeddings(src_tokens, vae), [e.src_label for e in examples])
    return EvalReport(seeds=seeds, per_seed=per_seed, silhouette=sil)


def evaluate_run(examples: list[StyledExample], vae: VaeModel, denoiser: DenoiserModel,
                 oracle: OracleStyleClassifier, grammar: Grammar, sched: NoiseSchedule,
                 guidance: GuidanceConfig = GuidanceConfig(), seeds=(1, 2, 3)) -> EvalReport:
    """Sample every example once per seed, then score both transfer directions."""
    generated = {}
    step_times: list[float] = []
    for s in seeds:
        trace = SampleTrace()
        generated[s] = generate(examples, vae, denoiser, sched, guidance, seed=s, trace=trace)
        step_times.extend(trace.step_seconds)
    report = evaluate_generated(examples, generated, vae, oracle, grammar)
    report.step_seconds = float(np.mean(step_times))
    return report
