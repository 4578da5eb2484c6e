"""Two-style synthetic token corpora with a known bigram grammar.

Token layout: 0 is padding, then ``n_markers`` style-A markers, then
``n_markers`` style-B markers, then content tokens. Both styles share one set
of licensed content bigrams but weight the transitions differently, so a
parallel pair (markers swapped, content kept) stays grammatical.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PAD = 0
STYLE_A, STYLE_B = 0, 1


@dataclass(frozen=True)
class CorpusConfig:
    vocab_size: int = 32
    seq_len: int = 16
    min_len: int = 12
    n_markers: int = 6
    markers_per_sentence: int = 4
    successors: int = 4
    marker_overlap: float = 0.0
    parallel: bool = True
    n_train: int = 1600
    n_val: int = 200
    n_test: int = 200
    seed: int = 0

    def validate(self) -> None:
        k, s = self.markers_per_sentence, self.seq_len
        if k >= s or k < 1:
            raise ValueError(f"markers_per_sentence must be in [1, seq_len): k={k}, S={s}")
        if not k < self.min_len <= s:
            raise ValueError(f"need markers_per_sentence < min_len <= seq_len, got min_len={self.min_len}")
        if self.n_content < 2:
            raise ValueError("vocabulary too small for two marker sets plus content")
        if not 1 <= self.successors <= self.n_content:
            raise ValueError("successors must be in [1, n_content]")
        if not 0.0 <= self.marker_overlap <= 1.0:
            raise ValueError("marker_overlap must be in [0, 1]")

    @property
    def n_content(self) -> int:
        return self.vocab_size - 1 - 2 * self.n_markers

    def markers(self, label: int) -> np.ndarray:
        start = 1 + label * self.n_markers
        return np.arange(start, start + self.n_markers)

    @property
    def content(self) -> np.ndarray:
        return np.arange(1 + 2 * self.n_markers, self.vocab_size)


@dataclass(frozen=True)
class StyledExample:
    src: tuple[int, ...]
    src_label: int
    tgt_label: int
    tgt: tuple[int, ...] | None = None


@dataclass
class Grammar:
    """Licensed content bigrams plus per-style transition weights over them."""

    config: CorpusConfig
    licensed: np.ndarray  # (V, V) bool, only content rows/cols can be True
    start: np.ndarray  # (2, V) start distribution per style
    trans: np.ndarray  # (2, V, V) transition distribution per style

    @property
    def density(self) -> float:
        c = self.config.content
        return float(self.licensed[np.ix_(c, c)].mean())

    def is_valid(self, tokens) -> bool:
        cfg = self.config
        toks = np.asarray(tokens, dtype=np.int64)
        is_marker = (toks >= 1) & (toks <= 2 * cfg.n_markers)
        n_mark = int(is_marker.sum())
        if not 1 <= n_mark <= cfg.markers_per_sentence + 2:
            return False
        content = toks[(toks != PAD) & ~is_marker]
        return bool(self.licensed[content[:-1], content[1:]].all())

    def random_valid_probability(self, length: int) -> float:
        """Exact P(is_valid) for a sequence of ``length`` i.i.d. uniform tokens.

        Forward recursion over (last content token, marker count) states.
        """
        cfg = self.config
        V, kmax = cfg.vocab_size, cfg.markers_per_sentence + 2
        content = cfg.content
        p = 1.0 / V
        n_mark_tokens = 2 * cfg.n_markers
        # state: last content token (index V means "none yet"), marker count 0..kmax
        prob = np.zeros((V + 1, kmax + 1))
        prob[V, 0] = 1.0
        lic = np.zeros((V + 1, V), dtype=bool)
        lic[:V] = self.licensed
        lic[V, content] = True
        for _ in range(length):
            nxt = np.zeros_like(prob)
            nxt += prob * p  # pad: nothing changes
            nxt[:, 1:] += prob[:, :-1] * p * n_mark_tokens
            for c in content:
                nxt[c] += (prob * lic[:, c][:, None]).sum(axis=0) * p
            prob = nxt
        return float(prob[:, 1:].sum())


def make_grammar(config: CorpusConfig) -> Grammar:
    config.validate()
    rng = np.random.default_rng([config.seed, 0x6A4])
    V = config.vocab_size
    content = config.content
    licensed = np.zeros((V, V), dtype=bool)
    for c in content:
        succ = rng.choice(content, size=config.successors, replace=False)
        licensed[c, succ] = True
    start = np.zeros((2, V))
    trans = np.zeros((2, V, V))
    for style in (STYLE_A, STYLE_B):
        start[style, content] = rng.dirichlet(np.full(len(content), 0.5))
        for c in content:
            succ = np.flatnonzero(licensed[c])
            trans[style, c, succ] = rng.dirichlet(np.full(len(succ), 0.5))
    return Grammar(config=config, licensed=licensed, start=start, trans=trans)


def _sample_sentence(grammar: Grammar, label: int, rng: np.random.Generator) -> list[int]:
    cfg = grammar.config
    k = cfg.markers_per_sentence
    length = int(rng.integers(cfg.min_len, cfg.seq_len + 1))
    n_content = length - k
    tok = int(rng.choice(cfg.vocab_size, p=grammar.start[label]))
    chain = [tok]
    for _ in range(n_content - 1):
        tok = int(rng.choice(cfg.vocab_size, p=grammar.trans[label, tok]))
        chain.append(tok)
    slots = set(rng.choice(length, size=k, replace=False).tolist())
    sent: list[int] = []
    it = iter(chain)
    for pos in range(length):
        if pos in slots:
            style = label if rng.random() >= cfg.marker_overlap else 1 - label
            sent.append(int(rng.choice(cfg.markers(style))))
        else:
            sent.append(next(it))
    return sent + [PAD] * (cfg.seq_len - length)


def transfer_markers(config: CorpusConfig, tokens, from_label: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Replace each ``from_label`` marker with a random marker of the other style."""
    src_set = set(config.markers(from_label).tolist())
    other = config.markers(1 - from_label)
    return tuple(int(rng.choice(other)) if t in src_set else int(t) for t in tokens)


@dataclass
class Corpus:
    config: CorpusConfig
    train: list[StyledExample] = field(default_factory=list)
    val: list[StyledExample] = field(default_factory=list)
    test: list[StyledExample] = field(default_factory=list)

    @property
    def grammar(self) -> Grammar:
        return make_grammar(self.config)

    def splits(self) -> dict[str, list[StyledExample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def generate_corpus(config: CorpusConfig) -> Corpus:
    config.validate()
    grammar = make_grammar(config)
    rng = np.random.default_rng([config.seed, 0xC0])
    seen: set[tuple[int, ...]] = set()
    out = Corpus(config=config)
    for name, n in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        labels = np.arange(n) % 2
        rng.shuffle(labels)
        split = getattr(out, name)
        for label in labels.tolist():
            for _ in range(1000):
                src = tuple(_sample_sentence(grammar, label, rng))
                if src not in seen:
                    break
            else:
                raise RuntimeError("could not draw a fresh sentence; grammar too small for split sizes")
            seen.add(src)
            tgt = transfer_markers(config, src, label, rng) if config.parallel else None
            split.append(StyledExample(src=src, src_label=label, tgt_label=1 - label, tgt=tgt))
    return out


# ---------------------------------------------------------------- file IO

class DatasetFormatError(ValueError):
    pass


def save_dataset(examples: list[StyledExample], path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            rec = {"src": list(ex.src), "src_label": ex.src_label, "tgt_label": ex.tgt_label}
            if ex.tgt is not None:
                rec["tgt"] = list(ex.tgt)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path, parallel: bool | None = None) -> list[StyledExample]:
    """Read a line-delimited dataset; ``parallel=None`` infers the mode from the first record."""
    out: list[StyledExample] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                src = tuple(int(t) for t in rec["src"])
                src_label, tgt_label = int(rec["src_label"]), int(rec["tgt_label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if parallel is None:
                parallel = "tgt" in rec
            if parallel and "tgt" not in rec:
                raise DatasetFormatError(f"{path}:{lineno}: parallel record missing 'tgt'")
            tgt = tuple(int(t) for t in rec["tgt"]) if "tgt" in rec else None
            out.append(StyledExample(src=src, src_label=src_label, tgt_label=tgt_label, tgt=tgt))
    return out


def save_corpus(corpus: Corpus, prefix) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for name, split in corpus.splits().items():
        save_dataset(split, f"{prefix}.{name}")
    Path(f"{prefix}.config.json").write_text(json.dumps(asdict(corpus.config), indent=1, sort_keys=True) + "\n")


def load_corpus(prefix) -> Corpus:
    cfg = CorpusConfig(**json.loads(Path(f"{prefix}.config.json").read_text()))
    mode = cfg.parallel
    return Corpus(
        config=cfg,
        train=load_dataset(f"{prefix}.train", mode),
        val=load_dataset(f"{prefix}.val", mode),
        test=load_dataset(f"{prefix}.test", mode),
    )


def token_array(examples: list[StyledExample], side: str = "src") -> np.ndarray:
    rows = [ex.src if side == "src" else ex.tgt for ex in examples]
    if any(r is None for r in rows):
        raise ValueError(f"some examples have no '{side}' sequence")
    return np.asarray(rows, dtype=np.int64).reshape(len(rows), -1)
