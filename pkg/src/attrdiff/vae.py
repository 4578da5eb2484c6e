"""Sequence VAE with a non-autoregressive refining decoder and a pooled-latent classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import StyledExample, token_array

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeConfig:
    vocab_size: int = 32
    seq_len: int = 16
    latent_dim: int = 16
    embed_dim: int = 32
    heads: int = 4
    layers: int = 2
    cls_hidden: int = 64
    refine_steps: int = 5
    train_passes: int = 2
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3


@dataclass(frozen=True)
class VaeLossWeights:
    alpha: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


class VaeModel:
    """Encoder, refining decoder and attribute classifier sharing one parameter dict."""

    def __init__(self, config: VaeConfig, seed: int = 0):
        self.config = config
        self.frozen = False
        c = config
        rng = np.random.default_rng([seed, 0x7AE])
        p: nn.Params = {}
        p["enc.tok"] = Tensor(rng.normal(0, 1.0, (c.vocab_size, c.embed_dim)), requires_grad=True)
        p["enc.pos"] = Tensor(rng.normal(0, 0.1, (c.seq_len, c.embed_dim)), requires_grad=True)
        for i in range(c.layers):
            nn.init_block(p, f"enc.{i}", c.embed_dim, rng)
        nn.init_norm(p, "enc.lnf", c.embed_dim)
        nn.init_linear(p, "enc.out", c.embed_dim, 2 * c.latent_dim, rng, scale=0.5)
        nn.init_linear(p, "dec.z", c.latent_dim, c.embed_dim, rng)
        # row vocab_size is the "unknown yet" token fed to the first pass
        p["dec.tok"] = Tensor(rng.normal(0, 1.0, (c.vocab_size + 1, c.embed_dim)), requires_grad=True)
        p["dec.pos"] = Tensor(rng.normal(0, 0.1, (c.seq_len, c.embed_dim)), requires_grad=True)
        for i in range(c.layers):
            nn.init_block(p, f"dec.{i}", c.embed_dim, rng)
        nn.init_norm(p, "dec.lnf", c.embed_dim)
        nn.init_linear(p, "dec.out", c.embed_dim, c.vocab_size, rng)
        nn.init_linear(p, "cls.fc1", c.latent_dim, c.cls_hidden, rng)
        nn.init_linear(p, "cls.fc2", c.cls_hidden, 2, rng)
        self.params = p

    def freeze(self) -> "VaeModel":
        nn.freeze(self.params)
        self.frozen = True
        return self

    @property
    def classifier_params(self) -> nn.Params:
        return {k: v for k, v in self.params.items() if k.startswith("cls.")}

    # ------------------------------------------------------------ encoder
    def encode(self, tokens) -> tuple[Tensor, Tensor]:
        """Tokens (B, S) or (S,) -> (mu, logvar), each (B, S, D) or (S, D)."""
        c = self.config
        toks = np.asarray(tokens, dtype=np.int64)
        single = toks.ndim == 1
        if single:
            toks = toks[None]
        if toks.shape[1] != c.seq_len:
            raise ValueError(f"expected sequences of length {c.seq_len}, got {toks.shape[1]}")
        if toks.min() < 0 or toks.max() >= c.vocab_size:
            raise ValueError("token id out of vocabulary")
        p = self.params
        b = toks.shape[0]
        x = ad.add(ad.embedding(p["enc.tok"], toks), ad.expand(p["enc.pos"], (b, c.seq_len, c.embed_dim)))
        for i in range(c.layers):
            x = nn.block(p, f"enc.{i}", x, c.heads)
        h = nn.linear(p, "enc.out", nn.norm(p, "enc.lnf", x))
        mu = ad.slice_last(h, 0, c.latent_dim)
        logvar = ad.clamp(ad.slice_last(h, c.latent_dim, 2 * c.latent_dim), LOGVAR_MIN, LOGVAR_MAX)
        if single:
            mu = ad.reshape(mu, mu.shape[1:])
            logvar = ad.reshape(logvar, logvar.shape[1:])
        return mu, logvar

    def encode_mean(self, tokens, batch_size: int = 512) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.ndim == 1:
            return self.encode(toks)[0].data.copy()
        out = [self.encode(toks[i:i + batch_size])[0].data for i in range(0, len(toks), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.seq_len, self.config.latent_dim))

    # ------------------------------------------------------------ decoder
    def _decode_pass(self, z: Tensor, prev: np.ndarray | None) -> Tensor:
        c = self.config
        p = self.params
        b = z.shape[0]
        if prev is None:
            prev = np.full((b, c.seq_len), c.vocab_size, dtype=np.int64)
        shape = (b, c.seq_len, c.embed_dim)
        x = ad.add(nn.linear(p, "dec.z", z), ad.expand(p["dec.pos"], shape))
        x = ad.add(x, ad.embedding(p["dec.tok"], prev))
        for i in range(c.layers):
            x = nn.block(p, f"dec.{i}", x, c.heads)
        return nn.linear(p, "dec.out", nn.norm(p, "dec.lnf", x))

    def decode_passes(self, z: Tensor, passes: int) -> list[Tensor]:
        """Logits of every refinement pass; pass k reads the argmax tokens of pass k-1."""
        if not 1 <= passes <= 10:
            raise ValueError("refine steps must be in [1, 10]")
        z = ad.as_tensor(z)
        single = z.ndim == 2
        if single:
            z = ad.reshape(z, (1,) + z.shape)
        out: list[Tensor] = []
        prev = None
        for _ in range(passes):
            logits = self._decode_pass(z, prev)
            prev = logits.data.argmax(axis=-1)
            out.append(ad.reshape(logits, logits.shape[1:]) if single else logits)
        return out

    def decode_nar(self, z, refine_steps: int | None = None) -> Tensor:
        steps = self.config.refine_steps if refine_steps is None else refine_steps
        return self.decode_passes(z, steps)[-1]

    def decode_tokens(self, z: np.ndarray, refine_steps: int | None = None, batch_size: int = 512) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            return self.decode_nar(Tensor(z), refine_steps).data.argmax(axis=-1)
        parts = [self.decode_nar(Tensor(z[i:i + batch_size]), refine_steps).data.argmax(axis=-1)
                 for i in range(0, len(z), batch_size)]
        return np.concatenate(parts, axis=0)

    # ------------------------------------------------------------ classifier
    def classifier_logits(self, z_bar: Tensor) -> Tensor:
        return nn.mlp(self.params, "cls", z_bar)

    def classify(self, z_bar) -> np.ndarray:
        z_bar = ad.as_tensor(z_bar)
        single = z_bar.ndim == 1
        if single:
            z_bar = ad.reshape(z_bar, (1, -1))
        probs = ad.softmax(self.classifier_logits(z_bar)).data
        return probs[0] if single else probs


def reparameterize(mu: Tensor, logvar: Tensor, noise) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ad.ShapeError("reparameterize: mu, logvar and noise must share a shape")
    return ad.add(mu, ad.const_mul(ad.exp(ad.mul(logvar, 0.5)), noise))


def pool(z) -> Tensor:
    """Mean over the sequence axis: (S, D) -> (D,), (B, S, D) -> (B, D)."""
    z = ad.as_tensor(z)
    if z.ndim < 2 or z.shape[-2] == 0:
        raise ad.ShapeError("pool needs a non-empty sequence axis")
    return ad.mean(z, axis=-2)


@dataclass
class VaeLosses:
    total: Tensor
    recon: Tensor
    kl: Tensor
    cls: Tensor


def vae_loss(model: VaeModel, tokens: np.ndarray, labels: np.ndarray, weights: VaeLossWeights,
             noise: np.ndarray) -> VaeLosses:
    """recon is the token cross-entropy averaged over the training refinement passes."""
    c = model.config
    tokens = np.asarray(tokens, dtype=np.int64)
    mu, logvar = model.encode(tokens)
    z = reparameterize(mu, logvar, noise)
    passes = model.decode_passes(z, c.train_passes)
    flat_targets = tokens.reshape(-1)
    recon = None
    for logits in passes:
        ce = ad.cross_entropy(ad.reshape(logits, (-1, c.vocab_size)), flat_targets)
        recon = ce if recon is None else ad.add(recon, ce)
    recon = ad.mul(recon, 1.0 / len(passes))
    kl = ad.kl_diag_gaussian(mu, logvar)
    cls = ad.cross_entropy(model.classifier_logits(pool(z)), labels)
    total = ad.add(ad.add(recon, ad.mul(kl, weights.alpha)), ad.mul(cls, weights.beta))
    return VaeLosses(total=total, recon=recon, kl=kl, cls=cls)


def vae_training_set(examples: list[StyledExample]) -> tuple[np.ndarray, np.ndarray]:
    """All source sentences plus all targets (when present), with their style labels."""
    toks = [token_array(examples, "src")]
    labels = [np.array([ex.src_label for ex in examples], dtype=np.int64)]
    with_tgt = [ex for ex in examples if ex.tgt is not None]
    if with_tgt:
        toks.append(token_array(with_tgt, "tgt"))
        labels.append(np.array([ex.tgt_label for ex in with_tgt], dtype=np.int64))
    return np.concatenate(toks), np.concatenate(labels)


def train_vae(examples: list[StyledExample], config: VaeConfig, weights: VaeLossWeights = VaeLossWeights(),
              seed: int = 0, log_fh=None) -> tuple[VaeModel, list[dict]]:
    """Train, freeze and return the VAE plus its per-epoch loss history."""
    if not examples:
        raise ValueError("empty corpus")
    model = VaeModel(config, seed=seed)
    tokens, labels = vae_training_set(examples)
    rng = np.random.default_rng([seed, 0x7A1])
    opt = nn.Adam(model.params, lr=config.lr)
    history: list[dict] = []
    n = len(tokens)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            noise = rng.standard_normal((len(idx), config.seq_len, config.latent_dim))
            try:
                losses = vae_loss(model, tokens[idx], labels[idx], weights, noise)
                ad.backward(losses.total)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(f"VAE training diverged at epoch {epoch}: {exc}") from exc
            opt.step()
            sums += [losses.total.item(), losses.recon.item(), losses.kl.item(), losses.cls.item()]
            batches += 1
        row = dict(zip(("epoch", "total", "recon", "kl", "cls"), [epoch, *(sums / batches).tolist()]))
        history.append(row)
        log.info("vae epoch %(epoch)d total=%(total).4f recon=%(recon).4f kl=%(kl).4f cls=%(cls).4f", row)
        if log_fh is not None:
            log_fh.write("\t".join(str(v) for v in row.values()) + "\n")
    return model.freeze(), history


def reconstruction_accuracy(model: VaeModel, tokens: np.ndarray) -> float:
    """Token accuracy of decode(mu(tokens))."""
    tokens = np.asarray(tokens, dtype=np.int64)
    pred = model.decode_tokens(model.encode_mean(tokens))
    return float((pred == tokens).mean())
