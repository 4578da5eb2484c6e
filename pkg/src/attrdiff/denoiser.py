"""Velocity-prediction transformer over latent sequences, conditioned on a source latent.

The conditional and unconditional branches share every weight. Dropping the
condition swaps the source latent for a learned null latent and removes the
label embedding; the rest of the network is untouched.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 16
    seq_len: int = 16
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    T: int = 1000

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")


@dataclass(frozen=True)
class Condition:
    """Either a source latent (S, D) with a target label, or the null condition."""

    z_src: np.ndarray | None = None
    label: int | None = None

    @property
    def is_null(self) -> bool:
        return self.z_src is None

    @classmethod
    def source(cls, z_src, label: int) -> "Condition":
        return cls(z_src=np.asarray(z_src, dtype=np.float64), label=int(label))

    @classmethod
    def null(cls) -> "Condition":
        return cls()


def drop_condition(cond: Condition, u: float, p_drop: float) -> Condition:
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must be in [0, 1)")
    return Condition.null() if u < p_drop else cond


def time_embed(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of the raw step index; (dim,) for scalar t, (B, dim) for an array."""
    arr = np.asarray(t)
    if np.any(arr < 1) or np.any(arr > T):
        raise ValueError(f"timestep out of range 1..{T}")
    out = nn.sinusoidal(arr.reshape(-1), dim)
    return out[0] if arr.ndim == 0 else out


class DenoiserModel:
    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng([seed, 0xD1F])
        p: nn.Params = {}
        nn.init_linear(p, "in", c.latent_dim, c.hidden, rng)
        p["pos"] = Tensor(rng.normal(0, 0.1, (c.seq_len, c.hidden)), requires_grad=True)
        nn.init_linear(p, "time.fc1", c.hidden, c.hidden, rng)
        nn.init_linear(p, "time.fc2", c.hidden, c.hidden, rng)
        nn.init_linear(p, "cond", c.latent_dim, c.hidden, rng)
        p["cond.pos"] = Tensor(rng.normal(0, 0.1, (c.seq_len, c.hidden)), requires_grad=True)
        p["cond.label"] = Tensor(rng.normal(0, 0.1, (2, c.hidden)), requires_grad=True)
        p["null"] = Tensor(rng.normal(0, 1.0, (c.seq_len, c.latent_dim)), requires_grad=True)
        for i in range(c.layers):
            nn.init_block(p, f"blk.{i}", c.hidden, rng, cross_dim=c.hidden)
        nn.init_norm(p, "lnf", c.hidden)
        nn.init_linear(p, "out", c.hidden, c.latent_dim, rng, scale=0.1)
        self.params = p

    def forward(self, z_t: Tensor, t, z_src: np.ndarray | None, label, keep) -> Tensor:
        """Batched prediction.

        z_t: (B, S, D); t: (B,) steps; z_src: (B, S, D) or None; label: (B,) ints;
        keep: (B,) bools, False routes that example to the null condition.
        """
        c = self.config
        p = self.params
        z_t = ad.as_tensor(z_t)
        if z_t.ndim != 3 or z_t.shape[1:] != (c.seq_len, c.latent_dim):
            raise ad.ShapeError(f"z_t must be (B, {c.seq_len}, {c.latent_dim}), got {z_t.shape}")
        b = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        keep = np.broadcast_to(np.asarray(keep, dtype=bool), (b,))
        shape_h = (b, c.seq_len, c.hidden)
        shape_d = (b, c.seq_len, c.latent_dim)

        temb = Tensor(time_embed(t, c.T, c.hidden))
        temb = nn.linear(p, "time.fc2", ad.relu(nn.linear(p, "time.fc1", temb)))
        temb = ad.expand(ad.reshape(temb, (b, 1, c.hidden)), shape_h)
        x = ad.add(ad.add(nn.linear(p, "in", z_t), ad.expand(p["pos"], shape_h)), temb)

        keep_d = np.broadcast_to(keep[:, None, None], shape_d).astype(np.float64)
        null = ad.const_mul(ad.expand(p["null"], shape_d), 1.0 - keep_d)
        if z_src is not None and keep.any():
            z_src = np.asarray(z_src, dtype=np.float64)
            if z_src.shape != shape_d:
                raise ad.ShapeError(f"z_src shape {z_src.shape} != {shape_d}")
            ctx_lat = ad.add(null, Tensor(z_src * keep_d))
        else:
            if keep.any():
                raise ValueError("keep=True requires z_src")
            ctx_lat = null
        ctx = ad.add(nn.linear(p, "cond", ctx_lat), ad.expand(p["cond.pos"], shape_h))
        if keep.any():
            lab = np.where(keep, np.broadcast_to(np.asarray(label, dtype=np.int64), (b,)), 0)
            lemb = ad.embedding(p["cond.label"], lab)
            lemb = ad.const_mul(ad.expand(ad.reshape(lemb, (b, 1, c.hidden)), shape_h),
                                np.broadcast_to(keep[:, None, None], shape_h).astype(np.float64))
            ctx = ad.add(ctx, lemb)

        # the condition stream is both cross-attention context and a position-aligned input term
        x = ad.add(x, ctx)
        for i in range(c.layers):
            x = nn.block(p, f"blk.{i}", x, c.heads, ctx=ctx)
        return nn.linear(p, "out", nn.norm(p, "lnf", x))

    def predict_v(self, z_t, t: int, cond: Condition) -> np.ndarray:
        """Single-example prediction; z_t is (S, D)."""
        z = np.asarray(z_t, dtype=np.float64)[None]
        if cond.is_null:
            out = self.forward(Tensor(z), [t], None, [0], [False])
        else:
            out = self.forward(Tensor(z), [t], cond.z_src[None], [cond.label], [True])
        return out.data[0]
