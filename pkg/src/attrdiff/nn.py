"""Layer helpers over named parameter dicts, plus Adam."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = dict[str, Tensor]


def init_linear(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                bias: bool = True, scale: float = 1.0) -> None:
    std = scale / np.sqrt(n_in)
    params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def init_norm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.g"] = Tensor(np.ones(dim), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    """Apply ``x @ W + b`` over the last axis of an arbitrary-rank ``x``."""
    w = params[f"{name}.w"]
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    y = ad.matmul(flat, w)
    b = params.get(f"{name}.b")
    if b is not None:
        y = ad.add(y, ad.expand(b, y.shape))
    return ad.reshape(y, lead + (w.shape[1],))


def norm(params: Params, name: str, x: Tensor) -> Tensor:
    y = ad.layer_norm(x)
    y = ad.mul(y, ad.expand(params[f"{name}.g"], y.shape))
    return ad.add(y, ad.expand(params[f"{name}.b"], y.shape))


def mlp(params: Params, name: str, x: Tensor) -> Tensor:
    return linear(params, f"{name}.fc2", ad.relu(linear(params, f"{name}.fc1", x)))


def init_attention(params: Params, name: str, dim: int, rng: np.random.Generator,
                   kv_dim: int | None = None) -> None:
    kv_dim = dim if kv_dim is None else kv_dim
    init_linear(params, f"{name}.q", dim, dim, rng, bias=False)
    init_linear(params, f"{name}.k", kv_dim, dim, rng, bias=False)
    init_linear(params, f"{name}.v", kv_dim, dim, rng, bias=False)
    init_linear(params, f"{name}.o", dim, dim, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, h = x.shape
    x = ad.reshape(x, (b, s, heads, h // heads))
    x = ad.permute(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * heads, s, h // heads))


def _merge_heads(x: Tensor, batch: int, heads: int) -> Tensor:
    _, s, dh = x.shape
    x = ad.reshape(x, (batch, heads, s, dh))
    x = ad.permute(x, (0, 2, 1, 3))
    return ad.reshape(x, (batch, s, heads * dh))


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic scaled dot-product weights for (N, Sq, d) queries and (N, Sk, d) keys."""
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return ad.softmax(scores)


def attention(params: Params, name: str, x: Tensor, ctx: Tensor, heads: int) -> Tensor:
    """Multi-head attention of queries from ``x`` (B, S, H) over ``ctx`` (B, Sc, Hc)."""
    b = x.shape[0]
    if x.shape[-1] % heads:
        raise ad.ShapeError(f"hidden size {x.shape[-1]} not divisible by {heads} heads")
    q = _split_heads(linear(params, f"{name}.q", x), heads)
    k = _split_heads(linear(params, f"{name}.k", ctx), heads)
    v = _split_heads(linear(params, f"{name}.v", ctx), heads)
    out = ad.matmul(attention_weights(q, k), v)
    return linear(params, f"{name}.o", _merge_heads(out, b, heads))


def init_block(params: Params, name: str, dim: int, rng: np.random.Generator,
               cross_dim: int | None = None) -> None:
    init_norm(params, f"{name}.ln1", dim)
    init_attention(params, f"{name}.self", dim, rng)
    if cross_dim is not None:
        init_norm(params, f"{name}.lnx", dim)
        init_attention(params, f"{name}.cross", dim, rng, kv_dim=cross_dim)
    init_norm(params, f"{name}.ln2", dim)
    init_linear(params, f"{name}.mlp.fc1", dim, 2 * dim, rng)
    init_linear(params, f"{name}.mlp.fc2", 2 * dim, dim, rng, scale=0.5)


def block(params: Params, name: str, x: Tensor, heads: int, ctx: Tensor | None = None) -> Tensor:
    """Pre-norm transformer block; cross-attends to ``ctx`` when given."""
    h = norm(params, f"{name}.ln1", x)
    x = ad.add(x, attention(params, f"{name}.self", h, h, heads))
    if ctx is not None:
        h = norm(params, f"{name}.lnx", x)
        x = ad.add(x, attention(params, f"{name}.cross", h, ctx, heads))
    return ad.add(x, mlp(params, f"{name}.mlp", norm(params, f"{name}.ln2", x)))


def sinusoidal(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard sin/cos features, shape (len(positions), dim)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions * freqs[None, :]
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        out = np.concatenate([out, np.zeros((out.shape[0], 1))], axis=1)
    return out


def freeze(params: Params) -> None:
    for p in params.values():
        p.requires_grad = False
        p.grad = None


def checksum(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def zero_grad(params: Params) -> None:
    for p in params.values():
        p.grad = None


def grad_check_param(params: Params, name: str, loss_fn, h: float = 1e-5) -> float:
    """``ad.grad_check`` of ``loss_fn()`` with respect to the single parameter ``params[name]``."""
    original = params[name]

    def f(x: Tensor) -> Tensor:
        params[name] = x
        try:
            return loss_fn()
        finally:
            params[name] = original

    try:
        return ad.grad_check(f, original.data, h)
    finally:
        zero_grad(params)


@dataclass
class Adam:
    params: Params
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float | None = 1.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        grads = {k: p.grad for k, p in self.params.items() if p.requires_grad and p.grad is not None}
        scale = 1.0
        if self.clip is not None and grads:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip:
                scale = self.clip / total
        for name in sorted(grads):
            g = grads[name] * scale
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.step_count)
            vhat = v / (1 - b2 ** self.step_count)
            if self.lr:
                self.params[name].data = self.params[name].data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        zero_grad(self.params)
