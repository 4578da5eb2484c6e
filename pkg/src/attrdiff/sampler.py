"""Deterministic DDIM sampling in latent space with classifier-free or classifier guidance."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import DenoiserModel
from .schedule import NoiseSchedule, recover_eps, recover_x0, v_from_eps
from .vae import VaeModel, pool

MODES = ("cfg", "cg", "none")


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "cfg"
    gamma: float = 2.0
    ddim_steps: int = 50
    eta: float = 0.0

    def validate(self, T: int) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 1 <= self.ddim_steps <= T:
            raise ValueError(f"ddim_steps must be in [1, {T}]")
        if self.eta != 0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")


def cfg_combine(v_cond, v_uncond, gamma: float) -> np.ndarray:
    v_cond, v_uncond = np.asarray(v_cond, dtype=np.float64), np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ValueError("shape mismatch")
    return (1.0 + gamma) * v_cond - gamma * v_uncond


def cg_adjust(eps_cond, grad_logp, gamma: float, sigma_t) -> np.ndarray:
    eps_cond, grad_logp = np.asarray(eps_cond, dtype=np.float64), np.asarray(grad_logp, dtype=np.float64)
    if eps_cond.shape != grad_logp.shape:
        raise ValueError("shape mismatch")
    if not np.isfinite(grad_logp).all():
        raise ad.NonFiniteError("non-finite classifier gradient")
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    if sigma_t.ndim:
        sigma_t = sigma_t.reshape((-1,) + (1,) * (eps_cond.ndim - 1))
    return eps_cond - gamma * sigma_t * grad_logp


def classifier_log_prob(vae: VaeModel, x: Tensor, label) -> Tensor:
    """Sum over the batch of log p(label | pool(x)); x is (B, S, D)."""
    logp = ad.log_softmax(vae.classifier_logits(pool(x)))
    onehot = np.zeros(logp.shape)
    onehot[np.arange(logp.shape[0]), np.asarray(label, dtype=np.int64)] = 1.0
    return ad.sum_all(ad.const_mul(logp, onehot))


def classifier_grad(vae: VaeModel, x_t: np.ndarray, label) -> np.ndarray:
    """Gradient of log p(label | pool(x_t)) w.r.t. x_t, one example per batch row."""
    x = Tensor(np.array(x_t, dtype=np.float64), requires_grad=True)
    ad.backward(classifier_log_prob(vae, x, label))
    return x.grad if x.grad is not None else np.zeros_like(x.data)


def ddim_step(z_t: np.ndarray, v_hat: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    if not 0 <= t_prev < t:
        raise ValueError(f"DDIM steps must descend: t={t}, t_prev={t_prev}")
    x0 = recover_x0(sched, z_t, v_hat, t)
    if t_prev == 0:
        return x0
    eps = recover_eps(sched, z_t, v_hat, t)
    ab = sched.alpha_bar[t_prev - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_timesteps(T: int, n: int) -> np.ndarray:
    """``n`` evenly spaced steps from T down to 1 (just [T] for n = 1)."""
    ts = np.round(np.linspace(T, 1, n)).astype(np.int64)
    if len(np.unique(ts)) != n:
        raise ValueError("ddim_steps too large for even spacing")
    return ts


@dataclass
class SampleTrace:
    """Per-step wall-clock timings and, optionally, the visited states."""

    step_seconds: list[float] = field(default_factory=list)
    states: dict[int, np.ndarray] = field(default_factory=dict)


def run_ddim(predict_v, z_T: np.ndarray, sched: NoiseSchedule, ddim_steps: int,
             trace: SampleTrace | None = None) -> np.ndarray:
    """Generic deterministic loop; ``predict_v(z, t)`` returns the guided velocity."""
    ts = ddim_timesteps(sched.T, ddim_steps)
    z = z_T
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        t0 = time.perf_counter()
        v = predict_v(z, int(t))
        z = ddim_step(z, v, int(t), t_prev, sched)
        if not np.isfinite(z).all():
            raise ad.NonFiniteError(f"non-finite sampler state at step index {i} (t={t})")
        if trace is not None:
            trace.step_seconds.append(time.perf_counter() - t0)
            trace.states[t_prev] = z.copy()
    return z


def guided_v(model: DenoiserModel, vae: VaeModel | None, sched: NoiseSchedule, guidance: GuidanceConfig,
             z_src: np.ndarray, label: np.ndarray):
    """Return a ``predict_v(z, t)`` closure implementing the guidance mode for a batch."""
    label = np.asarray(label, dtype=np.int64)
    b = len(label)

    def cond_pass(z, t):
        return model.forward(Tensor(z), np.full(b, t), z_src, label, np.ones(b, bool)).data

    if guidance.mode == "none":
        return cond_pass
    if guidance.mode == "cfg":
        def predict(z, t):
            both = model.forward(
                Tensor(np.concatenate([z, z])), np.full(2 * b, t),
                np.concatenate([z_src, z_src]), np.concatenate([label, label]),
                np.concatenate([np.ones(b, bool), np.zeros(b, bool)]),
            ).data
            return cfg_combine(both[:b], both[b:], guidance.gamma)
        return predict
    if vae is None:
        raise ValueError("classifier guidance needs the frozen VAE classifier")

    def predict_cg(z, t):
        v_c = cond_pass(z, t)
        eps_c = recover_eps(sched, z, v_c, t)
        g = classifier_grad(vae, z, label)
        eps = cg_adjust(eps_c, g, guidance.gamma, sched.sigma_at(t))
        return v_from_eps(sched, z, eps, t)
    return predict_cg


def sample(z_src: np.ndarray, label, model: DenoiserModel, sched: NoiseSchedule, guidance: GuidanceConfig,
           seed: int, vae: VaeModel | None = None, trace: SampleTrace | None = None) -> np.ndarray:
    """Generate target latents for a batch of source latents (B, S, D) and target labels (B,)."""
    guidance.validate(sched.T)
    z_src = np.asarray(z_src, dtype=np.float64)
    single = z_src.ndim == 2
    if single:
        z_src = z_src[None]
    label = np.atleast_1d(np.asarray(label, dtype=np.int64))
    rng = np.random.default_rng([seed, 0x5A])
    z_T = rng.standard_normal(z_src.shape)
    out = run_ddim(guided_v(model, vae, sched, guidance, z_src, label), z_T, sched, guidance.ddim_steps, trace)
    return out[0] if single else out
