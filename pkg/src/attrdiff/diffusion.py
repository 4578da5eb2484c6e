"""Denoiser training with the frozen-classifier regularizer.

total = mse(v_pred, v) + lam * CE(classifier(pool(x0_hat)), target_label)
where x0_hat is recovered from v_pred, so the classifier gradient reaches the
denoiser only through that linear recovery and the mean pool.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import StyledExample, token_array
from .denoiser import DenoiserConfig, DenoiserModel
from .schedule import NoiseSchedule, build_linear_schedule, diffuse, v_target
from .vae import TrainingDivergedError, VaeModel, pool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffTrainConfig:
    lam: float = 3.0
    p_drop: float = 0.2
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    # False removes the regularization branch entirely (reference for lam=0)
    regularize: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.p_drop < 1:
            raise ValueError("p_drop must be in [0, 1)")


@dataclass
class TrainBatch:
    z_src: np.ndarray
    z_tgt: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        if self.z_src.shape != self.z_tgt.shape or self.label.shape != (len(self.z_tgt),):
            raise ValueError("inconsistent batch shapes")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.label)

    def take(self, idx) -> "TrainBatch":
        return TrainBatch(self.z_src[idx], self.z_tgt[idx], self.label[idx])


def build_train_set(examples: list[StyledExample], vae: VaeModel) -> TrainBatch:
    """Encoder means of (source, target); unpaired data conditions each sentence on itself."""
    if not vae.frozen:
        raise ValueError("the VAE must be frozen before building diffusion data")
    src = token_array(examples, "src")
    z_src = vae.encode_mean(src)
    if all(ex.tgt is not None for ex in examples):
        z_tgt = vae.encode_mean(token_array(examples, "tgt"))
        label = np.array([ex.tgt_label for ex in examples], dtype=np.int64)
    else:
        z_tgt = z_src.copy()
        label = np.array([ex.src_label for ex in examples], dtype=np.int64)
    return TrainBatch(z_src=z_src, z_tgt=z_tgt, label=label)


def diffusion_loss(v_pred: Tensor, v_tgt) -> Tensor:
    v_tgt = ad.as_tensor(v_tgt)
    return ad.mean_all(ad.square(ad.sub(v_pred, v_tgt)))


def regularization_loss(v_pred: Tensor, z_t: np.ndarray, t, label, vae: VaeModel,
                        sched: NoiseSchedule) -> Tensor:
    """CE of the frozen classifier on the pooled clean-latent estimate."""
    if not vae.frozen:
        raise ValueError("classifier must be frozen")
    z_t = np.asarray(z_t, dtype=np.float64)
    t = np.asarray(t)
    shape = (-1,) + (1,) * (z_t.ndim - 1)
    a = np.broadcast_to(sched.sqrt_ab(t).reshape(shape), z_t.shape)
    s = np.broadcast_to(sched.sigma_at(t).reshape(shape), z_t.shape)
    x0_hat = ad.add(Tensor(a * z_t), ad.const_mul(v_pred, -s))
    z_bar = pool(x0_hat)
    if z_bar.ndim == 1:
        z_bar = ad.reshape(z_bar, (1, -1))
    return ad.cross_entropy(vae.classifier_logits(z_bar), np.atleast_1d(label))


class DiffusionTrainer:
    def __init__(self, model: DenoiserModel, vae: VaeModel, config: DiffTrainConfig):
        if not vae.frozen:
            raise ValueError("the VAE must be frozen before diffusion training")
        self.model = model
        self.vae = vae
        self.config = config
        self.sched = build_linear_schedule(config.T, config.beta_start, config.beta_end)
        self.opt = nn.Adam(model.params, lr=config.lr)
        self.rng = np.random.default_rng([config.seed, 0xD7])

    def train_step(self, batch: TrainBatch) -> dict[str, float]:
        cfg = self.config
        rng = self.rng
        b = len(batch)
        t = rng.integers(1, cfg.T + 1, size=b)
        eps = rng.standard_normal(batch.z_tgt.shape)
        keep = rng.random(b) >= cfg.p_drop
        z_t = diffuse(self.sched, batch.z_tgt, eps, t)
        v = v_target(self.sched, batch.z_tgt, eps, t)
        try:
            v_pred = self.model.forward(Tensor(z_t), t, batch.z_src, batch.label, keep)
            l_diff = diffusion_loss(v_pred, v)
            if cfg.regularize and cfg.lam > 0:
                l_cls = regularization_loss(v_pred, z_t, t, batch.label, self.vae, self.sched)
                total = ad.add(l_diff, ad.mul(l_cls, cfg.lam))
                cls_value = l_cls.item()
            else:
                total = l_diff
                cls_value = float("nan")
                if cfg.regularize:
                    cls_value = regularization_loss(v_pred.detach(), z_t, t, batch.label,
                                                    self.vae, self.sched).item()
            ad.backward(total)
        except ad.NonFiniteError as exc:
            raise TrainingDivergedError(f"diffusion training diverged: {exc}") from exc
        self.opt.step()
        return {"diffusion": l_diff.item(), "classifier": cls_value, "total": total.item()}

    def train_epoch(self, data: TrainBatch) -> dict[str, float]:
        order = self.rng.permutation(len(data))
        rows = [self.train_step(data.take(order[i:i + self.config.batch_size]))
                for i in range(0, len(data), self.config.batch_size)]
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def train_diffusion(data: TrainBatch, vae: VaeModel, config: DiffTrainConfig,
                    model_config: DenoiserConfig | None = None, log_fh=None
                    ) -> tuple[DenoiserModel, list[dict]]:
    """Train a denoiser; writes one TSV line per epoch (epoch, diffusion, classifier, total) to ``log_fh``."""
    if model_config is None:
        model_config = DenoiserConfig(latent_dim=data.z_tgt.shape[-1], seq_len=data.z_tgt.shape[1], T=config.T)
    if model_config.T != config.T:
        raise ValueError("denoiser T must match the training schedule")
    model = DenoiserModel(model_config, seed=config.seed)
    trainer = DiffusionTrainer(model, vae, config)
    history = []
    for epoch in range(1, config.epochs + 1):
        row = {"epoch": epoch, **trainer.train_epoch(data)}
        history.append(row)
        log.info("diff epoch %(epoch)d diffusion=%(diffusion).4f classifier=%(classifier).4f total=%(total).4f", row)
        if log_fh is not None:
            log_fh.write(f"{epoch}\t{row['diffusion']:.6f}\t{row['classifier']:.6f}\t{row['total']:.6f}\n")
    return model, history
