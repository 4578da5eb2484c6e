"""Shared tiny models so the suite trains each one once per session."""
import numpy as np
import pytest

from attrdiff.data import CorpusConfig, generate_corpus
from attrdiff.denoiser import DenoiserConfig, DenoiserModel
from attrdiff.diffusion import DiffTrainConfig, build_train_set, train_diffusion
from attrdiff.vae import VaeConfig, train_vae

TINY_VAE = VaeConfig(latent_dim=4, embed_dim=8, heads=2, layers=1, cls_hidden=8, refine_steps=2,
                     epochs=2, batch_size=32)
TINY_DEN = DenoiserConfig(latent_dim=4, seq_len=16, hidden=8, layers=1, heads=2, T=50)
TINY_DIFF = DiffTrainConfig(lam=1.0, T=50, epochs=2, batch_size=32)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(CorpusConfig(n_train=96, n_val=16, n_test=24, seed=3))


@pytest.fixture(scope="session")
def tiny_vae(tiny_corpus):
    vae, _ = train_vae(tiny_corpus.train, TINY_VAE, seed=0)
    return vae


@pytest.fixture(scope="session")
def tiny_train_set(tiny_corpus, tiny_vae):
    return build_train_set(tiny_corpus.train, tiny_vae)


@pytest.fixture(scope="session")
def tiny_denoiser(tiny_train_set, tiny_vae):
    model, _ = train_diffusion(tiny_train_set, tiny_vae, TINY_DIFF, TINY_DEN)
    return model


@pytest.fixture
def fresh_denoiser():
    return DenoiserModel(TINY_DEN, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
