import numpy as np
import pytest
import torch

from app.core.config import DiffusionConfig, ModelConfig, TrainConfig
from app.services.acoustic_model import FormantDiffModel
from app.services.toy_corpus import generate_corpus
from app.services.training import corpus_stats, extract_features


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run long training oracles")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_model_cfg():
    # 80 mel bins so real mels fit, everything else shrunk
    return ModelConfig(
        d_hidden=16,
        d_style=16,
        n_heads=2,
        ffn_inner=32,
        dropout=0.0,
        text_layers=2,
        generator_layers=1,
        predictor_filter=16,
        aligner_dim=16,
        unet_base=8,
        unet_mults=(1, 2),
        time_emb_dim=16,
    )


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(
        batch_size=2,
        max_steps=3,
        warmup_steps=10,
        seed=7,
        prior_anneal_steps=2,
        log_every=1,
        eval_every=0,
        checkpoint_every=0,
    )


@pytest.fixture
def diffusion_cfg():
    return DiffusionConfig()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("corpus")
    return generate_corpus(6, 8, 2, seed=3, out_dir=out_dir, n_heldout_speakers=1)


@pytest.fixture(scope="session")
def train_features(small_corpus):
    entries = small_corpus.split("train")
    return entries, extract_features(small_corpus, entries, max_workers=2)


@pytest.fixture
def tiny_model(tiny_model_cfg, small_corpus, train_features):
    entries, features = train_features
    model = FormantDiffModel(len(small_corpus.alphabet), tiny_model_cfg, corpus_stats(features, entries))
    return model.eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def tiny_checkpoint(tmp_path, tiny_model, small_corpus, tiny_train_cfg, diffusion_cfg):
    from app.services.training import save_checkpoint

    return save_checkpoint(tmp_path / "tiny.ckpt", tiny_model, small_corpus.alphabet, 3, tiny_train_cfg,
                           diffusion_cfg)
