import numpy as np
import pytest

from mmcode.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """Shared ~12-user synthetic corpus with all companion files."""
    out = tmp_path_factory.mktemp("small_synth")
    corpus = generate(
        SynthConfig(n_users=12, tweets_per_user_max=12, seed=7, global_dim=12),
        out_dir=str(out),
    )
    return corpus


@pytest.fixture(scope="session")
def tiny_cnn_overrides():
    """CNN hyperparameters scaled down to desk size."""
    return {
        "emb_dim": 16,
        "filter_widths": (1, 2, 3),
        "maps_per_width": 8,
        "hidden_dim": 16,
        "max_len": 24,
        "batch_size": 16,
        "max_epochs": 10,
        "patience": 3,
        "lr": 0.01,
    }


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
