import pytest
import torch

from sirilab.data import build_corpus
from sirilab.model import ModelConfig
from sirilab.siri import DataConfig, PeriodSchedule, RunConfig

torch.set_num_threads(1)

TINY_MODEL = ModelConfig(embed_dim=16, encoder_layers=1, decoder_layers=1, attention_heads=2,
                         feedforward_dim=32, backbone_dim=8, dropout=0.1)


@pytest.fixture(scope="session")
def tiny_data():
    splits = build_corpus(0, 48, 16, 0)
    return splits["train"], splits["val"]


@pytest.fixture
def tiny_config():
    return RunConfig(model=TINY_MODEL,
                     schedule=PeriodSchedule(initial_epochs=2, retrain_epochs=1, n_periods=2, batch_size=16,
                                             learning_rate=1e-3, base_seed=5),
                     data=DataConfig(n_train=48, n_val=16))
