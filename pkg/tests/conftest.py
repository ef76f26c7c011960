import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from helpers import tiny_model_config

from a2s.audio_frontend import StubTranscriber
from a2s.config import CurriculumConfig, RunConfig, TrainConfig
from a2s.dataset import load_examples, prepare
from a2s.fixtures import make_demo_dataset, make_overfit_fixture


@pytest.fixture(scope="session")
def overfit_shards(tmp_path_factory):
    """The 8-segment 95 BPM fixture, prepared into shards with the stub."""
    root = tmp_path_factory.mktemp("overfit_fixture")
    manifest = make_overfit_fixture(root)
    shards = root / "shards"
    prepare(manifest, shards, StubTranscriber(), precompute_embeddings=True)
    return shards


@pytest.fixture(scope="session")
def overfit_examples(overfit_shards):
    examples = load_examples(overfit_shards)
    assert len(examples) == 8
    return examples


@pytest.fixture(scope="session")
def demo_dataset(tmp_path_factory):
    """Ten short mixed-tempo songs plus manifest."""
    root = tmp_path_factory.mktemp("demo_dataset")
    manifest = make_demo_dataset(root, n_songs=10, n_segments=2, seed=3)
    return manifest


@pytest.fixture(scope="session")
def tiny_run_config():
    return RunConfig(
        model=tiny_model_config(),
        train=TrainConfig(batch_size=8, log_every=5, seed=11),
        curriculum=CurriculumConfig(stage_steps=(4, 4, 3)),
    )


@pytest.fixture(scope="session")
def quick_ckpt(tmp_path_factory, overfit_examples, tiny_run_config):
    """A checkpoint that reached stage 3 after a handful of steps."""
    from a2s.training import Trainer

    torch.manual_seed(5)
    out = tmp_path_factory.mktemp("quick_train")
    trainer = Trainer(tiny_run_config, overfit_examples, out)
    final = trainer.run()
    return final
