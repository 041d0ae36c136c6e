from __future__ import annotations

import pathlib

import numpy as np
import pytest
import torch

from face_dualdict.config import RestorerConfig, TrainConfig
from face_dualdict.imagedata import build_reference_manifest, frontal_landmarks
from face_dualdict.toy_faces import make_toy_corpus


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def tiny_restorer() -> RestorerConfig:
    return RestorerConfig(base_channels=8, num_scales=3, dict_size=4, input_size=64)


@pytest.fixture
def tiny_train(tmp_path: pathlib.Path, tiny_restorer: RestorerConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=2,
        max_epochs=1,
        max_refs_per_sample=2,
        checkpoint_dir=str(tmp_path / "ckpt"),
        log_path=str(tmp_path / "ckpt" / "train_log.jsonl"),
        restorer=tiny_restorer,
    )


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> pathlib.Path:
    root = tmp_path_factory.mktemp("toy")
    make_toy_corpus(root, identities=10, images_per_id=3, size=64, seed=0)
    return root


@pytest.fixture(scope="session")
def toy_manifests(toy_root):
    return build_reference_manifest(toy_root, 0.0, (6, 2, 2), seed=0)


@pytest.fixture
def frontal():
    return frontal_landmarks(64)
