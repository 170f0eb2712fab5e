import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scripts.mlp_model import LabeledDataset, ModelSpec  # noqa: E402


def make_blobs(n_per_class: int, classes: int = 2, dim: int = 2, spread: float = 0.3, seed: int = 0) -> LabeledDataset:
    """クラスごとに離れた中心を持つ小さなデータ"""
    rng = np.random.default_rng(seed)
    centers = np.eye(classes, dim) * 3.0
    labels = np.repeat(np.arange(classes), n_per_class)
    features = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    return LabeledDataset(features, labels)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(input_dim=2, hidden_dims=(4,), output_classes=2)


@pytest.fixture
def blobs() -> LabeledDataset:
    return make_blobs(20)
