"""공통 fixture"""
import numpy as np
import pytest

from app.core.encoder import EncoderModel
from app.core.geometry import PointCloud, normalize
from app.core.models import ExperimentConfig, ModelConfig
from app.services.dataset import generate_synthetic_dataset


def random_cloud(rng: np.random.Generator, n: int) -> PointCloud:
    """정규화된 무작위 점군"""
    return normalize(PointCloud(rng.normal(size=(n, 3))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """d=8, h=2, 1층, 전부 dot-product"""
    return ModelConfig(d=8, heads=2, layers=1, ff_hidden=32)


@pytest.fixture
def toy_config():
    """d=16, h=4 (Gaussian 2), 2층, learnable σ"""
    return ModelConfig(
        d=16,
        heads=4,
        layers=2,
        gaussian_heads=2,
        sigmas=[0.2, 0.6],
        sigma_learnable=True,
        ff_hidden=16,
    )


@pytest.fixture
def toy_model(toy_config):
    return EncoderModel.initialize(toy_config, seed=3)


@pytest.fixture
def small_dataset():
    return generate_synthetic_dataset(count=8, n=24, seed=5)


@pytest.fixture
def toy_experiment():
    """몇 초 안에 끝나는 학습 설정"""
    return ExperimentConfig(
        variant="toy",
        model=ModelConfig(d=8, heads=2, layers=1, gaussian_heads=1, sigmas=[0.3], ff_hidden=8),
        epochs=2,
        batch_shapes=4,
        seed=11,
        optimizer={"lr": 1e-2},
        evaluation={"pairs": 2, "seed": 3, "classification_pairs": 2},
        layer_ablation_epochs=1,
    )
