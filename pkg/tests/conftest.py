import numpy as np
import pytest

from aequigrasp.irreps import parse_irreps
from aequigrasp.kinematics import load_gripper, shipped_grippers
from aequigrasp.liegroup import sample_rotation_uniform
from aequigrasp.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rand_rot(rng):
    def make():
        return sample_rotation_uniform(rng)

    return make


@pytest.fixture(scope="session")
def trees():
    return {name: load_gripper(name) for name in shipped_grippers()}


@pytest.fixture(scope="session")
def small_cfg():
    """Desk-scale model config small enough for fast per-test forwards."""
    return ModelConfig(
        scene_spec=parse_irreps("8x0+4x1+2x2"),
        query_spec=parse_irreps("8x0+4x1+2x2"),
        level_sizes=(96, 24),
        knn_k=8,
        pool_k=6,
        query_k=6,
        mp_layers=1,
        n_blocks=1,
        decode_layers=1,
        rbf_count=6,
        time_count=8,
        mlp_hidden=16,
    )
