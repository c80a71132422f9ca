import numpy as np
import pytest

from genplan.flow import TrainConfig, train


def make_three_mode_dataset(seed: int = 7, n: int = 900):
    """Left-swerve / straight / right-swerve mixture over primitive parameters."""
    rng = np.random.default_rng(seed)
    centers = np.array(
        [
            [4.5, 0.0, 0.0, 0.0],
            [3.5, 0.30, -0.25, 0.10],
            [3.5, -0.30, 0.25, -0.10],
        ]
    )
    stds = np.array(
        [
            [0.40, 0.04, 0.04, 0.04],
            [0.30, 0.05, 0.05, 0.05],
            [0.30, 0.05, 0.05, 0.05],
        ]
    )
    comps = rng.integers(0, 3, n)
    data = centers[comps] + rng.normal(0.0, 1.0, (n, 4)) * stds[comps]
    return data, centers


@pytest.fixture(scope="session")
def three_mode_data():
    return make_three_mode_dataset()


@pytest.fixture(scope="session")
def three_mode_result(three_mode_data):
    data, _ = three_mode_data
    return train(data, TrainConfig(seed=3))


@pytest.fixture(scope="session")
def expert_dataset():
    from genplan.experiments import synth_expert

    return synth_expert(np.random.default_rng(2025))


@pytest.fixture(scope="session")
def expert_result(expert_dataset):
    return train(expert_dataset, TrainConfig(seed=3))


@pytest.fixture(scope="session")
def expert_flow(expert_result):
    return expert_result.model


@pytest.fixture(scope="session")
def identity_flow():
    """Untrained flow: forward is just the whitening restore (affine, fast)."""
    from genplan.flow import FlowModel, Whitening

    return FlowModel.create(
        Whitening(np.array([4.0, 0.0, 0.0, 0.0]), np.array([1.0, 0.2, 0.2, 0.2]))
    )


@pytest.fixture(scope="session")
def small_cache(identity_flow):
    """K=6 mask cache over the identity flow; shared by cache and planner tests."""
    from genplan.maskcache import AtomicGrid, InputGrid, build_cache

    return build_cache(identity_flow, InputGrid(6), AtomicGrid(), ds=0.01)


@pytest.fixture(scope="session")
def expert_cache(expert_flow):
    """K=6 mask cache over the trained expert flow."""
    from genplan.maskcache import AtomicGrid, InputGrid, build_cache

    return build_cache(expert_flow, InputGrid(6), AtomicGrid(), ds=0.01)
