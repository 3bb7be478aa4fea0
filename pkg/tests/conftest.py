import pytest

from wkd.harness.config import TrainConfig, from_dict

# a configuration small enough for end-to-end runs in well under a second
TINY = {
    "dataset": {"n_classes": 4, "n_super": 2, "height": 8, "width": 8,
                "train_per_class": 20, "test_per_class": 10},
    "teacher": {"stages": [[6, 1], [6, 2]]},
    "student": {"stages": [[4, 2]]},
    "teacher_optim": {"epochs": 3, "batch_size": 16, "lr": 0.05},
    "student_optim": {"epochs": 3, "batch_size": 16, "lr": 0.02, "warmup_epochs": 1.0},
    "loss": {"ir_per_class": 5, "lam": 3.0},
}


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return from_dict(TINY)


@pytest.fixture(scope="session")
def study():
    """The default-configuration teacher and dataset, trained once per test session."""
    import time

    from wkd.harness.protocol import Study

    t0 = time.perf_counter()
    s = Study(TrainConfig())
    s.build_seconds = time.perf_counter() - t0
    return s
