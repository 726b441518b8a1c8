import numpy as np
import pytest

from vitguide.models import CnnConfig, VitConfig
from vitguide.trainer import DatasetSpec, TrainConfig, load_dataset, pretrain_teacher


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        student=VitConfig(image_size=16, patch_size=4, depth=4, heads=2, embed_dim=16, mlp_ratio=2.0, num_classes=4),
        teacher=CnnConfig(stages=3, blocks_per_stage=1, base_channels=8, input_size=8, num_classes=4),
        dataset=DatasetSpec(n_train=128, n_test=64, size=16, motif_size=8),
        epochs=2,
        warmup_epochs=1,
        batch_size=32,
        teacher_epochs=2,
        eval_batch_size=64,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return load_dataset(tiny_config().dataset)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_data, tmp_path_factory):
    train, test = tiny_data
    path = tmp_path_factory.mktemp("teacher") / "teacher.npz"
    return pretrain_teacher(tiny_config(), train, test, path)


# Acceptance verdicts, printed as one line per criterion at the end of the run.
ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok, detail: str = ""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        ACCEPTANCE[number] = f"{status}  criterion {number:>2}  {title}" + (f"  [{detail}]" if detail else "")
        print(ACCEPTANCE[number])
        if ok is None:
            pytest.skip(detail)
        assert ok, ACCEPTANCE[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
