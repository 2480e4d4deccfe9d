import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """40 synthetic 32x32 samples (32 train / 8 val)."""
    from saunet.data import synth_generate

    root = tmp_path_factory.mktemp("tiny_ds")
    synth_generate(root, 40, size=32, seed=5)
    return root


@pytest.fixture(scope="session")
def overfit(tiny_dataset, tmp_path_factory):
    """Tiny model trained to memorize 8 samples; returns (trainer, dataset, epoch totals, checkpoint)."""
    from saunet.data import SegDataset
    from saunet.model import build, preset
    from saunet.trainer import TrainConfig, Trainer

    ds = SegDataset(tiny_dataset, None, ids=[f"s{i:05d}" for i in range(8)])
    cfg = TrainConfig(epochs=200, batch_size=8, lr0=3e-3, gamma=1.0, weight_decay=0.0, augment=False, seed=0)
    tr = Trainer(build(preset("tiny"), seed=0), ds, cfg)
    totals = [tr.train_epoch().total for _ in range(cfg.epochs)]
    ckpt = tmp_path_factory.mktemp("overfit") / "overfit.ckpt"
    tr.save(ckpt)
    return tr, ds, totals, ckpt


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
