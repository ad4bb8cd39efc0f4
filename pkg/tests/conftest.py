import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shiftcal.backbone import BackboneConfig  # noqa: E402
from shiftcal.data import (SyntheticShiftSpec, generate_synthetic, split_by_subject,  # noqa: E402
                           stack)
from shiftcal.train import TrainConfig, train_ensemble, train_model  # noqa: E402

SMALL_BLOCKS = [1, 1, 1, 1]


class DeskTask:
    """Heteroscedastic synthetic task shared by the slow tests.

    Models are trained on first use and cached for the session.
    """

    id_spec = SyntheticShiftSpec(n_subjects=150, segments_per_subject=20, seed=1)
    shifted_spec = SyntheticShiftSpec(n_subjects=30, segments_per_subject=20, seed=2,
                                      target_mean_shift=0.5)
    train_config = TrainConfig(epochs=15, effective_batch=64, micro_batch=32, seed=0)

    recipes = {
        # name: (backbone kwargs, loss)
        "gnll_full": (dict(), "gnll"),
        "gnll": (dict(block_counts=SMALL_BLOCKS), "gnll"),
        "gnll_mcd": (dict(block_counts=SMALL_BLOCKS, dropout_rate=0.4), "gnll"),
        "mse_mcd": (dict(block_counts=SMALL_BLOCKS, dropout_rate=0.4, head="point"), "mse"),
    }

    def __init__(self):
        self.segments = generate_synthetic(self.id_spec)
        self.splits = split_by_subject(self.segments, (0.7, 0.1, 0.1, 0.1), seed=0)
        for name, _ in self.splits.items():
            setattr(self, name, self.splits.select(self.segments, name))
        self.shifted = generate_synthetic(self.shifted_spec)
        self._cache = {}

    def arrays(self, name):
        return stack(getattr(self, name))

    def config(self, name):
        kw, loss = self.recipes[name]
        return (BackboneConfig(**kw),
                TrainConfig.from_dict({**self.train_config.to_dict(), "loss": loss}))

    def model(self, name):
        if name not in self._cache:
            self._cache[name] = train_model(self.train, self.val, *self.config(name))
        return self._cache[name]

    def ensemble(self, k=5):
        key = f"ensemble{k}"
        if key not in self._cache:
            self._cache[key] = train_ensemble(self.train, self.val, *self.config("gnll"), k=k)
        return self._cache[key]


@pytest.fixture(scope="session")
def desk_task():
    return DeskTask()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
