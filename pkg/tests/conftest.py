import numpy as np
import pytest

from advmi import tasks, trainer

COPY_SPEC = tasks.TaskSpec("copy", vocab_size=5, min_len=1, max_len=4, seed=0)
COPY_CONFIG = trainer.TrainConfig(mode="mle", hidden=32, embed=16, max_len=4, pretrain_steps=2000,
                                  decay_start=1000, decay_every=100, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def copy_data():
    return tasks.generate(COPY_SPEC, 20000)


@pytest.fixture(scope="session")
def copy_model(copy_data):
    """Forward network pretrained for 2000 steps on the copy task, with its loss trace."""
    losses = []
    params = trainer.pretrain("forward", copy_data, COPY_CONFIG,
                              rng=np.random.default_rng(COPY_CONFIG.seed), losses=losses)
    return params, losses


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
