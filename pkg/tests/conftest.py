import numpy as np
import pytest
import torch

from stylebias.datagen import synthesize_group
from stylebias.stylizer import StylizerWeights

torch.set_num_threads(1)

SMALL_WIDTHS = (4, 8, 8, 8)


@pytest.fixture(scope="session")
def tiny_group():
    """3 domains x 3 classes x 4 images at 32 px."""
    return synthesize_group(0, n_domains=3, n_classes=3, per_class=4, side=32)


@pytest.fixture(scope="session")
def small_weights():
    return StylizerWeights(widths=SMALL_WIDTHS, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_small_weights(tiny_group):
    from stylebias.stylizer import train_stylizer

    return train_stylizer(tiny_group.domains, tiny_group.domains, epochs=10, seed=0, widths=(8, 16, 16, 16), batch_size=4)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def criterion():
    def record(number, title, passed, detail=""):
        ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        print(ACCEPTANCE_LINES[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
