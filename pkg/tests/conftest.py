import os
from pathlib import Path

import pytest
import torch
from hypothesis import settings

REPO = Path(__file__).resolve().parents[1]
os.environ.setdefault("DATASET_ROOT", str(REPO / "data"))

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")

ACCEPTANCE_LINES = []


def mnist_available() -> bool:
    root = Path(os.environ["DATASET_ROOT"]) / "mnist"
    return (root / "mnist.npz").exists() or any(root.glob("*-idx3-ubyte*"))


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST not found under DATASET_ROOT")


class TinyNet(torch.nn.Module):
    """2 -> 2 -> 3 tanh network, 15 parameters."""

    def __init__(self, dtype=torch.float64):
        super().__init__()
        self.fc1 = torch.nn.Linear(2, 2, dtype=dtype)
        self.fc2 = torch.nn.Linear(2, 3, dtype=dtype)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(x.flatten(1))))


@pytest.fixture
def tiny_net():
    torch.manual_seed(0)
    return TinyNet()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
