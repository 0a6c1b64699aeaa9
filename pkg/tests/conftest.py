import numpy as np
import pytest

from ewc.tasks import Dataset, mnist_paths


def random_dataset(n=60, n_pixels=16, n_classes=3, seed=0, name="toy"):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n, n_pixels)), rng.integers(0, n_classes, n), name)


def mnist_available() -> bool:
    try:
        mnist_paths(None, "train")
        mnist_paths(None, "test")
    except FileNotFoundError:
        return False
    return True



needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST files not found")


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
