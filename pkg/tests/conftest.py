import os
from pathlib import Path

import numpy as np
import pytest
import torch

from herdkit.data import RECORD_BYTES, TEST_FILES, TRAIN_FILES

torch.set_num_threads(1)

CIFAR_DIR_ENV = "HERDKIT_CIFAR10_DIR"


def synthetic_records(n, rng, balanced=True):
    """CIFAR-format records whose pixels carry a weak class-dependent colour cast."""
    labels = (np.arange(n) % 10) if balanced else rng.integers(0, 10, n)
    labels = rng.permutation(labels).astype(np.uint8)
    base = rng.integers(0, 200, size=(n, 3, 32, 32))
    tint = np.stack([(labels * 7) % 40, (labels * 13) % 40, (labels * 29) % 40], axis=1)
    pixels = np.clip(base + tint[:, :, None, None], 0, 255).astype(np.uint8)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = pixels.reshape(n, -1)
    return records


def write_cifar_dir(root, per_file, seed=0):
    """Write data_batch_1..5.bin and test_batch.bin with ``per_file`` records each."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for name in TRAIN_FILES + TEST_FILES:
        (root / name).write_bytes(synthetic_records(per_file, rng).tobytes())
    return root


@pytest.fixture(scope="session")
def tiny_cifar(tmp_path_factory):
    """Synthetic dataset: 5 x 40 train records, 40 test records."""
    return write_cifar_dir(tmp_path_factory.mktemp("tiny_cifar"), 40)


@pytest.fixture(scope="session")
def real_cifar_dir():
    path = os.environ.get(CIFAR_DIR_ENV)
    if not path or not all((Path(path) / f).is_file() for f in TRAIN_FILES + TEST_FILES):
        pytest.skip(f"real CIFAR-10 binaries not available (set {CIFAR_DIR_ENV})")
    return Path(path)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(LINES):
            terminalreporter.write_line(LINES[key])
