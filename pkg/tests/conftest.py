import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mnist_subset import mnist_dir  # noqa: E402

from ternspike.data import load_mnist  # noqa: E402


@pytest.fixture(scope="session")
def cache_dir(request) -> Path:
    """Persistent directory under pytest's cache for datasets and checkpoints."""
    return Path(request.config.cache.mkdir("ternspike"))


@pytest.fixture(scope="session")
def mnist_path(cache_dir):
    return mnist_dir(cache_dir / "mnist")


@pytest.fixture(scope="session")
def mnist(mnist_path):
    """Standardized MNIST handle (see ``mnist_subset`` for the source)."""
    return load_mnist(mnist_path)
