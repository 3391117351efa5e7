import os

# single-threaded BLAS: the matrices are tiny, and timing-sensitive tests
# assume one core
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from abdnmt import tensor as tz  # noqa: E402


@pytest.fixture(autouse=True)
def reset_precision():
    """Tests that flip the global precision must not leak it."""
    yield
    tz.set_precision("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
