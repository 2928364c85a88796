import numpy as np
import pytest

from mrfgrid.grid import GridSpec


@pytest.fixture
def unit10():
    return GridSpec.unit_square(10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dense_pinv(Q, rtol=1e-8):
    """Eigendecomposition pseudo-inverse used as an independent dense oracle."""
    Qd = Q.toarray() if hasattr(Q, "toarray") else np.asarray(Q)
    w, V = np.linalg.eigh(Qd)
    keep = w > rtol * w.max()
    return (V[:, keep] / w[keep]) @ V[:, keep].T
