import numpy as np
import pytest


def low_rank(n, p, r, seed=0, scale=1.0):
    """Exact rank-r matrix with well separated singular values."""
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, r)))
    V, _ = np.linalg.qr(rng.standard_normal((p, r)))
    d = scale * np.linspace(3.0, 1.0, r) if r else np.zeros(0)
    return (U * d) @ V.T


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
