import numpy as np
import pytest

from nnssgd import CompactSVD, SparseObservations, make_rng, reduced_qr


def full_observations(Z):
    """Every cell of a dense matrix as a SparseObservations grid."""
    m, n = Z.shape
    rows, cols = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    return SparseObservations(m, n, rows.ravel(), cols.ravel(), np.asarray(Z).ravel())


def random_compact(m, n, p, rng, sigma_floor=0.1):
    """A valid random CompactSVD of the requested rank."""
    if p == 0:
        return CompactSVD.zero(m, n)
    U = reduced_qr(rng.standard_normal((m, p)))[0]
    V = reduced_qr(rng.standard_normal((n, p)))[0]
    sigma = np.sort(np.abs(rng.standard_normal(p)) + sigma_floor)[::-1]
    return CompactSVD(U, sigma, V)


def random_sparse_obs(m, n, nnz, rng, scale=1.0):
    cells = rng.choice(m * n, size=nnz, replace=False)
    return SparseObservations(m, n, cells // n, cells % n,
                              scale * rng.standard_normal(nnz))


@pytest.fixture
def rng():
    return make_rng(12345)
