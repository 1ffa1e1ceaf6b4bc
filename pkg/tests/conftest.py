import numpy as np
import pytest

from gibbsdenoise.field import Field, RngStream


@pytest.fixture
def rng():
    return RngStream(20240817)


def naive_dft(data: np.ndarray) -> np.ndarray:
    """O(N^2) unitary DFT, the independent oracle for the FFT path."""
    data = np.asarray(data, dtype=np.complex128)
    out = data
    for axis in range(data.ndim):
        n = data.shape[axis]
        j, k = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        mat = np.exp(-2j * np.pi * j * k / n) / np.sqrt(n)
        out = np.tensordot(mat, np.moveaxis(out, axis, 0), axes=(1, 0))
        out = np.moveaxis(out, 0, axis)
    return out


def random_field(rng: RngStream, dims) -> Field:
    return Field(rng.standard_normal(tuple(dims)))
