import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gibbsdenoise.field import (BadMagicError, Field, RngStream, SpectralField,
                                TruncatedPayloadError, VersionMismatchError,
                                dft, idft, load_field, load_pgm, save_field,
                                save_pgm)

from conftest import naive_dft, random_field


class TestDft:
    def test_constant_field_is_dc_only(self):
        c, n = 2.7, 12
        s = dft(Field.full([n], c))
        assert s.coeffs[0] == pytest.approx(c * np.sqrt(n), abs=1e-12)
        assert np.abs(s.coeffs[1:]).max() < 1e-12

    def test_impulse_transforms_flat(self):
        n = 16
        data = np.zeros(n)
        data[0] = 1.0
        s = dft(Field(data))
        assert np.allclose(s.coeffs, 1.0 / np.sqrt(n), atol=1e-14)

    def test_matches_naive_dft_and_parseval(self, rng):
        f = random_field(rng, (8, 8))
        s = dft(f)
        oracle = naive_dft(f.data)
        assert np.abs(s.coeffs - oracle).max() < 1e-10
        power = (np.abs(s.coeffs) ** 2).sum()
        energy = (f.data**2).sum()
        assert abs(power - energy) / energy < 1e-10

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            Field([1.0, np.nan, 2.0])


class TestIdft:
    def test_round_trip_identity(self, rng):
        for dims in [(7,), (16,), (4, 4), (8, 12)]:
            f = random_field(rng, dims)
            back = idft(dft(f))
            assert np.abs(back.data - f.data).max() < 1e-12

    def test_zero_spectrum(self):
        assert np.all(idft(SpectralField(np.zeros((4, 4)))).data == 0.0)

    def test_known_cosine_spectrum(self):
        # cos(2 pi k0 x / n) has unitary coefficients sqrt(n)/2 at +-k0
        n, k0 = 16, 3
        coeffs = np.zeros(n, dtype=complex)
        coeffs[k0] = coeffs[n - k0] = np.sqrt(n) / 2.0
        expected = np.cos(2 * np.pi * k0 * np.arange(n) / n)
        assert np.abs(idft(SpectralField(coeffs)).data - expected).max() < 1e-12

    def test_broken_hermitian_symmetry_errors(self):
        coeffs = np.zeros(8, dtype=complex)
        coeffs[1] = 1.0  # missing conjugate partner at -1
        with pytest.raises(ValueError, match="Hermitian"):
            idft(SpectralField(coeffs))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dft_unitary_and_linear(seed):
    gen = np.random.default_rng(seed)
    f = Field(gen.standard_normal((6, 6)))
    g = Field(gen.standard_normal((6, 6)))
    a, b = gen.standard_normal(2)
    norm_ratio = np.linalg.norm(dft(f).coeffs) / np.linalg.norm(f.data)
    assert abs(norm_ratio - 1.0) < 1e-10
    lhs = dft(Field(a * f.data + b * g.data)).coeffs
    rhs = a * dft(f).coeffs + b * dft(g).coeffs
    assert np.abs(lhs - rhs).max() < 1e-10 * max(1.0, np.abs(rhs).max())


class TestGdtf:
    def test_round_trip_2d(self, tmp_path, rng):
        f = random_field(rng, (4, 4))
        path = tmp_path / "f.gdtf"
        save_field(f, path)
        back = load_field(path)
        assert back.dims == f.dims
        assert np.array_equal(back.data, f.data)

    def test_round_trip_1d_odd_length(self, tmp_path, rng):
        f = random_field(rng, (7,))
        save_field(f, tmp_path / "f.gdtf")
        assert np.array_equal(load_field(tmp_path / "f.gdtf").data, f.data)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.gdtf").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(BadMagicError):
            load_field(tmp_path / "x.gdtf")

    def test_version_mismatch(self, tmp_path, rng):
        path = tmp_path / "f.gdtf"
        save_field(random_field(rng, (3,)), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_field(path)

    def test_truncated_payload(self, tmp_path, rng):
        path = tmp_path / "f.gdtf"
        save_field(random_field(rng, (4, 4)), path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedPayloadError):
            load_field(path)


def test_pgm_round_trip(tmp_path):
    vals = np.linspace(0.0, 1.0, 16 * 12).reshape(16, 12)
    save_pgm(Field(vals), tmp_path / "f.pgm")
    back = load_pgm(tmp_path / "f.pgm")
    assert back.dims == (16, 12)
    assert np.abs(back.data - vals).max() <= 0.5 / 255 + 1e-12


class TestRngStream:
    def test_reproducible(self):
        a = RngStream(99, 7).standard_normal(32)
        b = RngStream(99, 7).standard_normal(32)
        assert np.array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(99, 7).standard_normal(32)
        b = RngStream(99, 8).standard_normal(32)
        assert not np.allclose(a, b)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.5

    def test_children_deterministic_and_distinct(self):
        root = RngStream(5)
        assert root.child(3).stream_id == RngStream(5).child(3).stream_id
        assert root.child(3).stream_id != root.child(4).stream_id
        a = root.child(3).normal_field((4, 4))
        b = RngStream(5).child(3).normal_field((4, 4))
        assert np.array_equal(a.data, b.data)
