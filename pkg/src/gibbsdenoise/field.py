"""Periodic real fields, their orthonormal DFT, seeded RNG streams, and file I/O.

Everything downstream (noise models, diffusion sampling, HMC targets) moves
data around as `Field` values: immutable real arrays on a 1D or 2D periodic
grid. The DFT convention is unitary in both directions, so Parseval holds
with no extra normalization constants anywhere in the likelihood code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

__all__ = [
    "Field",
    "SpectralField",
    "RngStream",
    "dft",
    "idft",
    "save_field",
    "load_field",
    "save_pgm",
    "load_pgm",
    "FieldFormatError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
]

GDTF_MAGIC = b"GDTF"
GDTF_VERSION = 1

# Residual imaginary part tolerated when inverting a nominally Hermitian
# spectrum; anything larger means the symmetry is actually broken.
_HERMITIAN_TOL = 1e-10


class FieldFormatError(ValueError):
    """Base class for GDTF parsing failures."""


class BadMagicError(FieldFormatError):
    pass


class VersionMismatchError(FieldFormatError):
    pass


class TruncatedPayloadError(FieldFormatError):
    pass


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 2:
        raise ValueError(f"only 1D and 2D grids are supported, got {len(dims)} dims")
    if any(d < 1 for d in dims):
        raise ValueError(f"grid dims must be positive, got {dims}")
    return dims


@dataclass(frozen=True)
class Field:
    """Real signal on a periodic grid.

    `data` is stored as a read-only float64 array of shape `dims`
    (row-major). Instances are safe to share across threads.
    """

    dims: tuple[int, ...]
    data: np.ndarray

    def __init__(self, data, dims=None):
        arr = np.asarray(data, dtype=np.float64)
        if dims is not None:
            arr = arr.reshape(_check_dims(dims))
        shape = _check_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValueError("field contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "dims", shape)
        object.__setattr__(self, "data", arr)

    @property
    def size(self) -> int:
        return self.data.size

    def __add__(self, other: "Field") -> "Field":
        self._check_same_dims(other)
        return Field(self.data + other.data)

    def __sub__(self, other: "Field") -> "Field":
        self._check_same_dims(other)
        return Field(self.data - other.data)

    def __mul__(self, scalar: float) -> "Field":
        return Field(self.data * float(scalar))

    __rmul__ = __mul__

    def _check_same_dims(self, other: "Field") -> None:
        if self.dims != other.dims:
            raise ValueError(f"dims mismatch: {self.dims} vs {other.dims}")

    @staticmethod
    def zeros(dims) -> "Field":
        return Field(np.zeros(_check_dims(dims)))

    @staticmethod
    def full(dims, value: float) -> "Field":
        return Field(np.full(_check_dims(dims), float(value)))


@dataclass(frozen=True)
class SpectralField:
    """Complex DFT coefficients of a field under the unitary convention."""

    dims: tuple[int, ...]
    coeffs: np.ndarray

    def __init__(self, coeffs, dims=None):
        arr = np.asarray(coeffs, dtype=np.complex128)
        if dims is not None:
            arr = arr.reshape(_check_dims(dims))
        shape = _check_dims(arr.shape)
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "dims", shape)
        object.__setattr__(self, "coeffs", arr)


def dft(f: Field) -> SpectralField:
    """Unitary forward DFT of a real field.

    Round trips with `idft` to machine precision and preserves the two-norm
    (Parseval) because both directions carry the 1/sqrt(N) scaling.
    """
    return SpectralField(np.fft.fftn(f.data, norm="ortho"))


def idft(s: SpectralField) -> Field:
    """Unitary inverse DFT back to a real field.

    The coefficients must be Hermitian-symmetric (the transform of a real
    field); a residual imaginary part above 1e-10 max-abs raises.
    """
    z = np.fft.ifftn(s.coeffs, norm="ortho")
    resid = np.abs(z.imag).max(initial=0.0)
    if resid > _HERMITIAN_TOL:
        raise ValueError(
            f"broken Hermitian symmetry: imaginary residue {resid:.3e} exceeds {_HERMITIAN_TOL}"
        )
    return Field(z.real)


# Internal array-level transforms for hot loops; public ops validate, these don't.
def _fft(a: np.ndarray) -> np.ndarray:
    return np.fft.fftn(a, norm="ortho")


def _ifft_real(a: np.ndarray) -> np.ndarray:
    return np.fft.ifftn(a, norm="ortho").real


_MIX_GAMMA = 0x9E3779B97F4A7C15


def _mix64(a: int, b: int) -> int:
    """splitmix64-style mixing of two 64-bit words into one stream id."""
    z = (a + _MIX_GAMMA * (b + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclass
class RngStream:
    """Counter-based random stream keyed by (master_seed, stream_id).

    Equal keys give bit-identical draw sequences; distinct stream ids give
    statistically independent streams (Philox keyed counters). `child(k)`
    forks a deterministic substream, so chains and subsystems can derive
    their own streams from one master seed.
    """

    master_seed: int
    stream_id: int = 0
    _gen: np.random.Generator = dc_field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2**64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer")
        key = np.array([self.master_seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, k: int) -> "RngStream":
        return RngStream(self.master_seed, _mix64(self.stream_id, int(k)))

    def standard_normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def normal_field(self, dims) -> Field:
        return Field(self._gen.standard_normal(_check_dims(dims)))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)


def save_field(f: Field, path) -> None:
    """Write a field in the GDTF format (bit-exact round trip)."""
    dims = f.dims
    with open(path, "wb") as fh:
        fh.write(GDTF_MAGIC)
        fh.write(struct.pack("<I", GDTF_VERSION))
        fh.write(struct.pack("<B", len(dims)))
        for d in dims:
            fh.write(struct.pack("<Q", d))
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def load_field(path) -> Field:
    """Read a GDTF file written by `save_field`.

    Raises BadMagicError / VersionMismatchError / TruncatedPayloadError so
    callers can distinguish the failure modes.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GDTF_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {GDTF_MAGIC!r}")
    if len(blob) < 9:
        raise TruncatedPayloadError("header truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != GDTF_VERSION:
        raise VersionMismatchError(f"unsupported GDTF version {version}")
    ndim = blob[8]
    if not 1 <= ndim <= 2:
        raise FieldFormatError(f"unsupported ndim {ndim}")
    off = 9
    if len(blob) < off + 8 * ndim:
        raise TruncatedPayloadError("dims truncated")
    dims = struct.unpack_from("<" + "Q" * ndim, blob, off)
    off += 8 * ndim
    n = int(np.prod(dims))
    expected = off + 8 * n
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"payload truncated: have {len(blob) - off} bytes, need {8 * n}"
        )
    if len(blob) > expected:
        raise FieldFormatError(f"{len(blob) - expected} trailing bytes after payload")
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=off)
    return Field(data.reshape(dims))


def save_pgm(f: Field, path) -> None:
    """Export a 2D field as 8-bit binary PGM, mapping [0, 1] to [0, 255]."""
    if len(f.dims) != 2:
        raise ValueError("PGM export requires a 2D field")
    quantized = np.clip(np.rint(f.data * 255.0), 0, 255).astype(np.uint8)
    h, w = f.dims
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def load_pgm(path) -> Field:
    """Import a binary (P5) 8-bit PGM as a field with values in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise FieldFormatError("not a binary PGM (P5) file")
    # Header tokens: magic, width, height, maxval; '#' comments allowed.
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FieldFormatError("malformed PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if not 0 < maxval < 256:
        raise FieldFormatError(f"unsupported PGM maxval {maxval}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    if raw.size < w * h:
        raise TruncatedPayloadError("PGM pixel data truncated")
    return Field(raw.reshape(h, w).astype(np.float64) / maxval)
