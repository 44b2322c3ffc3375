"""Dense integer tensors, the reference convolution and the vector-unit ops.

Weights are signed 8-bit, feature maps hold 32-bit values.  Everything is
integer so that sparse and dense execution paths can be compared with
exact equality.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

INT32_MIN = np.iinfo(np.int32).min
INT32_MAX = np.iinfo(np.int32).max

_BLOB_MAGIC = b"TNSR"
_DTYPE_CODES = {1: np.dtype("<i1"), 4: np.dtype("<i4")}


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent."""


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Weight tensor laid out as [c_out][c_in][h_k][w_k] (int8)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 4 or min(v.shape) < 1:
            raise ShapeError(f"Tensor4 needs 4 positive dims, got shape {v.shape}")
        if v.size and (v.min() < -128 or v.max() > 127):
            raise ValueError("Tensor4 values must fit in int8")
        object.__setattr__(self, "values", _frozen(v, np.int8))

    @classmethod
    def from_flat(cls, c_out, c_in, h_k, w_k, flat):
        flat = np.asarray(flat)
        if flat.size != c_out * c_in * h_k * w_k:
            raise ShapeError(
                f"expected {c_out * c_in * h_k * w_k} values for "
                f"{c_out}x{c_in}x{h_k}x{w_k}, got {flat.size}")
        return cls(flat.reshape(c_out, c_in, h_k, w_k))

    @classmethod
    def zeros(cls, c_out, c_in, h_k, w_k):
        return cls(np.zeros((c_out, c_in, h_k, w_k), dtype=np.int8))

    @property
    def c_out(self) -> int:
        return self.values.shape[0]

    @property
    def c_in(self) -> int:
        return self.values.shape[1]

    @property
    def h_k(self) -> int:
        return self.values.shape[2]

    @property
    def w_k(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"Tensor4({self.c_out}x{self.c_in}x{self.h_k}x{self.w_k})"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Activation map laid out as [c][h][w] (int32)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"FeatureMap needs 3 positive dims, got shape {v.shape}")
        if v.size and (v.min() < INT32_MIN or v.max() > INT32_MAX):
            raise OverflowError("FeatureMap values exceed the 32-bit accumulator range")
        object.__setattr__(self, "values", _frozen(v, np.int32))

    @classmethod
    def from_flat(cls, c, h, w, flat):
        flat = np.asarray(flat)
        if flat.size != c * h * w:
            raise ShapeError(f"expected {c * h * w} values for {c}x{h}x{w}, got {flat.size}")
        return cls(flat.reshape(c, h, w))

    @property
    def c(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def w(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"FeatureMap({self.c}x{self.h}x{self.w})"


@dataclass(frozen=True)
class ConvGeometry:
    """Stride and zero-padding of a convolution.

    ``pad=None`` means "same" padding, ``(k - 1) // 2`` on each axis.
    """

    stride: int = 1
    pad: int | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.pad is not None and self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")

    def pads(self, h_k: int, w_k: int) -> tuple[int, int]:
        if self.pad is None:
            return (h_k - 1) // 2, (w_k - 1) // 2
        return self.pad, self.pad

    def output_hw(self, h_in: int, w_in: int, h_k: int, w_k: int) -> tuple[int, int]:
        pad_h, pad_w = self.pads(h_k, w_k)
        dims = []
        for n_in, pad, k in ((h_in, pad_h, h_k), (w_in, pad_w, w_k)):
            span = n_in + 2 * pad - k
            if span < 0 or span % self.stride:
                raise ShapeError(
                    f"input {n_in} with kernel {k}, pad {pad}, stride {self.stride} "
                    "does not give an integral output size")
            dims.append(span // self.stride + 1)
        return dims[0], dims[1]


def _check_range(acc: np.ndarray) -> np.ndarray:
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise OverflowError("accumulator overflowed 32 bits")
    return acc


def padded_input(ifm: FeatureMap, pad_h: int, pad_w: int) -> np.ndarray:
    """Zero-padded int64 copy of the activations."""
    return np.pad(ifm.values.astype(np.int64), ((0, 0), (pad_h, pad_h), (pad_w, pad_w)))


def tap_slab(padded: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Activations seen by kernel tap (kh, kw) at every output pixel: [c, h_out, w_out]."""
    return padded[:, kh:kh + stride * (h_out - 1) + 1:stride, kw:kw + stride * (w_out - 1) + 1:stride]


def conv2d_dense(ifm: FeatureMap, weights: Tensor4, geom: ConvGeometry = ConvGeometry()) -> FeatureMap:
    """Reference convolution: exact integer sum over (c_in, h_k, w_k).

    Out-of-bounds taps read as zero.
    """
    if ifm.c != weights.c_in:
        raise ShapeError(
            f"input has {ifm.c} channels but weights {weights!r} expect c_in={weights.c_in}")
    h_out, w_out = geom.output_hw(ifm.h, ifm.w, weights.h_k, weights.w_k)
    padded = padded_input(ifm, *geom.pads(weights.h_k, weights.w_k))
    w64 = weights.values.astype(np.int64)
    acc = np.zeros((weights.c_out, h_out * w_out), dtype=np.int64)
    for kh in range(weights.h_k):
        for kw in range(weights.w_k):
            slab = tap_slab(padded, kh, kw, geom.stride, h_out, w_out)
            acc += w64[:, :, kh, kw] @ slab.reshape(ifm.c, -1)
    return FeatureMap(_check_range(acc).reshape(weights.c_out, h_out, w_out))


def relu(fm: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(fm.values, 0))


def maxpool2(fm: FeatureMap) -> FeatureMap:
    """2x2 max pooling with stride 2."""
    if fm.h % 2 or fm.w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {fm.h}x{fm.w}")
    v = fm.values.reshape(fm.c, fm.h // 2, 2, fm.w // 2, 2)
    return FeatureMap(v.max(axis=(2, 4)))


def requant_shift(fm: FeatureMap, bits: int = 8) -> int:
    peak = int(np.abs(fm.values.astype(np.int64)).max())
    return max(0, peak.bit_length() - (bits - 1))


def requantize(fm: FeatureMap, shift: int | None = None, bits: int = 8) -> FeatureMap:
    """Arithmetic right shift and saturate to ``bits``-bit signed activations.

    With ``shift=None`` the shift is the smallest one that brings the peak
    magnitude into range.  The peak is taken over the whole map, so the
    result does not depend on channel order.
    """
    if shift is None:
        shift = requant_shift(fm, bits)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return FeatureMap(np.clip(fm.values.astype(np.int64) >> shift, lo, hi))


def check_permutation(perm, n: int | None = None) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    if p.ndim != 1 or (n is not None and p.size != n):
        raise ValueError(f"permutation must be a flat list of length {n}, got shape {p.shape}")
    if not np.array_equal(np.sort(p), np.arange(p.size)):
        raise ValueError(f"not a bijection on [0, {p.size}): {p.tolist()}")
    return p


def inverse_permutation(perm) -> np.ndarray:
    p = check_permutation(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def permute_channels(fm: FeatureMap, perm) -> FeatureMap:
    """Move input channel ``i`` to output channel ``perm[i]``.

    ``permute_channels(fm, inverse_permutation(perm))`` undoes it.
    """
    p = check_permutation(perm, fm.c)
    out = np.empty_like(fm.values)
    out[p] = fm.values
    return FeatureMap(out)


# -- serialization -----------------------------------------------------------

def _array_to_blob(values: np.ndarray, code: int) -> bytes:
    header = _BLOB_MAGIC + struct.pack("<BB", code, values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    return header + np.ascontiguousarray(values, dtype=_DTYPE_CODES[code]).tobytes()


def _blob_to_array(blob: bytes) -> np.ndarray:
    if blob[:4] != _BLOB_MAGIC:
        raise ValueError("not a tensor blob (bad magic)")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    offset = 6 + 4 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims))
    if len(blob) != offset + count * dtype.itemsize:
        raise ValueError("tensor blob payload length does not match its header")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(dims)


def to_bytes(t: Tensor4 | FeatureMap) -> bytes:
    code = 1 if isinstance(t, Tensor4) else 4
    return _array_to_blob(t.values, code)


def from_bytes(blob: bytes) -> Tensor4 | FeatureMap:
    arr = _blob_to_array(blob)
    if arr.ndim == 4:
        return Tensor4(arr)
    if arr.ndim == 3:
        return FeatureMap(arr)
    raise ValueError(f"unsupported tensor rank {arr.ndim}")


def save(t: Tensor4 | FeatureMap, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(t))


def load(path) -> Tensor4 | FeatureMap:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def to_json(t: Tensor4 | FeatureMap) -> str:
    kind = "tensor4" if isinstance(t, Tensor4) else "featuremap"
    return json.dumps({"kind": kind, "shape": list(t.shape), "values": t.values.ravel().tolist()})


def from_json(text: str) -> Tensor4 | FeatureMap:
    doc = json.loads(text)
    cls = {"tensor4": Tensor4, "featuremap": FeatureMap}[doc["kind"]]
    return cls.from_flat(*doc["shape"], doc["values"])
