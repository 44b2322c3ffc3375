"""Analytic storage models for dense, COO, CSR, CSC, FKW and PPW weights.

Every weight costs 8 bits.  Index widths are the minimal ``ceil(log2 n)``
needed to address ``n`` items unless a :class:`BitWidthPolicy` says
otherwise.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

WEIGHT_BITS = 8
FORMATS = ("dense", "coo", "csr", "csc", "fkw", "ppw")


def bits_for(n: int) -> int:
    """ceil(log2(n)); zero for n <= 1."""
    return max(0, int(n) - 1).bit_length()


@dataclass(frozen=True)
class LayerShape:
    c_out: int
    c_in: int
    h_k: int
    w_k: int
    nnz: int
    name: str = ""

    def __post_init__(self):
        if not 0 <= self.nnz <= self.size:
            raise ValueError(f"nnz={self.nnz} outside [0, {self.size}]")

    @property
    def size(self) -> int:
        return self.c_out * self.c_in * self.h_k * self.w_k

    @property
    def kernels(self) -> int:
        return self.c_out * self.c_in

    @property
    def density(self) -> float:
        return self.nnz / self.size

    @classmethod
    def pps(cls, c_out, c_in, h_k, w_k, KSS, name=""):
        return cls(c_out, c_in, h_k, w_k, c_out * c_in * KSS, name)

    def at_density(self, d: float) -> "LayerShape":
        return LayerShape(self.c_out, self.c_in, self.h_k, self.w_k, round(d * self.size), self.name)


@dataclass(frozen=True)
class FormatStorage:
    fmt: str
    weight_bits: int
    index_bits: int

    @property
    def total_bits(self) -> int:
        return self.weight_bits + self.index_bits

    @property
    def percent_index(self) -> float:
        return 100.0 * self.index_bits / self.total_bits if self.total_bits else 0.0

    def __add__(self, other: "FormatStorage") -> "FormatStorage":
        if other.fmt != self.fmt:
            raise ValueError(f"cannot add {self.fmt} and {other.fmt} storage")
        return FormatStorage(self.fmt, self.weight_bits + other.weight_bits,
                             self.index_bits + other.index_bits)


@dataclass(frozen=True)
class BitWidthPolicy:
    """Index encodings of the competing formats.

    coo_layout
        ``"fields"`` stores (oc, ic, kh, kw) as four minimal fields;
        ``"matrix"`` stores (row, col) of the c_out x (c_in*h_k*w_k) view.
    coo_index_bits
        Flat per-nonzero width overriding ``coo_layout``.
    fkw_kernel_bits
        Bits per retained kernel; ``None`` means pattern id plus input
        channel index at minimal width.
    fkw_patterns, fkw_compression
        Pattern count and overall pruning rate of the FKW model.  The
        default connectivity keep ratio is whatever reaches that rate.
    """

    name: str
    coo_layout: str = "fields"
    coo_index_bits: int | None = None
    fkw_kernel_bits: int | None = None
    fkw_patterns: int = 8
    fkw_compression: float = 8.0

    def coo_width(self, s: LayerShape) -> int:
        if self.coo_index_bits is not None:
            return self.coo_index_bits
        if self.coo_layout == "matrix":
            return bits_for(s.c_out) + bits_for(s.c_in * s.h_k * s.w_k)
        return bits_for(s.c_out) + bits_for(s.c_in) + bits_for(s.h_k) + bits_for(s.w_k)

    def fkw_kernel_width(self, s: LayerShape) -> int:
        if self.fkw_kernel_bits is not None:
            return self.fkw_kernel_bits
        return bits_for(self.fkw_patterns) + bits_for(s.c_in)

    def fkw_keep_ratio(self, kss: int, h_k: int, w_k: int) -> float:
        return min(1.0, h_k * w_k / (kss * self.fkw_compression))


PRESETS = {
    "analytic": BitWidthPolicy("analytic"),
    # matrix-view COO reproduces the 58% -> 73% index share across VGG16
    # layers; 16-bit FKW kernel records reproduce FKW/PPW ~ 1.12x
    "paper-calibrated": BitWidthPolicy("paper-calibrated", coo_layout="matrix", fkw_kernel_bits=16),
}


def get_policy(name: str) -> BitWidthPolicy:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown bit-width preset {name!r}; known: {sorted(PRESETS)}") from None


def storage_dense(s: LayerShape) -> FormatStorage:
    return FormatStorage("dense", WEIGHT_BITS * s.size, 0)


def storage_coo(s: LayerShape, policy: BitWidthPolicy = PRESETS["analytic"]) -> FormatStorage:
    return FormatStorage("coo", WEIGHT_BITS * s.nnz, s.nnz * policy.coo_width(s))


def storage_csr(s: LayerShape, policy: BitWidthPolicy | None = None) -> FormatStorage:
    rows, cols = s.c_out, s.c_in * s.h_k * s.w_k
    index = s.nnz * bits_for(cols) + (rows + 1) * bits_for(s.nnz + 1)
    return FormatStorage("csr", WEIGHT_BITS * s.nnz, index)


def storage_csc(s: LayerShape, policy: BitWidthPolicy | None = None) -> FormatStorage:
    rows, cols = s.c_out, s.c_in * s.h_k * s.w_k
    index = s.nnz * bits_for(rows) + (cols + 1) * bits_for(s.nnz + 1)
    return FormatStorage("csc", WEIGHT_BITS * s.nnz, index)


def storage_fkw(s: LayerShape, policy: BitWidthPolicy = PRESETS["analytic"],
                keep_ratio: float | None = None, kss: int = 2) -> FormatStorage:
    """Pattern weights of the kernels surviving connectivity pruning, one
    pattern-id/kernel-position record per such kernel and one reorder entry
    per filter."""
    if keep_ratio is None:
        keep_ratio = policy.fkw_keep_ratio(kss, s.h_k, s.w_k)
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"connectivity keep ratio must be in (0, 1], got {keep_ratio}")
    retained = round(keep_ratio * s.kernels)
    index = retained * policy.fkw_kernel_width(s) + s.c_out * bits_for(s.c_out)
    return FormatStorage("fkw", WEIGHT_BITS * kss * retained, index)


def ppw_index_bits(P: int, KSS: int, h_k: int, w_k: int) -> int:
    """Two W_NUM-entry buffers plus the P and KSS scalars."""
    return 2 * P * KSS * bits_for(max(h_k, w_k)) + 16 + 16


def storage_ppw(s: LayerShape, P: int = 8, KSS: int = 2) -> FormatStorage:
    return FormatStorage("ppw", WEIGHT_BITS * s.kernels * KSS, ppw_index_bits(P, KSS, s.h_k, s.w_k))


def storage(fmt: str, s: LayerShape, policy: BitWidthPolicy, P: int = 8, KSS: int = 2) -> FormatStorage:
    if fmt == "dense":
        return storage_dense(s)
    if fmt == "coo":
        return storage_coo(s, policy)
    if fmt == "csr":
        return storage_csr(s, policy)
    if fmt == "csc":
        return storage_csc(s, policy)
    if fmt == "fkw":
        return storage_fkw(s, policy, kss=KSS)
    if fmt == "ppw":
        return storage_ppw(s, P, KSS)
    raise ValueError(f"unknown format {fmt!r}")


def network_storage(fmt: str, shapes: Sequence[LayerShape], policy: BitWidthPolicy,
                    P: int = 8, KSS: int = 2, shared_ppw_buffers: bool = False) -> FormatStorage:
    """Sum over layers.  With ``shared_ppw_buffers`` the PPW index buffers
    are counted once for the whole network instead of once per layer."""
    total = FormatStorage(fmt, 0, 0)
    for s in shapes:
        total = total + storage(fmt, s, policy, P, KSS)
    if fmt == "ppw" and shared_ppw_buffers and shapes:
        per_layer = [ppw_index_bits(P, KSS, s.h_k, s.w_k) for s in shapes]
        total = FormatStorage("ppw", total.weight_bits, max(per_layer))
    return total


# -- effective sparsity threshold ---------------------------------------------

def density_model(fmt: str, shapes: Sequence[LayerShape], policy: BitWidthPolicy,
                  P: int = 8, KSS: int = 2) -> tuple[Callable[[float], int], float]:
    """Network storage as a function of kept-weight fraction, plus the largest
    fraction the format can represent."""
    if fmt == "fkw":
        d_max = min(KSS / (s.h_k * s.w_k) for s in shapes)

        def fkw_bits(d):
            return sum(storage_fkw(s, policy, keep_ratio=max(d * s.h_k * s.w_k / KSS, 1e-12),
                                   kss=KSS).total_bits for s in shapes)
        return fkw_bits, d_max
    if fmt == "ppw":
        def ppw_bits(d):
            return sum(WEIGHT_BITS * round(d * s.size) + ppw_index_bits(P, KSS, s.h_k, s.w_k)
                       for s in shapes)
        return ppw_bits, 1.0

    def bits(d):
        return sum(storage(fmt, s.at_density(d), policy, P, KSS).total_bits for s in shapes)
    return bits, 1.0


def effective_sparsity_threshold(baseline_bits: int, candidate: Callable[[float], int],
                                 d_max: float = 1.0, tol: float = 1e-9) -> float | None:
    """Largest kept-weight fraction at which ``candidate`` needs no more bits
    than ``baseline_bits``.  ``None`` when the candidate never gets there.

    Linear candidates are solved in closed form, anything else by bisection
    (the candidate must be nondecreasing in density).
    """
    f0, f1 = candidate(0.0), candidate(d_max)
    if f0 > baseline_bits:
        return None
    if f1 <= baseline_bits:
        return d_max
    fmid = candidate(d_max / 2)
    if abs(fmid - (f0 + f1) / 2) <= 1e-9 * max(1, f1):
        return d_max * (baseline_bits - f0) / (f1 - f0)
    lo, hi = 0.0, d_max
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if candidate(mid) <= baseline_bits:
            lo = mid
        else:
            hi = mid
    return lo


def threshold(candidate_fmt: str, baseline: FormatStorage, shapes: Sequence[LayerShape],
              policy: BitWidthPolicy, P: int = 8, KSS: int = 2) -> float | None:
    fn, d_max = density_model(candidate_fmt, shapes, policy, P, KSS)
    return effective_sparsity_threshold(baseline.total_bits, fn, d_max)


# -- reports --------------------------------------------------------------------

REPORT_COLUMNS = ("layer", "format", "weight_bits", "index_bits", "total_bits", "percent_index")


def storage_rows(shapes: Sequence[LayerShape], policy: BitWidthPolicy, P: int = 8, KSS: int = 2,
                 formats: Sequence[str] = FORMATS) -> list[dict]:
    rows = []
    for s in shapes:
        for fmt in formats:
            fs = storage(fmt, s, policy, P, KSS)
            rows.append(_row(s.name, fs))
    for fmt in formats:
        rows.append(_row("total", network_storage(fmt, shapes, policy, P, KSS)))
    return rows


def _row(layer: str, fs: FormatStorage) -> dict:
    return {"layer": layer, "format": fs.fmt, "weight_bits": fs.weight_bits,
            "index_bits": fs.index_bits, "total_bits": fs.total_bits,
            "percent_index": round(fs.percent_index, 4)}


def rows_to_csv(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns or rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def policy_dict(policy: BitWidthPolicy) -> dict:
    return asdict(policy)
