"""Functional model of the sparse periodic systolic accelerator.

Two engines execute the same loop nest.  ``engine="loop"`` is a literal
scalar walk over (oh, ow, g, cc, kv, w, rr, i, j) with the PE grid's
partial-sum registers and the adder tree.  ``engine="vector"`` hoists the
independent (oh, ow) loops into numpy and runs one matrix product per
(g, kv, w) block; it tallies events block by block and must agree with
the loop engine on both outputs and counters.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse

from .compiler import PpwLayer, compile_chain, round_up, slot
from .pruning import PpsConfig
from .tensors import (ConvGeometry, FeatureMap, ShapeError, Tensor4, _check_range, conv2d_dense,
                      inverse_permutation, maxpool2, padded_input, permute_channels, relu,
                      requantize, tap_slab)

MODES = ("sps", "dense_baseline", "csr_model", "fkw_model")


@dataclass
class EventCounters:
    weight_fetches: int = 0
    mac_ops: int = 0
    index_reads: int = 0
    act_fetches: int = 0
    psum_accums: int = 0
    reorder_moves: int = 0
    output_writes: int = 0

    def __add__(self, other: "EventCounters") -> "EventCounters":
        return EventCounters(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                                for f in fields(self)})

    def as_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"negative counter {f.name}")
        if self.mac_ops != self.psum_accums:
            raise ValueError("every MAC must accumulate exactly one partial sum")


@dataclass
class SimResult:
    ofm: FeatureMap
    counters: EventCounters
    mode: str
    per_layer: list[EventCounters] = field(default_factory=list)

    def checksum(self) -> str:
        return ofm_checksum(self.ofm)

    def to_json(self) -> str:
        return json.dumps({
            "mode": self.mode,
            "dims": list(self.ofm.shape),
            "checksum": self.checksum(),
            "counters": self.counters.as_dict(),
            "per_layer": [c.as_dict() for c in self.per_layer],
        }, indent=2, sort_keys=True)


def ofm_checksum(fm: FeatureMap) -> str:
    return hashlib.sha256(fm.values.astype("<i4").tobytes()).hexdigest()


def _conv_dims(ifm: FeatureMap, c_in: int, h_k: int, w_k: int, geom: ConvGeometry):
    if ifm.c != c_in:
        raise ShapeError(f"input has {ifm.c} channels, layer expects c_in={c_in}")
    return geom.output_hw(ifm.h, ifm.w, h_k, w_k)


def _with_zero_channel(padded: np.ndarray) -> np.ndarray:
    # padded lanes point at channel -1, i.e. this trailing all-zero plane
    return np.concatenate([padded, np.zeros((1,) + padded.shape[1:], dtype=padded.dtype)])


def _emit(out_compiled: np.ndarray, layer: PpwLayer, emit_natural_order: bool,
          counters: EventCounters) -> FeatureMap:
    fm = FeatureMap(_check_range(out_compiled))
    if emit_natural_order:
        counters.reorder_moves += fm.size
        fm = permute_channels(fm, layer.out_perm)
    return fm


def simulate_sps(ifm: FeatureMap, layer: PpwLayer, geom: ConvGeometry = ConvGeometry(),
                 emit_natural_order: bool = True, engine: str = "vector") -> SimResult:
    """Run one compiled layer on the sparse periodic systolic dataflow.

    ``ifm`` must be in the channel order the layer was compiled for
    (natural unless it came out of next-layer reordering).  With
    ``emit_natural_order=False`` the output stays in compiler order,
    ``out_perm[p]`` being the natural channel at position ``p``.
    """
    h_out, w_out = _conv_dims(ifm, layer.c_in, layer.h_k, layer.w_k, geom)
    if engine == "loop":
        out, counters = _sps_loop(ifm, layer, geom, h_out, w_out)
    elif engine == "vector":
        out, counters = _sps_vector(ifm, layer, geom, h_out, w_out)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    fm = _emit(out, layer, emit_natural_order, counters)
    return SimResult(fm, counters, "sps", [counters])


def _compiled_position(layer: PpwLayer) -> np.ndarray:
    """[P, oc_pad] compiler-order output position per PE row lane, -1 on padding."""
    nat = layer.oc_table.natural_lanes()
    inv = inverse_permutation(layer.out_perm)
    return np.where(nat >= 0, inv[np.maximum(nat, 0)], -1)


def _sps_loop(ifm, layer, geom, h_out, w_out):
    P, KSS, sys_w, sys_h = layer.P, layer.KSS, layer.sys_w, layer.sys_h
    padded = padded_input(ifm, *geom.pads(layer.h_k, layer.w_k))
    ic_lanes = layer.ic_table.physical_lanes()
    oc_pos = _compiled_position(layer)
    weights = layer.weights.astype(np.int64)
    out = np.zeros((layer.c_out, h_out, w_out), dtype=np.int64)
    c = EventCounters()
    s = geom.stride
    for oh in range(h_out):
        for ow in range(w_out):
            for g in range(P):
                for cc in range(layer.onc_p):
                    ps = [[0] * sys_w for _ in range(sys_h)]
                    for kv in range(P):
                        for w in range(KSS):
                            t = slot(g, kv, w, KSS, layer.w_num)
                            kh, kw = int(layer.kh_buf[t]), int(layer.kw_buf[t])
                            c.index_reads += 1
                            for rr in range(layer.inc_p):
                                for i in range(sys_w):
                                    lane = rr * sys_w + i
                                    ch = ic_lanes[kv, lane]
                                    a = 0 if ch < 0 else int(padded[ch, oh * s + kh, ow * s + kw])
                                    c.act_fetches += 1
                                    for j in range(sys_h):
                                        ps[j][i] += int(weights[g, kv, cc * sys_h + j, lane, w]) * a
                                        c.weight_fetches += 1
                                        c.mac_ops += 1
                                        c.psum_accums += 1
                    for j in range(sys_h):
                        pos = oc_pos[g, cc * sys_h + j]
                        if pos >= 0:
                            out[pos, oh, ow] = sum(ps[j])
                            c.output_writes += 1
    return out, c


def _sps_vector(ifm, layer, geom, h_out, w_out):
    P, KSS = layer.P, layer.KSS
    n_pix = h_out * w_out
    padded = _with_zero_channel(padded_input(ifm, *geom.pads(layer.h_k, layer.w_k)))
    ic_lanes = layer.ic_table.physical_lanes()
    oc_pos = _compiled_position(layer)
    weights = layer.weights.astype(np.int64)
    acc = np.zeros((P, layer.oc_pad, n_pix), dtype=np.int64)
    c = EventCounters()
    lanes_per_read = layer.inc_p * layer.sys_w
    for kv in range(P):
        group = padded[ic_lanes[kv]]
        for g in range(P):
            for w in range(KSS):
                t = slot(g, kv, w, KSS, layer.w_num)
                a = tap_slab(group, int(layer.kh_buf[t]), int(layer.kw_buf[t]), geom.stride, h_out, w_out)
                acc[g] += weights[g, kv, :, :, w] @ a.reshape(layer.ic_pad, n_pix)
                reads = n_pix * layer.onc_p
                c.index_reads += reads
                c.act_fetches += reads * lanes_per_read
                c.mac_ops += reads * lanes_per_read * layer.sys_h
    c.weight_fetches = c.psum_accums = c.mac_ops
    out = np.zeros((layer.c_out, n_pix), dtype=np.int64)
    keep = oc_pos >= 0
    out[oc_pos[keep]] = acc[keep]
    c.output_writes = layer.c_out * n_pix
    return out.reshape(layer.c_out, h_out, w_out), c


def simulate_dense_baseline(ifm: FeatureMap, dense: Tensor4, geom: ConvGeometry = ConvGeometry(),
                            sys_w: int = 1, sys_h: int = 1, engine: str = "vector") -> SimResult:
    """Same PE grid running every tap of an unpruned tensor; no index logic."""
    h_out, w_out = _conv_dims(ifm, dense.c_in, dense.h_k, dense.w_k, geom)
    ci_pad, co_pad = round_up(dense.c_in, sys_w), round_up(dense.c_out, sys_h)
    inc, onc = ci_pad // sys_w, co_pad // sys_h
    n_pix = h_out * w_out
    w64 = np.zeros((co_pad, ci_pad, dense.h_k, dense.w_k), dtype=np.int64)
    w64[:dense.c_out, :dense.c_in] = dense.values
    padded = padded_input(ifm, *geom.pads(dense.h_k, dense.w_k))
    padded = np.concatenate([padded, np.zeros((ci_pad - dense.c_in,) + padded.shape[1:], dtype=np.int64)])
    c = EventCounters()
    if engine == "loop":
        out = np.zeros((dense.c_out, h_out, w_out), dtype=np.int64)
        s = geom.stride
        for oh in range(h_out):
            for ow in range(w_out):
                for cc in range(onc):
                    ps = [[0] * sys_w for _ in range(sys_h)]
                    for kh in range(dense.h_k):
                        for kw in range(dense.w_k):
                            for rr in range(inc):
                                for i in range(sys_w):
                                    ic = rr * sys_w + i
                                    a = int(padded[ic, oh * s + kh, ow * s + kw])
                                    c.act_fetches += 1
                                    for j in range(sys_h):
                                        ps[j][i] += int(w64[cc * sys_h + j, ic, kh, kw]) * a
                                        c.weight_fetches += 1
                                        c.mac_ops += 1
                                        c.psum_accums += 1
                    for j in range(sys_h):
                        oc = cc * sys_h + j
                        if oc < dense.c_out:
                            out[oc, oh, ow] = sum(ps[j])
                            c.output_writes += 1
    elif engine == "vector":
        acc = np.zeros((co_pad, n_pix), dtype=np.int64)
        for kh in range(dense.h_k):
            for kw in range(dense.w_k):
                a = tap_slab(padded, kh, kw, geom.stride, h_out, w_out).reshape(ci_pad, n_pix)
                acc += w64[:, :, kh, kw] @ a
                c.act_fetches += n_pix * onc * ci_pad
                c.mac_ops += n_pix * co_pad * ci_pad
        c.weight_fetches = c.psum_accums = c.mac_ops
        c.output_writes = dense.c_out * n_pix
        out = acc[:dense.c_out].reshape(dense.c_out, h_out, w_out)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return SimResult(FeatureMap(_check_range(out)), c, "dense_baseline", [c])


def _im2col(ifm: FeatureMap, t: Tensor4, geom: ConvGeometry, h_out: int, w_out: int) -> np.ndarray:
    padded = padded_input(ifm, *geom.pads(t.h_k, t.w_k))
    cols = np.empty((t.c_in, t.h_k, t.w_k, h_out * w_out), dtype=np.int64)
    for kh in range(t.h_k):
        for kw in range(t.w_k):
            cols[:, kh, kw] = tap_slab(padded, kh, kw, geom.stride, h_out, w_out).reshape(t.c_in, -1)
    return cols.reshape(t.c_in * t.h_k * t.w_k, -1)


def simulate_format_model(ifm: FeatureMap, masked: Tensor4, geom: ConvGeometry = ConvGeometry(),
                          model: str = "csr") -> SimResult:
    """Execute a sparse tensor the way a CSR or FKW accelerator would.

    Both skip zero weights.  ``csr`` decodes a column index for every
    weight it fetches.  ``fkw`` reads one pattern id per retained kernel
    and, since its outputs leave in pattern-grouped order, moves the whole
    output map back to natural order.
    """
    h_out, w_out = _conv_dims(ifm, masked.c_in, masked.h_k, masked.w_k, geom)
    n_pix = h_out * w_out
    cols = _im2col(ifm, masked, geom, h_out, w_out)
    flat = masked.values.reshape(masked.c_out, -1).astype(np.int64)
    nnz = int(np.count_nonzero(flat))
    c = EventCounters()
    c.mac_ops = c.psum_accums = c.weight_fetches = c.act_fetches = nnz * n_pix
    c.output_writes = masked.c_out * n_pix
    if model == "csr":
        mat = scipy.sparse.csr_matrix(flat)
        out = np.asarray(mat @ cols, dtype=np.int64)
        c.index_reads = nnz * n_pix
        mode = "csr_model"
    elif model == "fkw":
        kernels = masked.values.reshape(masked.c_out, masked.c_in, -1) != 0
        retained = kernels.any(axis=2)
        c.index_reads = int(retained.sum())
        out = np.zeros((masked.c_out, n_pix), dtype=np.int64)
        k = masked.h_k * masked.w_k
        support_ids = kernels.astype(np.int64) @ (1 << np.arange(k, dtype=np.int64))
        for pattern in np.unique(support_ids[retained]):
            taps = np.flatnonzero((int(pattern) >> np.arange(k)) & 1)
            sel = support_ids == pattern
            w = masked.values.reshape(masked.c_out, masked.c_in, k)[:, :, taps].astype(np.int64)
            w = w * sel[:, :, None]
            rows = (np.arange(masked.c_in)[:, None] * k + taps[None, :]).ravel()
            out += w.reshape(masked.c_out, -1) @ cols[rows]
        c.reorder_moves = masked.c_out * n_pix
        mode = "fkw_model"
    else:
        raise ValueError(f"unknown format model {model!r}")
    fm = FeatureMap(_check_range(out).reshape(masked.c_out, h_out, w_out))
    return SimResult(fm, c, mode, [c])


# -- networks -------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    """One conv layer of a chain plus the vector-unit ops that follow it.

    ``weights`` is the PPS-masked tensor; ``dense`` the unpruned one used by
    the dense baseline (defaults to ``weights``).
    """

    weights: Tensor4
    cfg: PpsConfig
    geom: ConvGeometry = ConvGeometry()
    relu: bool = True
    pool: bool = False
    requant: bool = True
    dense: Tensor4 | None = None


def _dense_of(stage: Stage) -> Tensor4:
    return stage.weights if stage.dense is None else stage.dense


def _post_ops(fm: FeatureMap, stage: Stage) -> FeatureMap:
    if stage.relu:
        fm = relu(fm)
    if stage.pool:
        fm = maxpool2(fm)
    if stage.requant:
        fm = requantize(fm)
    return fm


def _check_chain(layers: list[PpwLayer], nlr: bool) -> None:
    for prev, cur in zip(layers, layers[1:]):
        if prev.c_out != cur.c_in:
            raise ShapeError(f"chain mismatch: {prev.c_out} channels into c_in={cur.c_in}")
        expected = inverse_permutation(prev.out_perm) if nlr else np.arange(cur.c_in)
        if not np.array_equal(cur.ic_table.position, expected):
            raise ShapeError("layer input order does not match its producer's output order"
                             + (" (compile with next_layer_reorder)" if nlr else ""))


def run_network(stages: list[Stage], ifm: FeatureMap, nlr: bool = True, mode: str = "sps",
                sys_w: int = 1, sys_h: int = 1, layers: list[PpwLayer] | None = None) -> SimResult:
    """Chain conv stages through one execution mode; the output is in natural order.

    In ``sps`` mode with ``nlr`` every layer but the last hands its
    compiler-ordered output straight to a consumer compiled for that order,
    so only the final layer pays for reordering.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    for a, b in zip(stages, stages[1:]):
        if a.weights.c_out != b.weights.c_in:
            raise ShapeError(f"chain mismatch: {a.weights.c_out} channels into c_in={b.weights.c_in}")
    if mode == "sps":
        if layers is None:
            layers = compile_chain([s.weights for s in stages], [s.cfg for s in stages],
                                   sys_w, sys_h, nlr)
        if len(layers) != len(stages):
            raise ValueError("need one compiled layer per stage")
        _check_chain(layers, nlr)

    fm = ifm
    total = EventCounters()
    per_layer = []
    for n, stage in enumerate(stages):
        last = n == len(stages) - 1
        if mode == "sps":
            res = simulate_sps(fm, layers[n], stage.geom, emit_natural_order=last or not nlr)
        elif mode == "dense_baseline":
            res = simulate_dense_baseline(fm, _dense_of(stage), stage.geom, sys_w, sys_h)
        else:
            res = simulate_format_model(fm, stage.weights, stage.geom, mode.removesuffix("_model"))
        total += res.counters
        per_layer.append(res.counters)
        fm = _post_ops(res.ofm, stage)
    return SimResult(fm, total, mode, per_layer)


def dense_reference_chain(stages: list[Stage], ifm: FeatureMap, use_dense: bool = False) -> FeatureMap:
    """The oracle: reference convolution on the natural-order weights, same post ops."""
    fm = ifm
    for stage in stages:
        w = _dense_of(stage) if use_dense else stage.weights
        fm = _post_ops(conv2d_dense(fm, w, stage.geom), stage)
    return fm
