"""Compile PPS-masked weights into the compact period-pattern-weight layout.

A compiled layer stores its nonzero weights in the order
``[g][kv][oc'][ic'][w]``:

* ``g``   output-channel group (filters whose index is ``g mod P``),
* ``kv``  input-channel group (channels whose index is ``kv mod P``),
* ``oc'`` / ``ic'`` position inside the group, padded with zeros up to a
  multiple of the systolic array height / width,
* ``w``   tap number inside the kernel variant ``(g + kv) mod P``.

Two W_NUM-entry buffers give the kernel row and column of every tap of
every variant, so the location of any weight is recovered from
``(g, kv, w)`` alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pruning import KernelVariant, PpsConfig, kernel_masks
from .tensors import ShapeError, Tensor4, check_permutation, inverse_permutation


class ComplianceError(ValueError):
    """A weight sits outside the kernel variant assigned to its kernel."""

    def __init__(self, oc, ic, kh, kw, value):
        self.location = (oc, ic, kh, kw)
        super().__init__(
            f"nonzero weight {value} at (oc={oc}, ic={ic}, kh={kh}, kw={kw}) "
            "is outside its assigned pattern")


class LayerFormatError(ValueError):
    """A compiled layer's buffers or tables are inconsistent."""


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def round_up(a: int, m: int) -> int:
    return ceil_div(a, m) * m


@dataclass(frozen=True, eq=False)
class GroupTable:
    """Channels split into P groups ``[g, g+P, g+2P, ...]``.

    ``position[c]`` is where natural channel ``c`` physically sits in the
    activation map the layer reads (identity unless next-layer reordering
    composed it with the producer's output order).
    """

    n: int
    P: int
    multiple: int = 1
    position: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1 or self.P < 1 or self.multiple < 1:
            raise ValueError(f"bad group table parameters n={self.n} P={self.P} multiple={self.multiple}")
        pos = np.arange(self.n) if self.position is None else check_permutation(self.position, self.n)
        pos = np.array(pos, dtype=np.int64)
        pos.flags.writeable = False
        object.__setattr__(self, "position", pos)

    @property
    def group_size(self) -> int:
        return ceil_div(self.n, self.P)

    @property
    def padded_size(self) -> int:
        return round_up(self.group_size, self.multiple)

    @property
    def natural_groups(self) -> list[np.ndarray]:
        return [np.arange(g, self.n, self.P) for g in range(self.P)]

    @property
    def groups(self) -> list[list[int]]:
        return [self.position[g::self.P].tolist() for g in range(self.P)]

    def natural_lanes(self) -> np.ndarray:
        """[P, padded_size] natural channel per lane, -1 on padding."""
        lanes = np.full((self.P, self.padded_size), -1, dtype=np.int64)
        for g, chans in enumerate(self.natural_groups):
            lanes[g, :chans.size] = chans
        return lanes

    def physical_lanes(self) -> np.ndarray:
        nat = self.natural_lanes()
        return np.where(nat >= 0, self.position[np.maximum(nat, 0)], -1)

    def concat_order(self) -> np.ndarray:
        """Natural channels in group-major (compiler) order."""
        return np.concatenate(self.natural_groups)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.position, np.arange(self.n)))


def group_channels(n: int, P: int, multiple: int = 1, position=None) -> GroupTable:
    return GroupTable(n, P, multiple, position)


def slot(g: int, kv: int, w: int, KSS: int, W_NUM: int) -> int:
    """Index-buffer slot holding tap ``w`` of variant ``(g + kv) mod P``."""
    return ((g + kv) * KSS + w) % W_NUM


@dataclass(frozen=True, eq=False)
class PpwLayer:
    P: int
    KSS: int
    h_k: int
    w_k: int
    c_in: int
    c_out: int
    sys_w: int
    sys_h: int
    ic_table: GroupTable
    oc_table: GroupTable
    weights: np.ndarray
    kh_buf: np.ndarray
    kw_buf: np.ndarray
    out_perm: np.ndarray

    def __post_init__(self):
        for name in ("weights", "kh_buf", "kw_buf", "out_perm"):
            arr = np.array(getattr(self, name), dtype=np.int8 if name == "weights" else np.int64)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        self.validate()

    @property
    def w_num(self) -> int:
        return self.P * self.KSS

    @property
    def ic_p(self) -> int:
        return self.ic_table.group_size

    @property
    def oc_p(self) -> int:
        return self.oc_table.group_size

    @property
    def ic_pad(self) -> int:
        return self.ic_table.padded_size

    @property
    def oc_pad(self) -> int:
        return self.oc_table.padded_size

    @property
    def inc_p(self) -> int:
        return self.ic_pad // self.sys_w

    @property
    def onc_p(self) -> int:
        return self.oc_pad // self.sys_h

    @property
    def patterns(self) -> list[KernelVariant]:
        return [KernelVariant(tuple(zip(self.kh_buf[v * self.KSS:(v + 1) * self.KSS].tolist(),
                                        self.kw_buf[v * self.KSS:(v + 1) * self.KSS].tolist())))
                for v in range(self.P)]

    def validate(self) -> None:
        if self.ic_table.n != self.c_in or self.oc_table.n != self.c_out:
            raise LayerFormatError("group tables do not cover c_in / c_out")
        if self.ic_table.P != self.P or self.oc_table.P != self.P:
            raise LayerFormatError("group tables use a different periodicity")
        if self.ic_table.multiple != self.sys_w or self.oc_table.multiple != self.sys_h:
            raise LayerFormatError("group padding does not match the systolic dimensions")
        if self.kh_buf.shape != (self.w_num,) or self.kw_buf.shape != (self.w_num,):
            raise LayerFormatError(f"index buffers must hold W_NUM={self.w_num} entries")
        if (self.kh_buf.min() < 0 or self.kh_buf.max() >= self.h_k
                or self.kw_buf.min() < 0 or self.kw_buf.max() >= self.w_k):
            raise LayerFormatError("index buffer entry outside the kernel")
        for v in range(self.P):
            taps = list(zip(self.kh_buf[v * self.KSS:(v + 1) * self.KSS].tolist(),
                            self.kw_buf[v * self.KSS:(v + 1) * self.KSS].tolist()))
            if len(set(taps)) != self.KSS:
                raise LayerFormatError(f"variant {v} repeats a tap in the index buffers")
        expect = (self.P, self.P, self.oc_pad, self.ic_pad, self.KSS)
        if self.weights.shape != expect:
            raise LayerFormatError(f"weight payload shape {self.weights.shape}, expected {expect}")
        if not np.array_equal(self.out_perm, self.oc_table.concat_order()):
            raise LayerFormatError("out_perm disagrees with the output group table")
        oc_nat = self.oc_table.natural_lanes()
        ic_nat = self.ic_table.natural_lanes()
        pad = (oc_nat[:, None, :, None] < 0) | (ic_nat[None, :, None, :] < 0)
        if np.any(self.weights[pad]):
            raise LayerFormatError("nonzero weight in a systolic padding slot")


def _index_buffers(cfg: PpsConfig) -> tuple[np.ndarray, np.ndarray]:
    taps = [pos for v in cfg.patterns for pos in v.positions]
    return (np.array([kh for kh, _ in taps], dtype=np.int64),
            np.array([kw for _, kw in taps], dtype=np.int64))


def check_compliance(masked: Tensor4, cfg: PpsConfig) -> None:
    if (masked.h_k, masked.w_k) != (cfg.h_k, cfg.w_k):
        raise ShapeError(
            f"config is for {cfg.h_k}x{cfg.w_k} kernels, tensor has {masked.h_k}x{masked.w_k}")
    allowed = kernel_masks(cfg, masked.c_out, masked.c_in)
    bad = np.argwhere((masked.values != 0) & ~allowed)
    if bad.size:
        oc, ic, kh, kw = (int(x) for x in bad[0])
        raise ComplianceError(oc, ic, kh, kw, int(masked.values[oc, ic, kh, kw]))


def compile_layer(masked: Tensor4, cfg: PpsConfig, sys_w: int = 1, sys_h: int = 1,
                  in_order=None) -> PpwLayer:
    """Reorder a PPS-compliant tensor into a :class:`PpwLayer`.

    ``in_order`` is the channel order of the activations this layer will
    read: ``in_order[p]`` is the natural channel at physical position ``p``.
    ``None`` means natural order.
    """
    if sys_w < 1 or sys_h < 1:
        raise ValueError(f"systolic dims must be positive, got {sys_w}x{sys_h}")
    check_compliance(masked, cfg)
    P, KSS = cfg.P, cfg.KSS
    position = None if in_order is None else inverse_permutation(check_permutation(in_order, masked.c_in))
    ic_table = group_channels(masked.c_in, P, sys_w, position)
    oc_table = group_channels(masked.c_out, P, sys_h)
    kh_buf, kw_buf = _index_buffers(cfg)

    oc_nat = oc_table.natural_lanes()                      # [P, oc_pad]
    ic_nat = ic_table.natural_lanes()                      # [P, ic_pad]
    g = np.arange(P)[:, None]
    kv = np.arange(P)[None, :]
    w = np.arange(KSS)
    slots = ((g + kv)[..., None] * KSS + w) % cfg.w_num    # [P, P, KSS]
    oc = oc_nat[:, None, :, None, None]
    ic = ic_nat[None, :, None, :, None]
    kh = kh_buf[slots][:, :, None, None, :]
    kw = kw_buf[slots][:, :, None, None, :]
    valid = (oc >= 0) & (ic >= 0)
    vals = masked.values[np.maximum(oc, 0), np.maximum(ic, 0), kh, kw]
    weights = np.where(valid, vals, 0).astype(np.int8)

    return PpwLayer(P, KSS, cfg.h_k, cfg.w_k, masked.c_in, masked.c_out, sys_w, sys_h,
                    ic_table, oc_table, weights, kh_buf, kw_buf, oc_table.concat_order())


def decode_ppw(layer: PpwLayer) -> Tensor4:
    """Scatter a compiled layer back to a dense tensor in natural channel order."""
    layer.validate()
    P, KSS = layer.P, layer.KSS
    out = np.zeros((layer.c_out, layer.c_in, layer.h_k, layer.w_k), dtype=np.int8)
    oc_nat = layer.oc_table.natural_lanes()
    ic_nat = layer.ic_table.natural_lanes()
    for g in range(P):
        ocs = oc_nat[g]
        oc_ok = ocs >= 0
        for kv in range(P):
            ics = ic_nat[kv]
            ic_ok = ics >= 0
            block = layer.weights[g, kv][np.ix_(oc_ok, ic_ok)]
            for w in range(KSS):
                s = slot(g, kv, w, KSS, layer.w_num)
                out[np.ix_(ocs[oc_ok], ics[ic_ok], [layer.kh_buf[s]], [layer.kw_buf[s]])] = \
                    block[:, :, w][:, :, None, None]
    return Tensor4(out)


def layer_config(layer: PpwLayer) -> PpsConfig:
    return PpsConfig(layer.P, layer.KSS, layer.h_k, layer.w_k, tuple(layer.patterns))


def next_layer_reorder(producer: PpwLayer, consumer_cfg: PpsConfig, consumer_weights: Tensor4,
                       sys_w: int | None = None, sys_h: int | None = None) -> PpwLayer:
    """Compile the consumer so it reads the producer's compiler-ordered output directly."""
    if producer.c_out != consumer_weights.c_in:
        raise ShapeError(
            f"producer emits {producer.c_out} channels, consumer expects {consumer_weights.c_in}")
    return compile_layer(consumer_weights, consumer_cfg,
                         producer.sys_w if sys_w is None else sys_w,
                         producer.sys_h if sys_h is None else sys_h,
                         in_order=producer.out_perm)


def compile_chain(masked: list[Tensor4], cfgs: list[PpsConfig], sys_w: int = 1, sys_h: int = 1,
                  nlr: bool = True) -> list[PpwLayer]:
    layers: list[PpwLayer] = []
    for t, cfg in zip(masked, cfgs, strict=True):
        if layers and layers[-1].c_out != t.c_in:
            raise ShapeError(f"chain mismatch: {layers[-1].c_out} channels into c_in={t.c_in}")
        if nlr and layers:
            layers.append(next_layer_reorder(layers[-1], cfg, t, sys_w, sys_h))
        else:
            layers.append(compile_layer(t, cfg, sys_w, sys_h))
    return layers
