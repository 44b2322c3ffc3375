"""PPW1 binary container for compiled layers.  Layout in docs/formats.md."""
from __future__ import annotations

import struct

import numpy as np

from .compiler import GroupTable, LayerFormatError, PpwLayer, ceil_div

MAGIC = b"PPW1"
VERSION = 1
_HEADER = struct.Struct("<HHBBIIHH")


def index_width(h_k: int, w_k: int) -> int:
    """Bits per index-buffer entry: enough to address any row or column."""
    return (max(h_k, w_k) - 1).bit_length()


def pack_bits(values, width: int) -> bytes:
    """Pack unsigned ``values`` LSB-first at ``width`` bits each."""
    acc = 0
    for i, v in enumerate(values):
        if v < 0 or v >> width:
            raise ValueError(f"value {v} does not fit in {width} bits")
        acc |= int(v) << (i * width)
    return acc.to_bytes(ceil_div(len(values) * width, 8), "little")


def unpack_bits(blob: bytes, count: int, width: int) -> np.ndarray:
    acc = int.from_bytes(blob, "little")
    mask = (1 << width) - 1
    return np.array([(acc >> (i * width)) & mask for i in range(count)], dtype=np.int64)


def index_section_bits(P: int, KSS: int, h_k: int, w_k: int) -> int:
    """Size of everything the index logic needs: P, KSS and both buffers."""
    return 16 + 16 + 2 * 8 * ceil_div(P * KSS * index_width(h_k, w_k), 8)


def _group_major(table: GroupTable) -> np.ndarray:
    return np.concatenate([table.position[g::table.P] for g in range(table.P)])


def to_bytes(layer: PpwLayer) -> bytes:
    if max(layer.h_k, layer.w_k) > 255:
        raise ValueError("kernel dims must fit in a byte")
    width = index_width(layer.h_k, layer.w_k)
    parts = [
        MAGIC,
        struct.pack("<B", VERSION),
        _HEADER.pack(layer.P, layer.KSS, layer.h_k, layer.w_k, layer.c_in, layer.c_out,
                     layer.sys_w, layer.sys_h),
        pack_bits(layer.kh_buf.tolist(), width),
        pack_bits(layer.kw_buf.tolist(), width),
        _group_major(layer.ic_table).astype("<u4").tobytes(),
        _group_major(layer.oc_table).astype("<u4").tobytes(),
        layer.out_perm.astype("<u4").tobytes(),
        layer.weights.astype("<i1").tobytes(),
    ]
    return b"".join(parts)


def from_bytes(blob: bytes) -> PpwLayer:
    if blob[:4] != MAGIC:
        raise LayerFormatError("not a PPW1 file (bad magic)")
    (version,) = struct.unpack_from("<B", blob, 4)
    if version != VERSION:
        raise LayerFormatError(f"unsupported PPW version {version}")
    P, KSS, h_k, w_k, c_in, c_out, sys_w, sys_h = _HEADER.unpack_from(blob, 5)
    off = 5 + _HEADER.size
    width = index_width(h_k, w_k)
    w_num = P * KSS
    buf_len = ceil_div(w_num * width, 8)
    kh_buf = unpack_bits(blob[off:off + buf_len], w_num, width)
    off += buf_len
    kw_buf = unpack_bits(blob[off:off + buf_len], w_num, width)
    off += buf_len

    def u32(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<u4", count=count, offset=off).astype(np.int64)
        off += 4 * count
        return arr

    try:
        ic_major, oc_major, out_perm = u32(c_in), u32(c_out), u32(c_out)
    except ValueError as exc:
        raise LayerFormatError("truncated PPW1 file") from exc

    def table(n, major, multiple):
        natural = np.concatenate([np.arange(g, n, P) for g in range(P)])
        position = np.empty(n, dtype=np.int64)
        position[natural] = major
        return GroupTable(n, P, multiple, position)

    try:
        ic_table, oc_table = table(c_in, ic_major, sys_w), table(c_out, oc_major, sys_h)
    except ValueError as exc:
        raise LayerFormatError(str(exc)) from exc
    shape = (P, P, oc_table.padded_size, ic_table.padded_size, KSS)
    n_w = int(np.prod(shape))
    if len(blob) != off + n_w:
        raise LayerFormatError(f"weight payload is {len(blob) - off} bytes, expected {n_w}")
    weights = np.frombuffer(blob, dtype="<i1", count=n_w, offset=off).reshape(shape)
    return PpwLayer(P, KSS, h_k, w_k, c_in, c_out, sys_w, sys_h, ic_table, oc_table,
                    weights, kh_buf, kw_buf, out_perm)


def save(layer: PpwLayer, path) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(layer))


def load(path) -> PpwLayer:
    with open(path, "rb") as f:
        return from_bytes(f.read())
