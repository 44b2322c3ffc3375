import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spsflow import ppw_format
from spsflow.compiler import compile_layer, decode_ppw
from spsflow.ppw_format import index_section_bits, pack_bits, unpack_bits

from conftest import random_masked


def test_index_section_is_96_bits_for_reference_config():
    assert index_section_bits(8, 2, 3, 3) == 96


def test_index_section_ignores_channels():
    assert index_section_bits(4, 3, 5, 5) == 16 + 16 + 2 * 8 * ((4 * 3 * 3 + 7) // 8)


@given(st.lists(st.integers(0, 15), max_size=40), st.integers(4, 9))
def test_bit_packing_round_trip(values, width):
    blob = pack_bits(values, width)
    assert len(blob) == (len(values) * width + 7) // 8
    assert unpack_bits(blob, len(values), width).tolist() == values


def test_pack_rejects_wide_values():
    with pytest.raises(ValueError):
        pack_bits([4], 2)


def test_file_layout(rng):
    cfg, _, masked = random_masked(rng, 8, 8, 8, 2)
    layer = compile_layer(masked, cfg, 4, 4)
    blob = ppw_format.to_bytes(layer)
    assert blob[:4] == b"PPW1" and blob[4] == 1
    header = 4 + 1 + 18  # magic, version, fixed fields
    index = 2 * ((16 * 2 + 7) // 8)
    tables = 4 * (8 + 8 + 8)  # ic positions, oc positions, out_perm
    assert len(blob) == header + index + tables + layer.weights.size


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), P=st.integers(1, 8), KSS=st.integers(1, 9),
       c_out=st.integers(1, 16), c_in=st.integers(1, 16), sys_w=st.integers(1, 4), sys_h=st.integers(1, 4))
def test_serialize_round_trip(seed, P, KSS, c_out, c_in, sys_w, sys_h):
    r = np.random.default_rng(seed)
    cfg, _, masked = random_masked(r, c_out, c_in, P, KSS)
    layer = compile_layer(masked, cfg, sys_w, sys_h)
    blob = ppw_format.to_bytes(layer)
    back = ppw_format.from_bytes(blob)
    assert decode_ppw(back) == masked
    assert ppw_format.to_bytes(back) == blob


def test_nlr_order_survives_serialization(rng):
    cfg1, _, w1 = random_masked(rng, 7, 3, 3, 2)
    cfg2, _, w2 = random_masked(rng, 5, 7, 3, 2)
    from spsflow.compiler import next_layer_reorder
    cons = next_layer_reorder(compile_layer(w1, cfg1, 2, 2), cfg2, w2)
    back = ppw_format.from_bytes(ppw_format.to_bytes(cons))
    assert np.array_equal(back.ic_table.position, cons.ic_table.position)


def test_bytes_are_deterministic(rng, tmp_path):
    cfg, _, masked = random_masked(rng, 6, 6, 3, 2)
    ppw_format.save(compile_layer(masked, cfg, 2, 2), tmp_path / "a.ppw")
    ppw_format.save(compile_layer(masked, cfg, 2, 2), tmp_path / "b.ppw")
    assert (tmp_path / "a.ppw").read_bytes() == (tmp_path / "b.ppw").read_bytes()
    assert decode_ppw(ppw_format.load(tmp_path / "a.ppw")) == masked


def test_corrupt_files_rejected(rng):
    cfg, _, masked = random_masked(rng, 4, 4, 2, 2)
    blob = ppw_format.to_bytes(compile_layer(masked, cfg))
    with pytest.raises(ValueError):
        ppw_format.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        ppw_format.from_bytes(blob[:-1])
