import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spsflow.compiler import compile_layer, decode_ppw
from spsflow.pipeline import random_weights
from spsflow.pruning import PpsConfig, apply_periodic_mask, full_pattern
from spsflow.systolic import (EventCounters, Stage, dense_reference_chain, run_network,
                              simulate_dense_baseline, simulate_format_model, simulate_sps)
from spsflow.tensors import ConvGeometry, ShapeError, Tensor4, conv2d_dense

from conftest import random_fm, random_masked, random_variants


def _layer(rng, c_out, c_in, P, KSS, sys_w=1, sys_h=1, nonzero=False):
    cfg, dense, masked = random_masked(rng, c_out, c_in, P, KSS)
    if nonzero:
        dense = random_weights(rng, c_out, c_in, cfg.h_k, cfg.w_k)
        masked = apply_periodic_mask(dense, cfg)
    return cfg, dense, masked, compile_layer(masked, cfg, sys_w, sys_h)


def test_full_pattern_matches_dense(rng):
    dense = Tensor4(rng.integers(-128, 128, size=(5, 4, 3, 3)))
    layer = compile_layer(dense, PpsConfig(1, 9, 3, 3, (full_pattern(3, 3),)), 2, 2)
    fm = random_fm(rng, 4, 6, 6)
    assert simulate_sps(fm, layer).ofm == conv2d_dense(fm, dense)


def test_reference_example(rng):
    _, _, masked, layer = _layer(rng, 8, 8, 2, 2, 2, 2)
    fm = random_fm(rng, 8, 6, 6)
    assert simulate_sps(fm, layer).ofm == conv2d_dense(fm, masked)


@pytest.mark.parametrize("P,KSS,c_out,c_in,sys_w,sys_h,stride", [
    (2, 2, 5, 3, 2, 3, 1), (3, 4, 7, 8, 4, 1, 1), (1, 1, 2, 2, 1, 1, 1), (4, 3, 9, 6, 3, 2, 2)])
def test_loop_and_vector_engines_agree(rng, P, KSS, c_out, c_in, sys_w, sys_h, stride):
    _, _, masked, layer = _layer(rng, c_out, c_in, P, KSS, sys_w, sys_h)
    fm = random_fm(rng, c_in, 5, 5)
    geom = ConvGeometry(stride)
    for natural in (False, True):
        a = simulate_sps(fm, layer, geom, natural, engine="loop")
        b = simulate_sps(fm, layer, geom, natural, engine="vector")
        assert a.ofm == b.ofm and a.counters == b.counters
    assert a.ofm == conv2d_dense(fm, masked, geom)


def test_dense_baseline_engines_agree(rng):
    dense = Tensor4(rng.integers(-128, 128, size=(5, 3, 3, 3)))
    fm = random_fm(rng, 3, 4, 4)
    a = simulate_dense_baseline(fm, dense, ConvGeometry(), 2, 3, engine="loop")
    b = simulate_dense_baseline(fm, dense, ConvGeometry(), 2, 3, engine="vector")
    assert a.ofm == b.ofm == conv2d_dense(fm, dense) and a.counters == b.counters
    assert b.counters.mac_ops == 16 * 6 * 4 * 9
    assert b.counters.index_reads == b.counters.reorder_moves == 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), P=st.integers(1, 8), KSS=st.integers(1, 9),
       c_out=st.integers(1, 12), c_in=st.integers(1, 12), hw=st.integers(1, 8),
       sys_w=st.integers(1, 4), sys_h=st.integers(1, 4))
def test_sps_equals_dense_on_decoded_layer(seed, P, KSS, c_out, c_in, hw, sys_w, sys_h):
    r = np.random.default_rng(seed)
    _, _, masked, layer = _layer(r, c_out, c_in, P, KSS, sys_w, sys_h)
    fm = random_fm(r, c_in, hw, hw)
    geom = ConvGeometry(1, layer.h_k // 2)
    res = simulate_sps(fm, layer, geom)
    assert res.ofm == conv2d_dense(fm, decode_ppw(layer), geom)
    res.counters.check()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), P=st.integers(1, 8), KSS=st.integers(1, 4),
       c_out=st.integers(1, 12), c_in=st.integers(1, 12), sys_w=st.integers(1, 4), sys_h=st.integers(1, 4))
def test_counter_closed_forms(seed, P, KSS, c_out, c_in, sys_w, sys_h):
    r = np.random.default_rng(seed)
    _, _, _, layer = _layer(r, c_out, c_in, P, KSS, sys_w, sys_h)
    fm = random_fm(r, c_in, 4, 4)
    c = simulate_sps(fm, layer, ConvGeometry(1, layer.h_k // 2)).counters
    n_pix = (4 + 2 * (layer.h_k // 2) - layer.h_k + 1) ** 2
    assert c.index_reads == n_pix * P * layer.onc_p * P * KSS
    assert c.act_fetches == c.index_reads * layer.inc_p * sys_w
    assert c.mac_ops == c.weight_fetches == c.psum_accums == c.act_fetches * sys_h
    assert c.mac_ops == n_pix * P * P * layer.oc_pad * layer.ic_pad * KSS
    assert c.output_writes == c.reorder_moves == c_out * n_pix
    compiled = simulate_sps(fm, layer, ConvGeometry(1, layer.h_k // 2), emit_natural_order=False)
    assert compiled.counters.reorder_moves == 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), P=st.integers(1, 6), KSS=st.integers(1, 6),
       sys=st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=2, max_size=3))
def test_padding_invariance(seed, P, KSS, sys):
    r = np.random.default_rng(seed)
    cfg, _, masked = random_masked(r, 7, 5, P, KSS)
    fm = random_fm(r, 5, 4, 4)
    outs = [simulate_sps(fm, compile_layer(masked, cfg, w, h)).ofm for w, h in sys]
    assert all(o == outs[0] for o in outs)


@pytest.mark.parametrize("KSS", [1, 2, 5, 9])
def test_mac_ratio_without_padding(rng, KSS):
    P, sys_ = (8, 2) if KSS < 9 else (1, 4)
    _, _, masked, layer = _layer(rng, 16, 16, P, KSS, sys_, sys_)
    fm = random_fm(rng, 16, 4, 4)
    sps = simulate_sps(fm, layer).counters.mac_ops
    dense = simulate_dense_baseline(fm, masked, ConvGeometry(), sys_, sys_).counters.mac_ops
    assert sps * 9 == dense * KSS
    assert (sps == dense) == (KSS == 9)


def test_csr_model(rng):
    _, _, masked, _ = _layer(rng, 8, 8, 8, 2, nonzero=True)
    fm = random_fm(rng, 8, 5, 5)
    res = simulate_format_model(fm, masked, model="csr")
    nnz = np.count_nonzero(masked.values)
    assert res.ofm == conv2d_dense(fm, masked)
    assert res.counters.index_reads == res.counters.mac_ops == nnz * 25
    dense = simulate_dense_baseline(fm, masked).counters.mac_ops
    assert res.counters.mac_ops * 9 == dense * 2
    assert res.counters.reorder_moves == 0


def test_fkw_model(rng):
    _, _, masked, _ = _layer(rng, 6, 5, 3, 2, nonzero=True)
    fm = random_fm(rng, 5, 4, 4)
    res = simulate_format_model(fm, masked, ConvGeometry(), "fkw")
    assert res.ofm == conv2d_dense(fm, masked)
    assert res.counters.reorder_moves == 6 * 16
    assert res.counters.index_reads == 6 * 5
    with pytest.raises(ValueError):
        simulate_format_model(fm, masked, model="coo")


def _chain(rng, channels, P=2, KSS=2, pools=None):
    stages = []
    pools = pools or [False] * (len(channels) - 1)
    for c_in, c_out, pool in zip(channels, channels[1:], pools):
        cfg = PpsConfig(P, KSS, 3, 3, random_variants(rng, P, KSS, 3, 3))
        dense = random_weights(rng, c_out, c_in, 3, 3)
        stages.append(Stage(apply_periodic_mask(dense, cfg), cfg, pool=pool, dense=dense))
    return stages


@pytest.mark.parametrize("channels,pools", [([3, 6, 5], None), ([4, 7, 6, 5], [True, False, True])])
def test_chains_match_reference(rng, channels, pools):
    stages = _chain(rng, channels, pools=pools)
    fm = random_fm(rng, channels[0], 8, 8)
    ref = dense_reference_chain(stages, fm)
    on = run_network(stages, fm, nlr=True, sys_w=2, sys_h=2)
    off = run_network(stages, fm, nlr=False, sys_w=2, sys_h=2)
    assert on.ofm == off.ofm == ref
    conv_sizes = [c.output_writes for c in on.per_layer]
    assert on.counters.reorder_moves == conv_sizes[-1]
    assert off.counters.reorder_moves == sum(conv_sizes)
    assert [c.reorder_moves for c in on.per_layer[:-1]] == [0] * (len(stages) - 1)


def test_two_layer_reorder_difference(rng):
    stages = _chain(rng, [3, 6, 4])
    fm = random_fm(rng, 3, 5, 5)
    on = run_network(stages, fm, nlr=True)
    off = run_network(stages, fm, nlr=False)
    assert off.counters.reorder_moves - on.counters.reorder_moves == 6 * 5 * 5


def test_single_layer_nlr_is_no_op(rng):
    stages = _chain(rng, [3, 5])
    fm = random_fm(rng, 3, 4, 4)
    a, b = run_network(stages, fm, nlr=True), run_network(stages, fm, nlr=False)
    assert a.ofm == b.ofm and a.counters == b.counters


def test_all_modes_agree_on_a_chain(rng):
    stages = _chain(rng, [3, 8, 8], P=4, pools=[True, False])
    fm = random_fm(rng, 3, 8, 8)
    ref = dense_reference_chain(stages, fm)
    for mode in ("sps", "csr_model", "fkw_model"):
        assert run_network(stages, fm, mode=mode, sys_w=2, sys_h=2).ofm == ref
    base = run_network(stages, fm, mode="dense_baseline", sys_w=2, sys_h=2)
    assert base.ofm == dense_reference_chain(stages, fm, use_dense=True)


def test_chain_mismatch_rejected(rng):
    a, b = _chain(rng, [3, 4]), _chain(rng, [5, 2])
    with pytest.raises(ShapeError):
        run_network(a + b, random_fm(rng, 3, 4, 4))
    with pytest.raises(ShapeError):
        simulate_sps(random_fm(rng, 2, 4, 4), compile_layer(a[0].weights, a[0].cfg))


def test_result_json_has_all_counters(rng):
    stages = _chain(rng, [3, 4])
    doc = json.loads(run_network(stages, random_fm(rng, 3, 4, 4)).to_json())
    assert set(doc["counters"]) == {"weight_fetches", "mac_ops", "index_reads", "act_fetches",
                                    "psum_accums", "reorder_moves", "output_writes"}
    assert len(doc["checksum"]) == 64


def test_counter_checks():
    EventCounters(1, 1, 0, 0, 1).check()
    with pytest.raises(ValueError):
        EventCounters(mac_ops=2, psum_accums=1).check()
    with pytest.raises(ValueError):
        EventCounters(index_reads=-1).check()
    assert (EventCounters(1, 2) + EventCounters(3, 4)).mac_ops == 6
