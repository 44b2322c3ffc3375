"""Shared oracles and random-instance builders."""
import math
import sys

import numpy as np
import pytest

from spsflow.pruning import KernelVariant, PpsConfig, apply_periodic_mask
from spsflow.tensors import FeatureMap, Tensor4


def scalar_conv(ifm: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Textbook nested-loop convolution on plain Python ints."""
    c_out, c_in, h_k, w_k = w.shape
    _, h, wd = ifm.shape
    h_out = (h + 2 * pad - h_k) // stride + 1
    w_out = (wd + 2 * pad - w_k) // stride + 1
    out = np.zeros((c_out, h_out, w_out), dtype=np.int64)
    for oc in range(c_out):
        for oh in range(h_out):
            for ow in range(w_out):
                acc = 0
                for ic in range(c_in):
                    for kh in range(h_k):
                        for kw in range(w_k):
                            y, x = oh * stride + kh - pad, ow * stride + kw - pad
                            if 0 <= y < h and 0 <= x < wd:
                                acc += int(w[oc, ic, kh, kw]) * int(ifm[ic, y, x])
                out[oc, oh, ow] = acc
    return out


def kernel_for(P, KSS, k=3):
    """Smallest square kernel, at least k x k, with P distinct KSS-tap masks."""
    while k * k < KSS or math.comb(k * k, KSS) < P:
        k += 1
    return k


def random_variants(rng, P, KSS, h_k, w_k):
    """P distinct random KSS-subsets of the kernel taps."""
    if math.comb(h_k * w_k, KSS) < P:
        raise ValueError(f"a {h_k}x{w_k} kernel has fewer than {P} masks of size {KSS}")
    taps = [(kh, kw) for kh in range(h_k) for kw in range(w_k)]
    seen = set()
    while len(seen) < P:
        idx = tuple(sorted(rng.choice(len(taps), size=KSS, replace=False).tolist()))
        seen.add(idx)
    return tuple(KernelVariant(tuple(taps[i] for i in idx)) for idx in sorted(seen))


def random_masked(rng, c_out, c_in, P, KSS, h_k=None, w_k=None):
    if h_k is None:
        h_k = w_k = kernel_for(P, KSS)
    cfg = PpsConfig(P, KSS, h_k, w_k, random_variants(rng, P, KSS, h_k, w_k))
    dense = Tensor4(rng.integers(-128, 128, size=(c_out, c_in, h_k, w_k)))
    return cfg, dense, apply_periodic_mask(dense, cfg)


def random_fm(rng, c, h, w):
    return FeatureMap(rng.integers(-128, 128, size=(c, h, w)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
