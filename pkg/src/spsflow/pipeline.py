"""Synthetic workloads for the built-in networks: seeded int8 weights and inputs."""
from __future__ import annotations

import numpy as np

from .networks import ConvLayerSpec, get_network
from .pruning import PpsConfig, apply_periodic_mask, make_config
from .storage import LayerShape
from .systolic import MODES, SimResult, Stage, run_network
from .tensors import ConvGeometry, FeatureMap, Tensor4


def random_weights(rng: np.random.Generator, c_out: int, c_in: int, h_k: int, w_k: int) -> Tensor4:
    """Nonzero int8 weights, so every pattern slot carries a real value."""
    mag = rng.integers(1, 128, size=(c_out, c_in, h_k, w_k))
    sign = rng.choice(np.array([-1, 1]), size=mag.shape)
    return Tensor4(mag * sign)


def random_input(seed: int, c: int, h: int, w: int) -> FeatureMap:
    rng = np.random.default_rng([seed, 0xF00D])
    return FeatureMap(rng.integers(-128, 128, size=(c, h, w)))


def dense_layers(layers: list[ConvLayerSpec], seed: int) -> list[Tensor4]:
    return [random_weights(np.random.default_rng([seed, n]), l.c_out, l.c_in, l.k, l.k)
            for n, l in enumerate(layers)]


def prune_layers(dense: list[Tensor4], P: int, KSS: int, strategy: str = "magnitude", seed: int = 0,
                 variants=None) -> tuple[list[PpsConfig], list[Tensor4]]:
    cfgs = [make_config(t, P, KSS, strategy, seed, variants) for t in dense]
    return cfgs, [apply_periodic_mask(t, c) for t, c in zip(dense, cfgs)]


def build_stages(layers: list[ConvLayerSpec], P: int, KSS: int, seed: int = 0,
                 strategy: str = "magnitude", pad: int | None = None, variants=None) -> list[Stage]:
    dense = dense_layers(layers, seed)
    cfgs, masked = prune_layers(dense, P, KSS, strategy, seed, variants)
    return [Stage(m, c, ConvGeometry(l.stride, pad), relu=True, pool=l.pool, requant=True, dense=d)
            for l, d, c, m in zip(layers, dense, cfgs, masked)]


def layer_shapes(layers: list[ConvLayerSpec], KSS: int, label: str = "group") -> list[LayerShape]:
    return [LayerShape.pps(l.c_out, l.c_in, l.k, l.k, KSS, getattr(l, label)) for l in layers]


def run_all_modes(stages: list[Stage], ifm: FeatureMap, sys_w: int, sys_h: int,
                  nlr: bool = True) -> dict[str, SimResult]:
    return {mode: run_network(stages, ifm, nlr=nlr, mode=mode, sys_w=sys_w, sys_h=sys_h)
            for mode in MODES}


# the workload the shipped energy coefficients were fitted on
CALIBRATION_FIXTURE = {"network": "vgg16", "input_hw": 32, "P": 8, "KSS": 2,
                       "sys_w": 4, "sys_h": 4, "seed": 0, "nlr": True}


def fixture_counters(network: str = "vgg16", input_hw: int = 32, P: int = 8, KSS: int = 2,
                     sys_w: int = 4, sys_h: int = 4, seed: int = 0, nlr: bool = True):
    layers = list(get_network(network))
    stages = build_stages(layers, P, KSS, seed)
    ifm = random_input(seed, layers[0].c_in, input_hw, input_hw)
    results = run_all_modes(stages, ifm, sys_w, sys_h, nlr)
    return {m: r.counters for m, r in results.items()}
