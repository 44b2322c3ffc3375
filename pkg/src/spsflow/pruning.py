"""Periodic pattern-based sparsity: kernel variants, rotation and masking."""
from __future__ import annotations

import itertools
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tensors import ShapeError, Tensor4

Position = tuple[int, int]


@dataclass(frozen=True)
class KernelVariant:
    """KSS allowed (kh, kw) positions inside a kernel, sorted lexicographically."""

    positions: tuple[Position, ...]

    def __post_init__(self):
        pos = tuple(sorted((int(kh), int(kw)) for kh, kw in self.positions))
        if len(set(pos)) != len(pos):
            raise ValueError(f"kernel variant has repeated positions: {pos}")
        object.__setattr__(self, "positions", pos)

    @property
    def kss(self) -> int:
        return len(self.positions)

    def mask(self, h_k: int, w_k: int) -> np.ndarray:
        m = np.zeros((h_k, w_k), dtype=bool)
        for kh, kw in self.positions:
            m[kh, kw] = True
        return m


@dataclass(frozen=True)
class PpsConfig:
    P: int
    KSS: int
    h_k: int
    w_k: int
    patterns: tuple[KernelVariant, ...]
    seed: int = 0
    strategy: str = "fixed"
    w_num: int = field(init=False)

    def __post_init__(self):
        if self.P < 1 or self.KSS < 1:
            raise ValueError(f"P and KSS must be positive, got P={self.P}, KSS={self.KSS}")
        if self.KSS > self.h_k * self.w_k:
            raise ValueError(f"KSS={self.KSS} exceeds kernel size {self.h_k}x{self.w_k}")
        pats = tuple(p if isinstance(p, KernelVariant) else KernelVariant(p) for p in self.patterns)
        if len(pats) != self.P:
            raise ValueError(f"expected {self.P} patterns, got {len(pats)}")
        if len(set(pats)) != len(pats):
            raise ValueError("kernel variants must be mutually distinct")
        for v in pats:
            if v.kss != self.KSS:
                raise ValueError(f"variant {v.positions} has {v.kss} positions, KSS is {self.KSS}")
            for kh, kw in v.positions:
                if not (0 <= kh < self.h_k and 0 <= kw < self.w_k):
                    raise ValueError(f"position {(kh, kw)} outside {self.h_k}x{self.w_k} kernel")
        object.__setattr__(self, "patterns", pats)
        object.__setattr__(self, "w_num", self.P * self.KSS)

    def variant(self, oc: int, ic: int) -> KernelVariant:
        return self.patterns[kv_of(oc, ic, self.P)]

    def to_dict(self) -> dict:
        return {
            "P": self.P,
            "KSS": self.KSS,
            "h_k": self.h_k,
            "w_k": self.w_k,
            "patterns": [[list(p) for p in v.positions] for v in self.patterns],
            "seed": self.seed,
            "strategy": self.strategy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PpsConfig":
        return cls(
            P=int(d["P"]),
            KSS=int(d["KSS"]),
            h_k=int(d["h_k"]),
            w_k=int(d["w_k"]),
            patterns=tuple(KernelVariant(tuple(tuple(p) for p in v)) for v in d["patterns"]),
            seed=int(d.get("seed", 0)),
            strategy=d.get("strategy", "fixed"),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "PpsConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def kv_of(oc: int, ic: int, P: int) -> int:
    """Kernel variant used by kernel (oc, ic): filter oc starts at variant
    ``oc mod P`` and the sequence rotates by one per input channel."""
    return (oc + ic) % P


def full_pattern(h_k: int, w_k: int) -> KernelVariant:
    return KernelVariant(tuple((kh, kw) for kh in range(h_k) for kw in range(w_k)))


def _candidate_histogram(dense: Tensor4, KSS: int) -> Counter:
    """Count, over all kernels, the mask of each kernel's KSS largest-|w| taps."""
    h_k, w_k = dense.h_k, dense.w_k
    mags = np.abs(dense.values.astype(np.int16)).reshape(dense.c_out * dense.c_in, h_k * w_k)
    # stable sort on -|w| keeps row-major tap order among ties
    order = np.argsort(-mags, axis=1, kind="stable")[:, :KSS]
    rows = np.sort(order, axis=1).astype(np.int64)
    n_taps = h_k * w_k
    if n_taps ** KSS < 2 ** 62:
        radix = n_taps ** np.arange(KSS - 1, -1, -1, dtype=np.int64)
        codes, counts = np.unique(rows @ radix, return_counts=True)
        uniq = [[(code // r) % n_taps for r in radix.tolist()] for code in codes.tolist()]
    else:
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return Counter({tuple(divmod(int(t), w_k) for t in row): int(n) for row, n in zip(uniq, counts)})


def select_patterns(dense: Tensor4, P: int, KSS: int, strategy: str = "magnitude",
                    seed: int = 0, variants=None) -> list[KernelVariant]:
    """Choose P kernel variants for ``dense``.

    ``magnitude`` takes each kernel's KSS largest-magnitude taps as its
    candidate mask and returns the P most frequent candidates (ties broken
    lexicographically).  If fewer than P distinct candidates exist, the
    lexicographically smallest unused masks fill the gap and a warning is
    emitted.  ``fixed`` validates and returns ``variants``.

    The selection is a pure function of its inputs; ``seed`` is accepted for
    interface symmetry and recorded in the resulting config.
    """
    h_k, w_k = dense.h_k, dense.w_k
    if KSS > h_k * w_k:
        raise ValueError(f"KSS={KSS} exceeds kernel size {h_k}x{w_k}")
    if strategy == "fixed":
        if variants is None:
            raise ValueError("strategy 'fixed' needs caller-provided variants")
        cfg = PpsConfig(P, KSS, h_k, w_k, tuple(KernelVariant(tuple(v)) if not isinstance(v, KernelVariant)
                                                else v for v in variants), seed, "fixed")
        return list(cfg.patterns)
    if strategy != "magnitude":
        raise ValueError(f"unknown pattern selection strategy {strategy!r}")

    hist = _candidate_histogram(dense, KSS)
    ranked = sorted(hist.items(), key=lambda kv: (-kv[1], kv[0]))
    chosen = [mask for mask, _ in ranked[:P]]
    if len(chosen) < P:
        warnings.warn(
            f"only {len(chosen)} distinct candidate masks for P={P}; "
            "padding with lexicographically smallest unused masks", stacklevel=2)
        taps = [(kh, kw) for kh in range(h_k) for kw in range(w_k)]
        used = set(chosen)
        for combo in itertools.combinations(taps, KSS):
            if len(chosen) == P:
                break
            if combo not in used:
                chosen.append(combo)
        if len(chosen) < P:
            raise ValueError(f"a {h_k}x{w_k} kernel has fewer than P={P} distinct KSS={KSS} masks")
    return [KernelVariant(m) for m in chosen]


def make_config(dense: Tensor4, P: int, KSS: int, strategy: str = "magnitude",
                seed: int = 0, variants=None) -> PpsConfig:
    pats = select_patterns(dense, P, KSS, strategy, seed, variants)
    return PpsConfig(P, KSS, dense.h_k, dense.w_k, tuple(pats), seed, strategy)


def kernel_masks(cfg: PpsConfig, c_out: int, c_in: int) -> np.ndarray:
    """Boolean allowed-slot mask of shape [c_out, c_in, h_k, w_k]."""
    variant_masks = np.stack([v.mask(cfg.h_k, cfg.w_k) for v in cfg.patterns])
    idx = (np.arange(c_out)[:, None] + np.arange(c_in)[None, :]) % cfg.P
    return variant_masks[idx]


def apply_periodic_mask(dense: Tensor4, cfg: PpsConfig) -> Tensor4:
    if (dense.h_k, dense.w_k) != (cfg.h_k, cfg.w_k):
        raise ShapeError(
            f"config is for {cfg.h_k}x{cfg.w_k} kernels, tensor has {dense.h_k}x{dense.w_k}")
    keep = kernel_masks(cfg, dense.c_out, dense.c_in)
    return Tensor4(np.where(keep, dense.values, 0))
