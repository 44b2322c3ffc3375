"""Built-in CIFAR-10 layer tables (3x3 convolutions only)."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ConvLayerSpec:
    name: str
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    pool: bool = False
    group: str = ""     # unique-shape label shared by same-sized layers


def _vgg16():
    plan = [(3, 64, False), (64, 64, True),
            (64, 128, False), (128, 128, True),
            (128, 256, False), (256, 256, False), (256, 256, True),
            (256, 512, False), (512, 512, False), (512, 512, True),
            (512, 512, False), (512, 512, False), (512, 512, True)]
    labels, out = {}, []
    for n, (c_in, c_out, pool) in enumerate(plan, 1):
        label = labels.setdefault((c_in, c_out), f"L{len(labels) + 1}")
        out.append(ConvLayerSpec(f"conv{n}", c_in, c_out, pool=pool, group=label))
    return tuple(out)


def _resnet18():
    plan = [(3, 64, 1)] + [(64, 64, 1)] * 4
    for c_in, c_out in ((64, 128), (128, 256), (256, 512)):
        plan += [(c_in, c_out, 2)] + [(c_out, c_out, 1)] * 3
    labels, out = {}, []
    for n, (c_in, c_out, stride) in enumerate(plan, 1):
        label = labels.setdefault((c_in, c_out), f"L{len(labels) + 1}")
        out.append(ConvLayerSpec(f"conv{n}", c_in, c_out, stride=stride, group=label))
    return tuple(out)


VGG16 = _vgg16()
RESNET18 = _resnet18()

NETWORKS = {"vgg16": VGG16, "resnet18": RESNET18}

# residual adds make ResNet18 a graph, not a chain
CHAINABLE = {"vgg16"}


def unique_layers(layers) -> list[ConvLayerSpec]:
    """First layer of every shape group, in network order."""
    seen, out = set(), []
    for layer in layers:
        if layer.group not in seen:
            seen.add(layer.group)
            out.append(layer)
    return out


def get_network(name: str):
    try:
        return NETWORKS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown network {name!r}; known: {sorted(NETWORKS)}") from None
