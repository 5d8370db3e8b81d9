"""Mini U-Net generator, pooled conv discriminator and the inverse-mapping network.

Each network is a pure function of a parameter mapping and an input. The
mapping may hold plain arrays (inference) or tape-tracked tensors
(training); inputs may be one image ``[C,H,W]`` or a batch ``[N,C,H,W]``.

Layer layout for width ``w`` and depth ``d`` (channels per level ``w*2**l``):

========================  ===================================================
generator                 enc{l}: conv k×k, leaky-relu, keep skip, avg-pool
                          mid:    conv k×k, leaky-relu
                          dec{l}: upsample, concat skip, conv k×k, leaky-relu
                          out:    conv 1×1, sigmoid
mapper                    as generator without skip concatenation
discriminator             enc{l}: conv k×k, leaky-relu, avg-pool
                          fc:     dense to one logit, sigmoid
========================  ===================================================
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from . import autodiff as ad
from .params import ParamSet

Role = Literal["generator", "discriminator", "mapper"]
ROLES = ("generator", "discriminator", "mapper")


@dataclass(frozen=True)
class ArchSpec:
    channels: int = 1
    width: int = 8
    depth: int = 2
    kernel: int = 3
    slope: float = 0.2
    image_size: int = 16

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.image_size % (2 ** self.depth):
            raise ValueError(f"image_size {self.image_size} not divisible by 2**depth={2 ** self.depth}")

    def level_width(self, level: int) -> int:
        return self.width * 2 ** level


def layer_shapes(spec: ArchSpec, role: Role) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter tensor of a network."""
    k, c, d = spec.kernel, spec.channels, spec.depth
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, cin, cout, size=k):
        shapes.extend([(f"{name}.w", (cout, cin, size, size)), (f"{name}.b", (cout,))])

    cin = c
    for level in range(d):
        conv(f"enc{level}", cin, spec.level_width(level))
        cin = spec.level_width(level)
    if role == "discriminator":
        side = spec.image_size // 2 ** d
        shapes.extend([("fc.w", (cin * side * side, 1)), ("fc.b", (1,))])
        return shapes
    conv("mid", cin, spec.level_width(d))
    for level in reversed(range(d)):
        up = spec.level_width(level + 1)
        skip = spec.level_width(level) if role == "generator" else 0
        conv(f"dec{level}", up + skip, spec.level_width(level))
    conv("out", spec.level_width(0), c, size=1)
    return shapes


def init_params(spec: ArchSpec, role: Role, seed: int) -> ParamSet:
    """He-normal fan-in weights and zero biases, fully determined by ``seed``."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    items = []
    for name, shape in layer_shapes(spec, role):
        if name.endswith(".b"):
            items.append((name, np.zeros(shape)))
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        items.append((name, rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)))
    return ParamSet(items)


def _check_spatial(x, spec: ArchSpec, who: str):
    h, w = np.shape(x.data if isinstance(x, ad.Tensor) else x)[-2:]
    step = 2 ** spec.depth
    if h % step or w % step:
        raise ValueError(f"{who}: spatial size {h}x{w} not divisible by 2**depth={step}")


def _conv(p: Mapping, name: str, x, spec: ArchSpec, act=True):
    y = ad.conv2d_same(x, p[f"{name}.w"], p[f"{name}.b"])
    return ad.leaky_relu(y, spec.slope) if act else y


def generator_forward(params: Mapping, x, spec: ArchSpec) -> ad.Tensor:
    _check_spatial(x, spec, "generator_forward")
    skips = []
    h = x
    for level in range(spec.depth):
        h = _conv(params, f"enc{level}", h, spec)
        skips.append(h)
        h = ad.pool_avg2(h)
    h = _conv(params, "mid", h, spec)
    channel_axis = 1 if len(h.shape) == 4 else 0
    for level in reversed(range(spec.depth)):
        h = ad.concat([ad.upsample_nearest2(h), skips[level]], axis=channel_axis)
        h = _conv(params, f"dec{level}", h, spec)
    return ad.sigmoid(_conv(params, "out", h, spec, act=False))


def mapper_forward(params: Mapping, y, spec: ArchSpec) -> ad.Tensor:
    """Encoder-decoder with no skips: the mapping must pass through the bottleneck."""
    _check_spatial(y, spec, "mapper_forward")
    h = y
    for level in range(spec.depth):
        h = ad.pool_avg2(_conv(params, f"enc{level}", h, spec))
    h = _conv(params, "mid", h, spec)
    for level in reversed(range(spec.depth)):
        h = _conv(params, f"dec{level}", ad.upsample_nearest2(h), spec)
    return ad.sigmoid(_conv(params, "out", h, spec, act=False))


def discriminator_logit(params: Mapping, img, spec: ArchSpec) -> ad.Tensor:
    """Pre-sigmoid score, shape ``[N]`` for a batch or ``[]`` for one image."""
    shape = np.shape(img.data if isinstance(img, ad.Tensor) else img)
    if shape[-2:] != (spec.image_size, spec.image_size):
        raise ValueError(f"discriminator_forward: expected {spec.image_size}x{spec.image_size} "
                         f"images, got {shape[-2]}x{shape[-1]}")
    single = len(shape) == 3
    h = img
    for level in range(spec.depth):
        h = ad.pool_avg2(_conv(params, f"enc{level}", h, spec))
    n = 1 if single else shape[0]
    logit = ad.dense(ad.reshape(h, (n, -1)), params["fc.w"], params["fc.b"])
    return ad.reshape(logit, () if single else (n,))


def discriminator_forward(params: Mapping, img, spec: ArchSpec) -> ad.Tensor:
    return ad.sigmoid(discriminator_logit(params, img, spec))
