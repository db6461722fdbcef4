"""Fine feature extraction: a global 3-D conv branch plus per-part
independent convolutions over horizontal bands, fused by addition or by
height concatenation. One excitation pass followed by this extractor is a
motion-gait extraction block; the concat variant doubles the height.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError
from .motion_excitation import mem_forward


class Fusion(str, enum.Enum):
    ADD = "add"
    CONCAT_H = "concat_h"


@dataclass
class PartConvParams:
    """Weights for one extractor block: one global conv + num_parts
    independent part convs. Part kernels are distinct tensors, never views,
    so no update can alias across parts.
    """

    global_kernel: Tensor
    global_bias: Tensor
    part_kernels: list[Tensor] = field(default_factory=list)
    part_biases: list[Tensor] = field(default_factory=list)
    fusion: Fusion = Fusion.ADD

    @property
    def num_parts(self) -> int:
        return len(self.part_kernels)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.global.kernel": self.global_kernel,
               f"{prefix}.global.bias": self.global_bias}
        for k in range(self.num_parts):
            out[f"{prefix}.part{k}.kernel"] = self.part_kernels[k]
            out[f"{prefix}.part{k}.bias"] = self.part_biases[k]
        return out


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_part_conv_params(
    c_in: int,
    c_out: int,
    num_parts: int,
    fusion: Fusion,
    rng: np.random.Generator,
    dtype=np.float32,
) -> PartConvParams:
    if num_parts < 1:
        raise ConfigError(f"num_parts must be >= 1, got {num_parts}")
    fan_in = c_in * 27
    kshape = (c_out, c_in, 3, 3, 3)
    params = PartConvParams(
        global_kernel=ag.parameter(he_uniform(rng, kshape, fan_in, dtype), dtype),
        global_bias=ag.parameter(np.zeros(c_out, dtype), dtype),
        fusion=fusion,
    )
    for _ in range(num_parts):
        params.part_kernels.append(
            ag.parameter(he_uniform(rng, kshape, fan_in, dtype), dtype)
        )
        params.part_biases.append(ag.parameter(np.zeros(c_out, dtype), dtype))
    return params


def ffe_global(x: Tensor, params: PartConvParams) -> Tensor:
    """Same-padded stride-1 conv over the whole frame."""
    return ag.conv3d(x, params.global_kernel, params.global_bias)


def ffe_local(x: Tensor, params: PartConvParams) -> Tensor:
    """Split into horizontal bands, convolve each with its own kernel, re-stack.

    Each band is padded as an independent volume (its own zero halo), so
    nothing leaks between parts and output rows of part k depend only on
    input rows of part k.
    """
    h = x.shape[-2]
    n = params.num_parts
    if h % n != 0:
        raise ConfigError(f"{n} parts do not divide feature height {h}")
    parts = ag.split_h(x, n)
    convolved = [
        ag.conv3d(part, params.part_kernels[k], params.part_biases[k])
        for k, part in enumerate(parts)
    ]
    return ag.concat_h(convolved)


def fuse(global_feat: Tensor, local_feat: Tensor, mode: Fusion) -> Tensor:
    if mode == Fusion.ADD:
        return ag.add(global_feat, local_feat)
    if mode == Fusion.CONCAT_H:
        return ag.concat_h([global_feat, local_feat])
    raise ConfigError(f"unknown fusion mode {mode!r}")


def mge_forward(
    x: Tensor,
    clip_len: int,
    params: PartConvParams,
    mem_enabled: bool = True,
    local_enabled: bool = True,
) -> Tensor:
    """Excite then extract. Fusion ADD keeps the height; CONCAT_H doubles it.

    Ablations: with excitation off the input passes straight to the
    extractor; with the local branch off the global features stand in for
    the local ones, which preserves every output shape.
    """
    feat = mem_forward(x, clip_len) if mem_enabled else x
    global_feat = ffe_global(feat, params)
    local_feat = ffe_local(feat, params) if local_enabled else global_feat
    return fuse(global_feat, local_feat, params.fusion)
