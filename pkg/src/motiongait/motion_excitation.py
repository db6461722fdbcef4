"""Motion excitation: per-clip static means, absolute motion deviations,
and a sigmoid-gated residual that adds no learnable parameters.

All ops act on the time axis (third from the end), so they accept both
(c, s, h, w) features and batched (b, c, s, h, w) features, and they handle
sequences of any length: the trailing clip simply holds the remainder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, _result
from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class ClipPartition:
    """Contiguous cover of [0, num_frames) by clips of at most clip_len frames."""

    clip_len: int
    boundaries: tuple[tuple[int, int], ...]

    @property
    def num_clips(self) -> int:
        return len(self.boundaries)

    @property
    def num_frames(self) -> int:
        return self.boundaries[-1][1]


def partition_clips(num_frames: int, clip_len: int) -> ClipPartition:
    """Split [0, num_frames) into ceil(s/L) clips; the last may be short.

    Frame i (1-based) lands in clip ceil(i/L), which is the only clip count
    consistent with assigning every frame a clip without leaving one empty.
    """
    if num_frames < 1:
        raise DomainError(f"cannot partition a sequence of {num_frames} frames")
    if clip_len < 1:
        raise DomainError(f"clip length must be >= 1, got {clip_len}")
    n = math.ceil(num_frames / clip_len)
    bounds = tuple(
        (k * clip_len, min((k + 1) * clip_len, num_frames)) for k in range(n)
    )
    return ClipPartition(clip_len=clip_len, boundaries=bounds)


def _check_time_extent(x: Tensor, partition: ClipPartition, op: str) -> None:
    if x.data.ndim < 4:
        raise DimensionError(f"{op}: expected at least rank 4, got {x.shape}")
    if x.shape[-3] != partition.num_frames:
        raise DimensionError(
            f"{op}: partition covers {partition.num_frames} frames but the "
            f"time extent is {x.shape[-3]}"
        )


def static_features(x: Tensor, partition: ClipPartition) -> Tensor:
    """Arithmetic mean over each clip's frames; output time extent = num_clips."""
    _check_time_extent(x, partition, "static_features")
    slabs = [
        x.data[..., a:b, :, :].mean(axis=-3, keepdims=True)
        for a, b in partition.boundaries
    ]
    out = np.concatenate(slabs, axis=-3).astype(x.dtype, copy=False)

    def vjp(g):
        buf = np.empty_like(x.data)
        for j, (a, b) in enumerate(partition.boundaries):
            buf[..., a:b, :, :] = g[..., j : j + 1, :, :] / (b - a)
        return (buf,)

    return _result(out, (x,), vjp)


def motion_features(x: Tensor, static: Tensor, partition: ClipPartition) -> Tensor:
    """Per-frame absolute deviation from the clip's static feature (all >= 0)."""
    _check_time_extent(x, partition, "motion_features")
    if static.shape[-3] != partition.num_clips:
        raise DimensionError(
            f"motion_features: static features have time extent "
            f"{static.shape[-3]}, expected {partition.num_clips} clips"
        )
    expanded = np.concatenate(
        [
            np.repeat(static.data[..., j : j + 1, :, :], b - a, axis=-3)
            for j, (a, b) in enumerate(partition.boundaries)
        ],
        axis=-3,
    )
    diff = x.data - expanded
    sign = np.sign(diff)
    out = np.abs(diff)

    def vjp(g):
        gs = g * sign
        d_static = np.empty_like(static.data)
        for j, (a, b) in enumerate(partition.boundaries):
            d_static[..., j, :, :] = -gs[..., a:b, :, :].sum(axis=-3)
        return (gs, d_static)

    return _result(out, (x, static), vjp)


def excite(x: Tensor, motion: Tensor) -> Tensor:
    """x + sigmoid(x * motion): the gated residual is always in (0, 1)."""
    if x.shape != motion.shape:
        raise DimensionError(
            f"excite: shapes {x.shape} and {motion.shape} must match"
        )
    prod = x.data * motion.data
    e = np.exp(-np.abs(prod))
    gate = np.where(prod >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(
        x.dtype, copy=False
    )
    out = x.data + gate

    def vjp(g):
        slope = gate * (1.0 - gate)
        return (g * (1.0 + slope * motion.data), g * slope * x.data)

    return _result(out, (x, motion), vjp)


def mem_forward(x: Tensor, clip_len: int) -> Tensor:
    """Full excitation pass: partition, static, motion, gated residual."""
    partition = partition_clips(x.shape[-3], clip_len)
    static = static_features(x, partition)
    motion = motion_features(x, static, partition)
    return excite(x, motion)
