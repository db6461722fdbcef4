"""The recognition network: shallow conv + temporal aggregation, stacked
motion-gait blocks (all ADD-fused except a final height-doubling CONCAT
block), temporal max pooling, generalized-mean pooling over width, then an
independent fully connected map per horizontal strip. Batch norm and
per-strip classifiers sit on top for the training losses; distances are
always measured on the pre-norm embeddings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autograd as ag
from .autograd import BatchNormState, Tensor
from .errors import ConfigError, DimensionError, IngestionError, SequenceTooShortError
from .feature_extractor import (
    Fusion,
    PartConvParams,
    he_uniform,
    init_part_conv_params,
    mge_forward,
)

CHECKPOINT_MAGIC = b"MGCK"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32)
    num_mge_blocks: int = 2
    clip_len: int = 2
    num_parts: int = 8
    embed_dim: int = 32
    num_classes: int = 74
    lta_kernel: int = 3
    lta_stride: int = 3
    gem_p_init: float = 6.5
    spatial_pool: bool = True
    mem_enabled: bool = True
    ffe_local_enabled: bool = True
    input_height: int = 64
    input_width: int = 44

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["stage_channels"] = tuple(d["stage_channels"])
        return cls(**d)


@dataclass
class ShapeTrace:
    """Feature extents through the network for a fixed config."""

    block_input_heights: list[int]
    final_height: int
    final_width: int
    num_strips: int


def shape_trace(config: NetworkConfig) -> ShapeTrace:
    """Walk the height/width algebra and validate divisibility constraints."""
    if config.num_mge_blocks < 1:
        raise ConfigError("need at least one motion-gait block")
    if len(config.stage_channels) != config.num_mge_blocks + 1:
        raise ConfigError(
            f"stage_channels must list {config.num_mge_blocks + 1} widths "
            f"(stem plus one per block), got {list(config.stage_channels)}"
        )
    h, w = config.input_height, config.input_width
    inputs = []
    for i in range(config.num_mge_blocks):
        if h % config.num_parts != 0:
            raise ConfigError(
                f"block {i} input height {h} is not divisible by "
                f"{config.num_parts} parts"
            )
        inputs.append(h)
        if i == config.num_mge_blocks - 1:
            h *= 2
        if i == 0 and config.spatial_pool:
            if h % 2 or w % 2:
                raise ConfigError(
                    f"spatial pool needs even extents, got {h}x{w}"
                )
            h //= 2
            w //= 2
    return ShapeTrace(
        block_input_heights=inputs,
        final_height=h,
        final_width=w,
        num_strips=h,
    )


@dataclass
class ModelParams:
    stem_kernel: Tensor
    stem_bias: Tensor
    lta_kernel: Tensor
    lta_bias: Tensor
    blocks: list[PartConvParams]
    fc_weight: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    bn_state: BatchNormState
    cls_weight: Tensor
    gem_p: Tensor

    def named(self) -> dict[str, Tensor]:
        """All trainable tensors, in a fixed order."""
        out = {
            "stem.kernel": self.stem_kernel,
            "stem.bias": self.stem_bias,
            "lta.kernel": self.lta_kernel,
            "lta.bias": self.lta_bias,
        }
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"block{i}"))
        out["fc.weight"] = self.fc_weight
        out["bn.gamma"] = self.bn_gamma
        out["bn.beta"] = self.bn_beta
        out["cls.weight"] = self.cls_weight
        out["gem.p"] = self.gem_p
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "bn.running_mean": self.bn_state.running_mean,
            "bn.running_var": self.bn_state.running_var,
        }

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named().values())

    def zero_grads(self) -> None:
        for t in self.named().values():
            t.zero_grad()


def init_params(config: NetworkConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic He-style uniform init; biases zero; one seed, one model."""
    trace = shape_trace(config)
    rng = np.random.default_rng(seed)
    chans = config.stage_channels
    c0 = chans[0]
    stem_kernel = ag.parameter(
        he_uniform(rng, (c0, 1, 3, 3, 3), 27, dtype), dtype, name="stem.kernel"
    )
    stem_bias = ag.parameter(np.zeros(c0, dtype), dtype, name="stem.bias")
    kt = config.lta_kernel
    lta_kernel = ag.parameter(
        he_uniform(rng, (c0, c0, kt, 1, 1), c0 * kt, dtype), dtype, name="lta.kernel"
    )
    lta_bias = ag.parameter(np.zeros(c0, dtype), dtype, name="lta.bias")
    blocks = []
    for i in range(config.num_mge_blocks):
        fusion = Fusion.CONCAT_H if i == config.num_mge_blocks - 1 else Fusion.ADD
        blocks.append(
            init_part_conv_params(
                chans[i], chans[i + 1], config.num_parts, fusion, rng, dtype
            )
        )
    c_final = chans[-1]
    strips = trace.num_strips
    d = config.embed_dim
    fc_weight = ag.parameter(
        he_uniform(rng, (strips, c_final, d), c_final, dtype), dtype, name="fc.weight"
    )
    bn_gamma = ag.parameter(np.ones(strips * d, dtype), dtype, name="bn.gamma")
    bn_beta = ag.parameter(np.zeros(strips * d, dtype), dtype, name="bn.beta")
    cls_weight = ag.parameter(
        he_uniform(rng, (strips, d, config.num_classes), d, dtype),
        dtype,
        name="cls.weight",
    )
    gem_p = ag.parameter(np.asarray(config.gem_p_init, dtype), dtype, name="gem.p")
    return ModelParams(
        stem_kernel=stem_kernel,
        stem_bias=stem_bias,
        lta_kernel=lta_kernel,
        lta_bias=lta_bias,
        blocks=blocks,
        fc_weight=fc_weight,
        bn_gamma=bn_gamma,
        bn_beta=bn_beta,
        bn_state=BatchNormState.create(strips * d, dtype=dtype),
        cls_weight=cls_weight,
        gem_p=gem_p,
    )


def lta(x: Tensor, kernel: Tensor, bias: Tensor, stride_t: int) -> Tensor:
    """Strided temporal conv (kt x 1 x 1, no temporal padding): compresses the
    frame axis while leaving spatial extents alone."""
    kt = kernel.shape[2]
    if x.shape[-3] < kt:
        raise SequenceTooShortError(
            f"sequence of {x.shape[-3]} frames is shorter than the temporal "
            f"aggregation kernel ({kt})"
        )
    return ag.conv3d(x, kernel, bias, stride=(stride_t, 1, 1), padding=(0, 0, 0))


def _spatial_maxpool(x: Tensor) -> Tensor:
    b, c, s, h, w = x.shape
    r = ag.reshape(x, (b, c, s, h // 2, 2, w // 2, 2))
    return ag.reduce_max(ag.reduce_max(r, axis=-1), axis=-2)


def _backbone(x: Tensor, config: NetworkConfig, params: ModelParams) -> Tensor:
    """(b, 1, s, h, w) -> strip features (b, strips, c_final)."""
    feat = ag.conv3d(x, params.stem_kernel, params.stem_bias)
    feat = lta(feat, params.lta_kernel, params.lta_bias, config.lta_stride)
    for i, block in enumerate(params.blocks):
        feat = mge_forward(
            feat,
            config.clip_len,
            block,
            mem_enabled=config.mem_enabled,
            local_enabled=config.ffe_local_enabled,
        )
        if i == 0 and config.spatial_pool:
            feat = _spatial_maxpool(feat)
    feat = ag.reduce_max(feat, axis=-3)            # collapse time
    feat = ag.gem_pool(feat, params.gem_p)         # collapse width
    return ag.swap_last2(feat)                     # (b, strips, c_final)


@dataclass
class ForwardResult:
    embeddings: Tensor            # (b, strips, d), pre-norm: the metric space
    logits: Tensor | None = None  # (b, strips, classes), train mode only


def _check_sample(x: Tensor, config: NetworkConfig) -> None:
    if x.data.ndim != 4 or x.shape[0] != 1:
        raise IngestionError(f"expected a (1, s, h, w) sample, got {x.shape}")
    if x.shape[2] != config.input_height or x.shape[3] != config.input_width:
        raise IngestionError(
            f"frame size {x.shape[2]}x{x.shape[3]} does not match the "
            f"configured {config.input_height}x{config.input_width}"
        )


def embed_batch(x: Tensor, config: NetworkConfig, params: ModelParams) -> Tensor:
    """Pre-norm strip embeddings for a stacked batch (b, 1, s, h, w)."""
    return ag.strip_matmul(_backbone(x, config, params), params.fc_weight)


def classify(emb: Tensor, config: NetworkConfig, params: ModelParams,
             training: bool) -> Tensor:
    b, strips, d = emb.shape
    flat = ag.reshape(emb, (b, strips * d))
    normed = ag.batch_norm(flat, params.bn_gamma, params.bn_beta,
                           params.bn_state, training)
    return ag.strip_matmul(ag.reshape(normed, (b, strips, d)), params.cls_weight)


def forward(
    samples: list[Tensor],
    config: NetworkConfig,
    params: ModelParams,
    mode: str = "eval",
) -> ForwardResult:
    """Run the network over a list of (1, s, 64, 44) samples.

    Train mode stacks the samples (equal length required) and returns
    embeddings plus per-strip logits with batch statistics; eval mode runs
    each sample on its own, supports any length >= the temporal kernel, and
    builds no graph.
    """
    if not samples:
        raise IngestionError("empty batch")
    for x in samples:
        _check_sample(x, config)
    if mode == "train":
        lengths = {x.shape[1] for x in samples}
        if len(lengths) != 1:
            raise DimensionError(
                f"train mode needs equal-length sequences, got {sorted(lengths)}"
            )
        batch = ag.stack(samples)  # (b, 1, s, h, w)
        emb = embed_batch(batch, config, params)
        logits = classify(emb, config, params, training=True)
        return ForwardResult(embeddings=emb, logits=logits)
    if mode == "eval":
        with ag.no_grad():
            rows = []
            for x in samples:
                one = ag.reshape(x, (1,) + x.shape)
                rows.append(embed_batch(one, config, params).data[0])
        return ForwardResult(embeddings=Tensor(np.stack(rows, axis=0)))
    raise ConfigError(f"unknown forward mode {mode!r}")


def descriptors(result: ForwardResult) -> np.ndarray:
    """Test-time descriptor: all strip embeddings concatenated, one row per sample."""
    b = result.embeddings.shape[0]
    return result.embeddings.data.reshape(b, -1).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in params.named().items()}
    arrays.update(params.state_arrays())
    return arrays


def save_checkpoint(
    path,
    config: NetworkConfig,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Versioned binary: magic, version, JSON header (config echo + meta),
    then named float32 little-endian blobs."""
    header = json.dumps(
        {"config": config.to_dict(), "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            blob = np.array(arr, dtype="<f4", order="C")  # keeps 0-d scalars 0-d
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", blob.ndim))
            for extent in blob.shape:
                f.write(struct.pack("<I", extent))
            f.write(blob.tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise IngestionError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise IngestionError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(
                f.read(4 * n), dtype="<f4"
            ).reshape(shape).copy()
    return header, arrays


def restore_params(config: NetworkConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild a parameter set from checkpoint blobs (strict: all names used)."""
    params = init_params(config, seed=0)
    for name, t in params.named().items():
        if name not in arrays:
            raise IngestionError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != t.shape:
            raise IngestionError(
                f"checkpoint parameter {name!r} has shape {arrays[name].shape}, "
                f"expected {t.shape}"
            )
        t.data = arrays[name].astype(np.float32)
    params.bn_state.running_mean = arrays["bn.running_mean"].astype(np.float32)
    params.bn_state.running_var = arrays["bn.running_var"].astype(np.float32)
    return params
