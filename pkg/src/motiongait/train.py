"""Joint metric-learning training: batch-all triplet loss on pre-norm strip
embeddings plus cross entropy on the per-strip classifiers, identity-balanced
batches (P subjects x K samples), Adam updates, and a fully deterministic,
resumable loop.

Batches and frame windows are derived from (seed, iteration) alone, so a run
resumed from a checkpoint replays the exact batch stream of an uninterrupted
run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, _result
from .errors import ConfigError, ContractError, IngestionError, NumericAbort
from . import network as net


@dataclass
class TrainConfig:
    subjects_per_batch: int = 8    # P
    samples_per_subject: int = 8   # K
    margin: float = 0.2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    iterations: int = 2000
    frames_per_sample: int = 30
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.subjects_per_batch < 2 or self.samples_per_subject < 2:
            raise ConfigError(
                "triplets need at least 2 subjects per batch and 2 samples "
                f"per subject, got P={self.subjects_per_batch} "
                f"K={self.samples_per_subject}"
            )
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _strip_triplet(emb: np.ndarray, labels: np.ndarray, margin: float):
    """Batch-all triplet loss for one strip; returns (loss, dC) where dC is
    the coefficient matrix d loss / d dist."""
    b = emb.shape[0]
    diff = emb[:, None, :] - emb[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(b, dtype=bool)
    neg = ~same
    # triple tensor: [a, p, n]
    act = (
        pos[:, :, None]
        & neg[:, None, :]
        & (dist[:, :, None] - dist[:, None, :] + margin > 0)
    )
    count = int(act.sum())
    if count == 0:
        return 0.0, None, diff, dist
    vals = (dist[:, :, None] - dist[:, None, :] + margin) * act
    loss = float(vals.sum()) / count
    coeff = np.zeros_like(dist)
    coeff += act.sum(axis=2) / count       # d loss / d dist[a, p]
    coeff -= act.sum(axis=1) / count       # d loss / d dist[a, n]
    return loss, coeff, diff, dist


def batch_all_triplet(embeddings: Tensor, labels, margin: float) -> Tensor:
    """Mean over all active (anchor, positive, negative) triples, per strip,
    then mean over strips; zero when every triple satisfies the margin.

    ``embeddings`` is (batch, dim) for a single strip or (batch, strips, dim).
    """
    labels = np.asarray(labels)
    if embeddings.data.ndim == 2:
        emb3 = embeddings.data[:, None, :]
        squeeze = True
    elif embeddings.data.ndim == 3:
        emb3 = embeddings.data
        squeeze = False
    else:
        raise ContractError(f"triplet loss expects rank 2 or 3, got {embeddings.shape}")
    b, strips, _ = emb3.shape
    if labels.shape != (b,):
        raise ContractError(f"labels shape {labels.shape} != ({b},)")
    if np.unique(labels).size < 2:
        raise ContractError("triplet loss needs at least two distinct subjects")

    per_strip = []
    coeffs = []
    for s in range(strips):
        loss, coeff, diff, dist = _strip_triplet(
            np.asarray(emb3[:, s, :], dtype=emb3.dtype), labels, margin
        )
        per_strip.append(loss)
        coeffs.append((coeff, diff, dist))
    total = np.asarray(sum(per_strip) / strips, dtype=embeddings.dtype)

    def vjp(g):
        dout = np.zeros_like(emb3)
        for s, (coeff, diff, dist) in enumerate(coeffs):
            if coeff is None:
                continue
            # dist[i,j] depends on emb_i and emb_j; fold both roles into one
            # symmetric coefficient, guard the non-differentiable zero.
            sym = coeff + coeff.T
            safe = np.where(dist > 0, dist, 1.0)
            unit = diff / safe[:, :, None]
            dout[:, s, :] = (sym[:, :, None] * unit).sum(axis=1)
        dout *= float(g) / strips
        if squeeze:
            dout = dout[:, 0, :]
        return (dout.astype(embeddings.dtype, copy=False),)

    return _result(total, (embeddings,), vjp)


def joint_loss(
    embeddings: Tensor, logits: Tensor, labels, margin: float
) -> tuple[Tensor, float, float]:
    """Unweighted sum of strip-mean triplet and strip-mean cross entropy."""
    labels = np.asarray(labels)
    trip = batch_all_triplet(embeddings, labels, margin)
    b, strips, k = logits.shape
    flat = ag.reshape(logits, (b * strips, k))
    ce = ag.softmax_cross_entropy(flat, np.repeat(labels, strips))
    return ag.add(trip, ce), trip.item(), ce.item()


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_batch(
    subject_sequences: dict[str, list],
    p: int,
    k: int,
    seed: int,
    iteration: int,
) -> list[tuple[str, object]]:
    """One identity-balanced batch: P distinct subjects drawn uniformly, K
    sequences each (with replacement only when a subject has fewer than K).
    Fully determined by (seed, iteration)."""
    subjects = sorted(subject_sequences)
    if len(subjects) < p:
        raise ConfigError(
            f"need at least {p} subjects for a batch, dataset has {len(subjects)}"
        )
    rng = np.random.default_rng([seed, iteration, 0])
    chosen = rng.choice(len(subjects), size=p, replace=False)
    batch = []
    for si in chosen:
        subject = subjects[si]
        seqs = subject_sequences[subject]
        if not seqs:
            raise ConfigError(f"subject {subject} has no sequences")
        replace = len(seqs) < k
        idx = rng.choice(len(seqs), size=k, replace=replace)
        batch.extend((subject, seqs[i]) for i in idx)
    return batch


def ba_sampler(subject_sequences: dict[str, list], p: int, k: int, seed: int):
    """Endless deterministic stream of identity-balanced batches."""
    iteration = 1
    while True:
        yield sample_batch(subject_sequences, p, k, seed, iteration)
        iteration += 1


def sample_window(frames: np.ndarray, target_len: int, rng) -> np.ndarray:
    """Random contiguous window of target_len frames; shorter sequences are
    extended by cyclic repetition first. Evaluation skips this entirely and
    feeds complete sequences."""
    n = frames.shape[0]
    if n == 0:
        raise IngestionError("cannot window an empty sequence")
    if n < target_len:
        idx = np.arange(target_len) % n
        return frames[idx]
    start = int(rng.integers(0, n - target_len + 1))
    return frames[start : start + target_len]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def create(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
            t=0,
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction; updates params and state in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(
                f"adam_step: gradient/state shape mismatch for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m += (1 - beta1) * (g - m)
        v += (1 - beta2) * (g * g - v)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

LOSS_CSV_HEADER = "iteration,triplet,ce,joint,wall_ms"


def train_loop(
    net_config: net.NetworkConfig,
    train_config: TrainConfig,
    source,
    out_dir,
    resume: str | Path | None = None,
    progress=None,
) -> Path:
    """Run the optimization and leave a checkpoint plus loss log in out_dir.

    ``source`` provides the dataset view: ``subjects()`` (sorted ids),
    ``sequence_keys(subject)``, ``load_frames(key)`` returning (n, h, w)
    float32 frames in [0, 1], and ``class_id(subject)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.mgck"
    csv_path = out_dir / "losses.csv"

    subject_sequences = {
        subj: source.sequence_keys(subj) for subj in source.subjects()
    }
    p, k = train_config.subjects_per_batch, train_config.samples_per_subject
    if len(subject_sequences) < p:
        raise ConfigError(
            f"dataset has {len(subject_sequences)} training subjects, "
            f"batch needs {p}"
        )

    if resume is not None:
        header, arrays = net.load_checkpoint(resume)
        stored = net.NetworkConfig.from_dict(header["config"])
        if stored != net_config:
            raise ConfigError("resume checkpoint was trained with a different config")
        params = net.restore_params(net_config, arrays)
        opt = AdamState.create(params.named())
        for name in opt.m:
            m_key, v_key = f"adam.m.{name}", f"adam.v.{name}"
            if m_key not in arrays or v_key not in arrays:
                raise IngestionError(f"resume checkpoint lacks optimizer state for {name!r}")
            opt.m[name] = arrays[m_key].astype(np.float32)
            opt.v[name] = arrays[v_key].astype(np.float32)
        start_iter = int(header["meta"]["iteration"])
        opt.t = start_iter
    else:
        params = net.init_params(net_config, seed=train_config.seed)
        opt = AdamState.create(params.named())
        start_iter = 0
        csv_path.write_text(LOSS_CSV_HEADER + "\n")

    def save(iteration: int) -> None:
        arrays = net.checkpoint_arrays(params)
        for name in opt.m:
            arrays[f"adam.m.{name}"] = opt.m[name]
            arrays[f"adam.v.{name}"] = opt.v[name]
        meta = {
            "iteration": iteration,
            "train_config": train_config.to_dict(),
        }
        net.save_checkpoint(ckpt_path, net_config, arrays, meta)

    named = params.named()
    with open(csv_path, "a") as log:
        for it in range(start_iter + 1, train_config.iterations + 1):
            t0 = time.perf_counter()
            batch = sample_batch(subject_sequences, p, k, train_config.seed, it)
            window_rng = np.random.default_rng([train_config.seed, it, 1])
            samples = []
            labels = []
            for subject, key in batch:
                frames = source.load_frames(key)
                window = sample_window(
                    frames, train_config.frames_per_sample, window_rng
                )
                samples.append(Tensor(window[None, :, :, :].astype(np.float32)))
                labels.append(source.class_id(subject))
            labels = np.asarray(labels)

            result = net.forward(samples, net_config, params, mode="train")
            joint, trip_val, ce_val = joint_loss(
                result.embeddings, result.logits, labels, train_config.margin
            )
            joint_val = joint.item()
            if not np.isfinite(joint_val):
                dump = out_dir / f"abort_iteration_{it}.json"
                dump.write_text(json.dumps({
                    "iteration": it,
                    "triplet": trip_val,
                    "ce": ce_val,
                    "joint": joint_val,
                    "batch": [[subj, str(key)] for subj, key in batch],
                }, indent=2))
                raise NumericAbort(
                    f"non-finite loss at iteration {it}; batch dumped to {dump}"
                )

            params.zero_grads()
            joint.backward()
            grads = {n: t.grad for n, t in named.items()}
            adam_step(
                named, grads, opt,
                lr=train_config.lr, beta1=train_config.beta1,
                beta2=train_config.beta2, eps=train_config.epsilon,
            )
            wall_ms = (time.perf_counter() - t0) * 1000.0
            log.write(f"{it},{trip_val:.6f},{ce_val:.6f},{joint_val:.6f},"
                      f"{wall_ms:.1f}\n")
            log.flush()
            if progress is not None:
                progress(it, trip_val, ce_val, joint_val)
            if train_config.checkpoint_every and it % train_config.checkpoint_every == 0:
                save(it)
        save(train_config.iterations)
    return ckpt_path


def read_loss_log(csv_path) -> dict[str, np.ndarray]:
    rows = np.genfromtxt(csv_path, delimiter=",", names=True)
    rows = np.atleast_1d(rows)
    return {name: rows[name] for name in rows.dtype.names}
