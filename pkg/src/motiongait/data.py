"""Dataset handling: directory-tree ingestion in the usual silhouette layout
(root/<subject>/<condition-idx>/<view>/<frame>.pgm), preprocessing of raw
silhouettes to 64x44 binary frames, and a seeded procedural walker generator
that writes the same layout for desk-scale experiments.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, StorageError

log = logging.getLogger(__name__)

CONDITIONS = (
    "nm-01", "nm-02", "nm-03", "nm-04", "nm-05", "nm-06",
    "bg-01", "bg-02", "cl-01", "cl-02",
)
VIEWS = tuple(range(0, 181, 18))
FRAME_H, FRAME_W = 64, 44

_COND_RE = re.compile(r"^(nm|bg|cl)-\d{2}$")


# ---------------------------------------------------------------------------
# PGM frames
# ---------------------------------------------------------------------------

def write_pgm(path, frame: np.ndarray) -> None:
    """Binary 8-bit PGM (P5); expects values in [0, 1]."""
    h, w = frame.shape
    data = (np.asarray(frame) >= 0.5).astype(np.uint8) * 255
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Returns float32 values in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise IngestionError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    if data.size != h * w:
        raise IngestionError(f"{path}: truncated PGM payload")
    return (data.reshape(h, w).astype(np.float32)) / maxval


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _resize_axis(mask: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Rescale one axis of a boolean mask to n samples.

    Shrinking OR-pools source blocks so single-pixel extremities survive
    (and the extent rows/columns stay lit, which makes the whole
    preprocessing idempotent); growing repeats nearest source samples.
    """
    src = mask.shape[axis]
    if src == n:
        return mask
    if src > n:
        edges = (np.arange(n) * src // n).astype(np.intp)
        return np.maximum.reduceat(mask, edges, axis=axis)
    idx = np.minimum(((np.arange(n) + 0.5) * src / n).astype(int), src - 1)
    return np.take(mask, idx, axis=axis)


def preprocess_frame(img: np.ndarray) -> np.ndarray | None:
    """Normalize one raw silhouette to the canonical 64x44 binary frame.

    Binarize at 0.5, crop to the vertical extent of the foreground, rescale
    to height 64 preserving aspect, shift so the foreground x-centroid sits
    at the horizontal middle, pad/crop to width 44. Returns None for an
    all-background frame (caller drops it). The map is idempotent on its
    own outputs.
    """
    a = np.asarray(img, dtype=np.float32)
    if a.ndim != 2:
        raise IngestionError(f"expected a 2-d grayscale frame, got shape {a.shape}")
    if a.size and a.max() > 1.0:
        a = a / 255.0
    mask = a >= 0.5
    if not mask.any():
        return None
    rows = np.flatnonzero(mask.any(axis=1))
    crop = mask[rows[0] : rows[-1] + 1, :]
    hc, wc = crop.shape
    new_w = max(1, round(wc * FRAME_H / hc))
    scaled = _resize_axis(_resize_axis(crop, FRAME_H, 0), new_w, 1)
    xs = np.nonzero(scaled)[1]
    centroid = xs.mean()
    offset = int(np.round(centroid - (FRAME_W - 1) / 2.0))
    out = np.zeros((FRAME_H, FRAME_W), dtype=np.float32)
    src_lo = max(0, offset)
    src_hi = min(new_w, FRAME_W + offset)
    if src_lo < src_hi:
        out[:, src_lo - offset : src_hi - offset] = scaled[:, src_lo:src_hi]
    return out


# ---------------------------------------------------------------------------
# dataset index
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceInfo:
    subject: str
    condition: str          # e.g. "nm-03"
    view: int               # degrees
    path: str               # directory holding the frame files

    @property
    def key(self) -> str:
        return f"{self.subject}/{self.condition}/{self.view:03d}"


@dataclass
class DatasetIndex:
    root: Path
    sequences: list[SequenceInfo]
    train_subjects: list[str]
    test_subjects: list[str]

    def class_id(self, subject: str) -> int:
        return self.train_subjects.index(subject)

    def split(self, name: str) -> list[SequenceInfo]:
        if name == "train":
            keep = set(self.train_subjects)
        elif name == "test":
            keep = set(self.test_subjects)
        elif name == "all":
            return list(self.sequences)
        else:
            raise ConfigError(f"unknown split {name!r}")
        return [s for s in self.sequences if s.subject in keep]


def load_dataset(root, train_subjects: int = 74) -> DatasetIndex:
    """Index every sequence under root; first `train_subjects` subject ids
    (sorted) form the training split, the rest the test split."""
    root = Path(root)
    if not root.is_dir():
        raise StorageError(f"dataset root {root} does not exist")
    subjects = sorted(p.name for p in root.iterdir() if p.is_dir())
    bad: list[str] = []
    sequences: list[SequenceInfo] = []
    for subject in subjects:
        for cond_dir in sorted((root / subject).iterdir()):
            if not cond_dir.is_dir():
                continue
            cond = cond_dir.name
            if not _COND_RE.match(cond) or cond not in CONDITIONS:
                bad.append(f"{subject}/{cond}")
                continue
            for view_dir in sorted(cond_dir.iterdir()):
                if not view_dir.is_dir():
                    continue
                try:
                    view = int(view_dir.name)
                except ValueError:
                    view = -1
                if view not in VIEWS:
                    bad.append(f"{subject}/{cond}/{view_dir.name}")
                    continue
                if not any(view_dir.glob("*.pgm")):
                    log.warning("skipping empty sequence %s", view_dir)
                    continue
                sequences.append(SequenceInfo(subject, cond, view, str(view_dir)))
    if bad:
        raise IngestionError(
            "malformed condition/view directories: " + ", ".join(sorted(bad))
        )
    return DatasetIndex(
        root=root,
        sequences=sequences,
        train_subjects=subjects[:train_subjects],
        test_subjects=subjects[train_subjects:],
    )


def load_sequence_frames(info: SequenceInfo, preprocess: bool = True) -> np.ndarray:
    """Read a sequence's frames (lexicographic order) as (n, 64, 44) float32.

    A frame that fails to parse is skipped with a warning; an all-background
    frame is dropped silently per the preprocessing contract.
    """
    frames = []
    for path in sorted(Path(info.path).glob("*.pgm")):
        try:
            raw = read_pgm(path)
        except (IngestionError, OSError) as exc:
            log.warning("skipping corrupt frame %s (%s)", path, exc)
            continue
        frame = preprocess_frame(raw) if preprocess else raw
        if frame is not None:
            frames.append(frame)
    if not frames:
        raise IngestionError(f"sequence {info.key} has no usable frames")
    return np.stack(frames, axis=0)


class FrameSource:
    """Adapter between a DatasetIndex split and the training loop."""

    def __init__(self, index: DatasetIndex, split: str = "train",
                 cache: bool = True):
        self.index = index
        self._infos = {info.key: info for info in index.split(split)}
        self._by_subject: dict[str, list[str]] = {}
        for info in self._infos.values():
            self._by_subject.setdefault(info.subject, []).append(info.key)
        for keys in self._by_subject.values():
            keys.sort()
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def subjects(self) -> list[str]:
        return sorted(self._by_subject)

    def sequence_keys(self, subject: str) -> list[str]:
        return list(self._by_subject[subject])

    def load_frames(self, key: str) -> np.ndarray:
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        frames = load_sequence_frames(self._infos[key])
        if self._cache is not None:
            self._cache[key] = frames
        return frames

    def info(self, key: str) -> SequenceInfo:
        return self._infos[key]

    def class_id(self, subject: str) -> int:
        return self.index.class_id(subject)


# ---------------------------------------------------------------------------
# synthetic walker
# ---------------------------------------------------------------------------

RAW_H, RAW_W = 128, 96
_GROUND_Y = 120.0
_CL_DILATE = 3


@dataclass(frozen=True)
class WalkerParams:
    """Per-subject body geometry and gait dynamics."""

    leg_len: float
    arm_len: float
    torso_rx: float
    torso_ry: float
    head_r: float
    limb_thick: float
    freq: float          # gait cycles per frame
    leg_amp: float       # radians
    arm_amp: float
    phase: float


def subject_params(seed: int, subject_index: int) -> WalkerParams:
    rng = np.random.default_rng([seed, subject_index, 17])
    leg_len = float(rng.uniform(48.0, 56.0))
    return WalkerParams(
        leg_len=leg_len,
        arm_len=leg_len * float(rng.uniform(0.68, 0.80)),
        torso_rx=float(rng.uniform(10.0, 14.0)),
        torso_ry=float(rng.uniform(16.0, 20.0)),
        head_r=float(rng.uniform(6.5, 8.5)),
        limb_thick=float(rng.uniform(4.0, 6.0)),
        freq=float(rng.uniform(0.06, 0.14)),
        leg_amp=float(rng.uniform(0.45, 0.62)),
        arm_amp=float(rng.uniform(0.25, 0.45)),
        phase=float(rng.uniform(0.0, 2.0 * math.pi)),
    )


@functools.lru_cache(maxsize=16)
def _view_grid(view_deg: int) -> tuple[np.ndarray, np.ndarray]:
    """Source-space coordinates for each raw pixel under the view transform.

    The camera angle is simulated by squashing the canonical side view
    horizontally (narrow near 0/180 degrees) plus a small shear whose sign
    separates the two frontal directions.
    """
    ys, xs = np.mgrid[0:RAW_H, 0:RAW_W].astype(np.float64)
    cx = RAW_W / 2.0
    cy = RAW_H / 2.0
    squash = 0.35 + 0.65 * math.sin(math.radians(view_deg))
    shear = 0.25 * math.cos(math.radians(view_deg))
    x_src = cx + ((xs - cx) - shear * (ys - cy)) / squash
    return x_src, ys


def _ellipse(x, y, cx, cy, rx, ry):
    return ((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2 <= 1.0


def _segment(x, y, x0, y0, x1, y1, thick):
    vx, vy = x1 - x0, y1 - y0
    norm2 = vx * vx + vy * vy
    t = np.clip(((x - x0) * vx + (y - y0) * vy) / norm2, 0.0, 1.0)
    dx = x - (x0 + t * vx)
    dy = y - (y0 + t * vy)
    return dx * dx + dy * dy <= (thick / 2.0) ** 2


def binary_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius or (dx == 0 and dy == 0):
                continue
            src = mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
            out[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out


def render_components(
    params: WalkerParams, t: int, phase_offset: float, view_deg: int
) -> dict[str, np.ndarray]:
    """Raw-canvas body-part masks for frame t of a sequence."""
    x, y = _view_grid(view_deg)
    cx = RAW_W / 2.0
    phi = 2.0 * math.pi * params.freq * t + params.phase + phase_offset
    y_hip = _GROUND_Y - params.leg_len
    y_shoulder = y_hip - 2.0 * params.torso_ry * 0.92
    torso_cy = (y_hip + y_shoulder) / 2.0
    head_cy = y_shoulder - params.head_r * 1.35

    parts = {
        "torso": _ellipse(x, y, cx, torso_cy, params.torso_rx,
                          (y_hip - y_shoulder) / 2.0 + 2.0),
        "head": _ellipse(x, y, cx, head_cy, params.head_r, params.head_r),
    }
    for name, angle, origin_y, length in (
        ("leg0", params.leg_amp * math.sin(phi), y_hip, params.leg_len),
        ("leg1", params.leg_amp * math.sin(phi + math.pi), y_hip, params.leg_len),
        ("arm0", params.arm_amp * math.sin(phi + math.pi), y_shoulder, params.arm_len),
        ("arm1", params.arm_amp * math.sin(phi), y_shoulder, params.arm_len),
    ):
        parts[name] = _segment(
            x, y, cx, origin_y,
            cx + length * math.sin(angle), origin_y + length * math.cos(angle),
            params.limb_thick,
        )
    return parts


def render_frame(
    params: WalkerParams, t: int, phase_offset: float, view_deg: int,
    condition: str,
) -> np.ndarray:
    """Raw boolean silhouette for one frame under a walking condition.

    bg attaches a fixed blob at mid-torso height behind the back; cl dilates
    the torso component only (bulky clothing), leaving limbs and head alone.
    """
    parts = render_components(params, t, phase_offset, view_deg)
    torso = parts["torso"]
    if condition == "cl":
        torso = binary_dilate(torso, _CL_DILATE)
    mask = torso | parts["head"]
    for name in ("leg0", "leg1", "arm0", "arm1"):
        mask = mask | parts[name]
    if condition == "bg":
        x, y = _view_grid(view_deg)
        cx = RAW_W / 2.0
        y_hip = _GROUND_Y - params.leg_len
        y_shoulder = y_hip - 2.0 * params.torso_ry * 0.92
        torso_cy = (y_hip + y_shoulder) / 2.0
        bag_r = params.torso_rx * 0.95
        mask = mask | _ellipse(x, y, cx - params.torso_rx - bag_r * 0.7,
                               torso_cy, bag_r, bag_r * 1.15)
    return mask


def _condition_sequences(nm: int, bg: int, cl: int) -> list[str]:
    names = [f"nm-{i:02d}" for i in range(1, nm + 1)]
    names += [f"bg-{i:02d}" for i in range(1, bg + 1)]
    names += [f"cl-{i:02d}" for i in range(1, cl + 1)]
    unknown = [n for n in names if n not in CONDITIONS]
    if unknown:
        raise ConfigError(f"condition counts exceed the known set: {unknown}")
    return names


def synth_generate(
    out_root,
    num_subjects: int = 8,
    views: tuple[int, ...] = VIEWS,
    nm: int = 6,
    bg: int = 2,
    cl: int = 2,
    frames_per_seq: int = 36,
    seed: int = 0,
) -> dict:
    """Write a full synthetic dataset plus manifest.json; returns the manifest.

    Same seed, same output, bit for bit. The walker for a given subject is
    identical across conditions and sequence indices except for the condition
    modifier and a per-index phase offset, so nm-01 and cl-01 share poses
    frame by frame.
    """
    if num_subjects < 1 or frames_per_seq < 1:
        raise ConfigError("num_subjects and frames_per_seq must be positive")
    for v in views:
        if v not in VIEWS:
            raise ConfigError(f"view {v} is not one of {list(VIEWS)}")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create dataset root {out_root}: {exc}")
    conditions = _condition_sequences(nm, bg, cl)
    manifest: dict = {
        "seed": seed,
        "frame_height": FRAME_H,
        "frame_width": FRAME_W,
        "frames_per_seq": frames_per_seq,
        "num_subjects": num_subjects,
        "views": [int(v) for v in views],
        "conditions": conditions,
        "sequences": {},
    }
    for si in range(num_subjects):
        subject = f"{si + 1:03d}"
        params = subject_params(seed, si)
        for cond_name in conditions:
            cond, idx = cond_name.split("-")
            phase_offset = (int(idx) - 1) * 0.9
            for view in views:
                seq_dir = out_root / subject / cond_name / f"{view:03d}"
                seq_dir.mkdir(parents=True, exist_ok=True)
                digest = hashlib.sha256()
                kept = 0
                for t in range(frames_per_seq):
                    raw = render_frame(params, t, phase_offset, view, cond)
                    frame = preprocess_frame(raw.astype(np.float32))
                    if frame is None:
                        continue
                    path = seq_dir / f"{kept:04d}.pgm"
                    write_pgm(path, frame)
                    digest.update(path.read_bytes())
                    kept += 1
                manifest["sequences"][f"{subject}/{cond_name}/{view:03d}"] = {
                    "frames": kept,
                    "sha256": digest.hexdigest(),
                }
    (out_root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return manifest
