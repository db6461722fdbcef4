"""Cross-view identification protocol: the first four normal-walk sequences
of every subject enroll the gallery, the remaining sequences form probe
groups per walking condition, and each (probe view, gallery view) cell holds
the rank-1 accuracy of nearest-neighbour subject matching by Euclidean
distance. Identical-view cells are computed but excluded from all means.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, IngestionError

log = logging.getLogger(__name__)

GALLERY_CONDITIONS = ("nm-01", "nm-02", "nm-03", "nm-04")
PROBE_GROUPS = {
    "NM": ("nm-05", "nm-06"),
    "BG": ("bg-01", "bg-02"),
    "CL": ("cl-01", "cl-02"),
}


@dataclass(frozen=True)
class EmbeddingRecord:
    subject: str
    condition: str
    view: int
    descriptor: np.ndarray  # float32, concatenated strip embeddings


@dataclass
class ConditionResult:
    matrix: np.ndarray             # (views, views), NaN where undefined
    probe_view_means: np.ndarray   # per probe view, off-diagonal gallery views
    mean: float


@dataclass
class EvalReport:
    views: list[int]
    conditions: dict[str, ConditionResult] = field(default_factory=dict)


def build_gallery_probe(
    records: list[EmbeddingRecord],
) -> tuple[list[EmbeddingRecord], dict[str, list[EmbeddingRecord]]]:
    """Split records into the gallery and per-condition probe groups."""
    known = set(GALLERY_CONDITIONS) | {
        c for group in PROBE_GROUPS.values() for c in group
    }
    for r in records:
        if r.condition not in known:
            raise IngestionError(f"record has unknown condition {r.condition!r}")
    gallery = [r for r in records if r.condition in GALLERY_CONDITIONS]
    probes = {
        name: [r for r in records if r.condition in group]
        for name, group in PROBE_GROUPS.items()
    }
    return gallery, probes


def _distances_sq(probe_block: np.ndarray, gallery_block: np.ndarray) -> np.ndarray:
    diff = probe_block[:, None, :].astype(np.float64) - gallery_block[None, :, :].astype(np.float64)
    return (diff**2).sum(axis=-1)


def rank1_matrix(
    gallery: list[EmbeddingRecord],
    probes: list[EmbeddingRecord],
    views: list[int],
) -> np.ndarray:
    """Accuracy per (probe view, gallery view) cell, NaN where undefined.

    Within a cell the gallery is restricted to one view; each probe matches
    to its nearest gallery record (ties to the lowest gallery index) and
    scores iff the subjects agree. Probes whose subject has no gallery entry
    at that view are excluded from the cell with a warning.
    """
    if gallery and probes:
        dim = {r.descriptor.shape[0] for r in gallery + probes}
        if len(dim) != 1:
            raise DimensionError(f"descriptor lengths differ: {sorted(dim)}")
    n = len(views)
    view_pos = {v: i for i, v in enumerate(views)}
    matrix = np.full((n, n), np.nan)
    by_gallery_view: dict[int, list[EmbeddingRecord]] = {v: [] for v in views}
    for r in gallery:
        by_gallery_view.setdefault(r.view, []).append(r)
    by_probe_view: dict[int, list[EmbeddingRecord]] = {v: [] for v in views}
    for r in probes:
        by_probe_view.setdefault(r.view, []).append(r)
    warned: set[tuple[str, int]] = set()

    for vg in views:
        g_records = by_gallery_view[vg]
        if not g_records:
            log.warning("no gallery records at view %03d; column left absent", vg)
            continue
        g_subjects = [r.subject for r in g_records]
        g_block = np.stack([r.descriptor for r in g_records])
        subject_set = set(g_subjects)
        for vp in views:
            p_records = [r for r in by_probe_view[vp] if r.subject in subject_set]
            for r in by_probe_view[vp]:
                if r.subject not in subject_set and (r.subject, vg) not in warned:
                    log.warning(
                        "subject %s has no gallery at view %03d; probes excluded",
                        r.subject, vg,
                    )
                    warned.add((r.subject, vg))
            if not p_records:
                continue
            p_block = np.stack([r.descriptor for r in p_records])
            nearest = np.argmin(_distances_sq(p_block, g_block), axis=1)
            correct = sum(
                1
                for i, r in enumerate(p_records)
                if g_subjects[nearest[i]] == r.subject
            )
            matrix[view_pos[vp], view_pos[vg]] = 100.0 * correct / len(p_records)
    return matrix


def _means(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    n = matrix.shape[0]
    off = matrix.copy()
    np.fill_diagonal(off, np.nan)
    row_means = np.full(n, np.nan)
    for i in range(n):
        vals = off[i][~np.isnan(off[i])]
        if vals.size:
            row_means[i] = vals.mean()
    valid = ~np.isnan(row_means)
    grand = float(np.mean(row_means[valid])) if valid.any() else float("nan")
    return row_means, grand


def evaluate(records: list[EmbeddingRecord]) -> EvalReport:
    gallery, probe_groups = build_gallery_probe(records)
    views = sorted({r.view for r in records})
    report = EvalReport(views=views)
    for name, probes in probe_groups.items():
        matrix = rank1_matrix(gallery, probes, views)
        row_means, grand = _means(matrix)
        report.conditions[name] = ConditionResult(
            matrix=matrix, probe_view_means=row_means, mean=grand
        )
    return report


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "  -  " if np.isnan(x) else f"{x:5.1f}"


def summarize(report: EvalReport) -> tuple[str, dict]:
    """Human table (per-probe-view means plus full matrices) and JSON dict."""
    lines = []
    head = "probe view   " + " ".join(f"{v:>5d}" for v in report.views) + "   mean"
    for name, result in report.conditions.items():
        lines.append(f"rank-1 accuracy (%), condition {name}, "
                     "identical-view cells excluded from means")
        lines.append(head)
        lines.append(
            f"{'mean':>10}   "
            + " ".join(_fmt(v) for v in result.probe_view_means)
            + f"   {_fmt(result.mean)}"
        )
        lines.append("")
    lines.append("full matrices (rows: probe view, columns: gallery view)")
    for name, result in report.conditions.items():
        lines.append(f"[{name}]")
        lines.append(head.replace("   mean", ""))
        for i, v in enumerate(report.views):
            lines.append(
                f"{v:>10d}   " + " ".join(_fmt(x) for x in result.matrix[i])
            )
        lines.append("")
    payload = {
        "views": report.views,
        "conditions": {
            name: {
                "matrix": [
                    [None if np.isnan(x) else round(float(x), 4) for x in row]
                    for row in result.matrix
                ],
                "probe_view_means": [
                    None if np.isnan(x) else round(float(x), 4)
                    for x in result.probe_view_means
                ],
                "mean": None if np.isnan(result.mean) else round(result.mean, 4),
            }
            for name, result in report.conditions.items()
        },
    }
    return "\n".join(lines), payload


def report_to_json(report: EvalReport) -> str:
    return json.dumps(summarize(report)[1], indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

MAGIC_LINE = "MGEMB1"


def write_embeddings(path, records: list[EmbeddingRecord]) -> None:
    """`MGEMB1 <dim> <count>` header line, then per record one text label
    line (`subject condition view`) followed by dim little-endian float32."""
    if not records:
        raise IngestionError("refusing to write an empty embedding file")
    dim = records[0].descriptor.shape[0]
    with open(path, "wb") as f:
        f.write(f"{MAGIC_LINE} {dim} {len(records)}\n".encode("ascii"))
        for r in records:
            if r.descriptor.shape != (dim,):
                raise DimensionError(
                    f"descriptor for {r.subject}/{r.condition}/{r.view} has "
                    f"shape {r.descriptor.shape}, expected ({dim},)"
                )
            f.write(f"{r.subject} {r.condition} {r.view}\n".encode("ascii"))
            f.write(np.asarray(r.descriptor, dtype="<f4").tobytes())


def read_embeddings(path) -> list[EmbeddingRecord]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != MAGIC_LINE:
            raise IngestionError(f"{path}: not an embedding file")
        dim, count = int(header[1]), int(header[2])
        records = []
        for _ in range(count):
            label = f.readline().decode("ascii").split()
            if len(label) != 3:
                raise IngestionError(f"{path}: truncated label line")
            blob = f.read(4 * dim)
            if len(blob) != 4 * dim:
                raise IngestionError(f"{path}: truncated descriptor payload")
            records.append(
                EmbeddingRecord(
                    subject=label[0],
                    condition=label[1],
                    view=int(label[2]),
                    descriptor=np.frombuffer(blob, dtype="<f4").copy(),
                )
            )
    return records
