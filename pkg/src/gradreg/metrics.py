"""Evaluation metrics: Dice overlap, symmetric average surface distance via
an exact separable squared Euclidean distance transform, and RMS error of
deformation fields against a known ground truth."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import LabelMask, atomic_write_text
from .warp import DeformationField


@dataclass(frozen=True)
class EvalReport:
    case: str
    label: int
    dice_before: float
    dice_after: float
    asd_before: float
    asd_after: float
    field_rmse: float | None


def dice(a: LabelMask, b: LabelMask, label: int) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both sets are empty, 0.0 when exactly
    one is."""
    if a.dims != b.dims:
        raise ValueError(f"dice: dims mismatch {a.dims} vs {b.dims}")
    sa = a.labels == label
    sb = b.labels == label
    na = int(sa.sum())
    nb = int(sb.sum())
    if na == 0 and nb == 0:
        return 1.0
    inter = int((sa & sb).sum())
    return 2.0 * inter / (na + nb)


def surface_voxels(m: LabelMask, label: int) -> np.ndarray:
    """Boolean mask of label voxels with at least one 6-connected neighbor
    outside the label; the volume boundary counts as outside."""
    inside = m.labels == label
    interior = inside.copy()
    for axis in range(3):
        for shift in (1, -1):
            neighbor = np.zeros_like(inside)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            else:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            neighbor[tuple(dst)] = inside[tuple(src)]
            interior &= neighbor
    return inside & ~interior


def _edt_1d_sq(f: np.ndarray, weight: float) -> np.ndarray:
    """Felzenszwalb-Huttenlocher lower-envelope transform of one line.

    f holds squared distances; parabolas sit at integer positions with
    squared-distance weight (spacing^2) per index step.
    """
    n = f.shape[0]
    idx = np.flatnonzero(np.isfinite(f))
    if idx.size == 0:
        return f.copy()
    out = np.empty_like(f)
    v = np.empty(idx.size, dtype=np.int64)
    z = np.empty(idx.size + 1)
    v[0] = idx[0]
    z[0] = -np.inf
    z[1] = np.inf
    k = 0
    for q in idx[1:]:
        while True:
            vk = v[k]
            s = ((f[q] + weight * q * q) - (f[vk] + weight * vk * vk)) / (
                2.0 * weight * (q - vk)
            )
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        vk = v[k]
        d = q - vk
        out[q] = f[vk] + weight * d * d
    return out


def squared_edt(feature: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact squared Euclidean distance (mm^2) from every voxel to the
    nearest True voxel of `feature` (shape (nz, ny, nx)); spacing is
    (sx, sy, sz)."""
    if not feature.any():
        raise ValueError("squared_edt needs at least one feature voxel")
    sx, sy, sz = spacing
    d = np.where(feature, 0.0, np.inf)
    for axis, s in ((2, sx), (1, sy), (0, sz)):
        d = np.moveaxis(d, axis, -1)
        flat = d.reshape(-1, d.shape[-1])
        w = float(s) * float(s)
        for i in range(flat.shape[0]):
            if np.all(flat[i] == np.inf):
                continue
            flat[i] = _edt_1d_sq(flat[i], w)
        d = np.moveaxis(flat.reshape(d.shape), -1, axis)
    return d


def asd(a: LabelMask, b: LabelMask, label: int, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric average surface distance in mm: the mean over A's surface
    voxels of the distance to B's nearest surface voxel, averaged with the
    reverse direction."""
    if a.dims != b.dims:
        raise ValueError(f"asd: dims mismatch {a.dims} vs {b.dims}")
    surf_a = surface_voxels(a, label)
    surf_b = surface_voxels(b, label)
    if not surf_a.any() or not surf_b.any():
        raise ValueError(f"asd: label {label} is empty on one side")
    dt_b = np.sqrt(squared_edt(surf_b, spacing))
    dt_a = np.sqrt(squared_edt(surf_a, spacing))
    # fsum: correctly-rounded means, independent of accumulation order
    d_ab = math.fsum(dt_b[surf_a]) / int(surf_a.sum())
    d_ba = math.fsum(dt_a[surf_b]) / int(surf_b.sum())
    return 0.5 * (d_ab + d_ba)


def field_rmse(
    f: DeformationField, gt: DeformationField, mask: LabelMask | None = None
) -> float:
    """Root-mean-square of per-voxel displacement-vector differences, in
    voxels, optionally restricted to the mask's non-background voxels."""
    if f.dims != gt.dims:
        raise ValueError(f"field_rmse: dims mismatch {f.dims} vs {gt.dims}")
    diff = f.disp - gt.disp
    sq = (diff * diff).sum(axis=0)
    if mask is not None:
        if mask.dims != f.dims:
            raise ValueError(f"field_rmse: mask dims mismatch {mask.dims} vs {f.dims}")
        sel = mask.labels > 0
        if not sel.any():
            raise ValueError("field_rmse: mask selects no voxels")
        sq = sq[sel]
    return float(np.sqrt(sq.mean()))


EVAL_CSV_COLUMNS = (
    "case",
    "label",
    "dice_before",
    "dice_after",
    "asd_before",
    "asd_after",
    "field_rmse",
)


def write_eval_csv(reports: list[EvalReport], path):
    lines = [",".join(EVAL_CSV_COLUMNS)]
    for r in reports:
        rmse = "" if r.field_rmse is None else repr(r.field_rmse)
        lines.append(
            f"{r.case},{r.label},{r.dice_before!r},{r.dice_after!r},"
            f"{r.asd_before!r},{r.asd_after!r},{rmse}"
        )
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_eval_csv(path) -> list[EvalReport]:
    reports = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            reports.append(
                EvalReport(
                    case=row["case"],
                    label=int(row["label"]),
                    dice_before=float(row["dice_before"]),
                    dice_after=float(row["dice_after"]),
                    asd_before=float(row["asd_before"]),
                    asd_after=float(row["asd_after"]),
                    field_rmse=float(row["field_rmse"]) if row["field_rmse"] else None,
                )
            )
    return reports
