"""Pose-estimation metrics: box IoU, rotation/translation error, aggregates and exports."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from inklpose.errors import ArgumentError, FormatError, ShapeError
from inklpose.geometry import SimTransform, rot_y

IOU_THRESHOLDS = (25, 50, 75)
POSE_THRESHOLDS = ((5, 2), (5, 5), (10, 2), (10, 5))
COLOR_RANGE = 0.2

_CORNERS = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])


# -- 3D IoU -----------------------------------------------------------------

def box_corners(box: SimTransform) -> np.ndarray:
    """The 8 corners of the oriented box (centre t, axes R columns, extents s); [8, 3]."""
    return (_CORNERS * box.s.astype(np.float64)) @ box.R.astype(np.float64).T + box.t.astype(np.float64)


def _inside(points: np.ndarray, box: SimTransform) -> np.ndarray:
    local = (points - box.t.astype(np.float64)) @ box.R.astype(np.float64)
    return np.all(np.abs(local) <= 0.5 * box.s.astype(np.float64), axis=1)


def _pair_seed(a: SimTransform, b: SimTransform) -> int:
    buf = b"".join(np.ascontiguousarray(x, dtype=np.float64).tobytes() for x in (a.R, a.t, a.s, b.R, b.t, b.s))
    return zlib.crc32(buf)


def _unit_samples(n: int, seed: int) -> np.ndarray:
    # scrambled Halton points: deterministic and lower variance than i.i.d. draws
    return qmc.Halton(d=3, scramble=True, seed=seed).random(n)


def _mc_iou(a: SimTransform, b: SimTransform, unit: np.ndarray) -> float:
    corners = np.concatenate([box_corners(a), box_corners(b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = lo + unit * (hi - lo)
    ia = _inside(pts, a)
    ib = _inside(pts, b)
    union = np.count_nonzero(ia | ib)
    if union == 0:
        return 0.0
    return np.count_nonzero(ia & ib) / union


def iou3d(a: SimTransform, b: SimTransform, symmetric: bool = False, n_samples: int = 100_000,
          sweep_deg: float = 10.0) -> float:
    """Monte-Carlo IoU of two oriented boxes.

    Points are drawn over the axis-aligned bounds of both boxes with a seed
    derived from the pair.  With ``symmetric`` the first (predicted) box is
    rotated about its own y axis in ``sweep_deg`` steps and the best IoU kept.
    """
    unit = _unit_samples(n_samples, _pair_seed(a, b))
    if not symmetric:
        return float(_mc_iou(a, b, unit))
    steps = int(round(360.0 / sweep_deg))
    best = 0.0
    for k in range(steps):
        turned = SimTransform(a.R.astype(np.float64) @ rot_y(np.deg2rad(k * sweep_deg)), a.t, a.s)
        best = max(best, _mc_iou(turned, b, unit))
    return float(best)


def iou_axis_aligned(a: SimTransform, b: SimTransform) -> float:
    """Exact IoU for boxes whose rotations are the identity (interval overlap product)."""
    for box in (a, b):
        if not np.allclose(box.R, np.eye(3)):
            raise ArgumentError("iou_axis_aligned needs identity rotations")
    lo = np.maximum(a.t - a.s / 2, b.t - b.s / 2)
    hi = np.minimum(a.t + a.s / 2, b.t + b.s / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(a.s) + np.prod(b.s)) - inter
    return inter / union


# -- pose errors ------------------------------------------------------------

def rotation_error_deg(R_pred, R_gt, symmetric: bool = False) -> float:
    R_pred = np.asarray(R_pred, dtype=np.float64)
    R_gt = np.asarray(R_gt, dtype=np.float64)
    if symmetric:
        # rotating the prediction about its y axis cannot change its y column,
        # and the best such rotation leaves exactly the angle between y axes
        c = float(R_pred[:, 1] @ R_gt[:, 1]) / (np.linalg.norm(R_pred[:, 1]) * np.linalg.norm(R_gt[:, 1]))
    else:
        c = (np.trace(R_pred.T @ R_gt) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def pose_errors(pred, gt: SimTransform, symmetric: bool = False) -> tuple[float, float]:
    """(rotation error in degrees, translation error in cm)."""
    rot = rotation_error_deg(pred.R, gt.R, symmetric)
    trans = 100.0 * float(np.linalg.norm(np.asarray(pred.t, dtype=np.float64) - gt.t))
    return rot, trans


# -- report -------------------------------------------------------------------

@dataclass
class InstanceResult:
    category: str
    iou: float
    rot_err_deg: float
    trans_err_cm: float
    nocs_kpt_errors: list = field(default_factory=list)
    instance_id: int = -1


@dataclass
class EvalReport:
    per_instance: list
    aggregates: dict


def metric_names() -> list[str]:
    return [f"IoU{t}" for t in IOU_THRESHOLDS] + [f"{n}°{m}cm" for n, m in POSE_THRESHOLDS]


def _passes(row: InstanceResult) -> dict[str, bool]:
    out = {f"IoU{t}": row.iou > t / 100.0 for t in IOU_THRESHOLDS}
    for n, m in POSE_THRESHOLDS:
        out[f"{n}°{m}cm"] = row.rot_err_deg < n and row.trans_err_cm < m
    return out


def _percentages(rows) -> dict[str, float]:
    hits = [_passes(r) for r in rows]
    return {k: 100.0 * sum(h[k] for h in hits) / len(rows) for k in metric_names()}


def aggregate(rows) -> dict:
    """Percent of instances passing each threshold: overall, per category and mean over categories."""
    rows = list(rows)
    if not rows:
        raise ArgumentError("cannot aggregate an empty report")
    cats = sorted({r.category for r in rows})
    per_cat = {c: _percentages([r for r in rows if r.category == c]) for c in cats}
    mean_cat = {k: float(np.mean([per_cat[c][k] for c in cats])) for k in metric_names()}
    return {"overall": _percentages(rows), "per_category": per_cat, "mean_category": mean_cat}


def is_monotone(agg: dict) -> bool:
    """Looser thresholds never score below stricter ones."""
    pairs = [("IoU25", "IoU50"), ("IoU50", "IoU75"), ("10°5cm", "5°5cm"), ("5°5cm", "5°2cm"),
             ("10°5cm", "10°2cm"), ("10°2cm", "5°2cm")]
    blocks = [agg["overall"], agg["mean_category"], *agg["per_category"].values()]
    return all(b[lo] >= b[hi] for b in blocks for lo, hi in pairs)


def write_report(report: EvalReport, path) -> None:
    """One JSON record per instance, then one ``{"aggregate": ...}`` record."""
    lines = [json.dumps(asdict(r), ensure_ascii=False) for r in report.per_instance]
    lines.append(json.dumps({"aggregate": report.aggregates}, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path) -> EvalReport:
    rows, agg = [], None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if "aggregate" in rec:
            agg = rec["aggregate"]
        else:
            rows.append(InstanceResult(**rec))
    if agg is None:
        raise FormatError(f"{path}: missing aggregate record")
    return EvalReport(rows, agg)


def format_summary(agg: dict) -> str:
    names = metric_names()
    head = f"{'category':<10}" + "".join(f"{n:>9}" for n in names)
    lines = [head]
    for label, block in [*agg["per_category"].items(), ("mean", agg["mean_category"]), ("all", agg["overall"])]:
        lines.append(f"{label:<10}" + "".join(f"{block[n]:9.1f}" for n in names))
    return "\n".join(lines)


# -- keypoint colours and PLY -----------------------------------------------------

def nocs_error_colors(pred_nocs, gt_nocs) -> np.ndarray:
    """Green at zero error to red at ``COLOR_RANGE`` and beyond; uint8 [N, 3], round half up."""
    pred = np.asarray(pred_nocs, dtype=np.float64)
    gt = np.asarray(gt_nocs, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ShapeError(f"nocs arrays must both be [N, 3], got {pred.shape} and {gt.shape}")
    frac = np.clip(np.linalg.norm(pred - gt, axis=1) / COLOR_RANGE, 0.0, 1.0)
    red = np.floor(255.0 * frac + 0.5)
    green = np.floor(255.0 * (1.0 - frac) + 0.5)
    return np.stack([red, green, np.zeros_like(red)], axis=1).astype(np.uint8)


def write_ply(path, points, colors) -> None:
    """ASCII PLY with float xyz and uchar rgb per vertex."""
    pts = np.asarray(points, dtype=np.float64)
    col = np.asarray(colors)
    if pts.ndim != 2 or pts.shape[1] != 3 or col.shape != pts.shape:
        raise ShapeError(f"points {pts.shape} and colors {col.shape} must both be [N, 3]")
    if col.min(initial=0) < 0 or col.max(initial=0) > 255:
        raise ArgumentError("colors must lie in [0, 255]")
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    body = [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(c[0])} {int(c[1])} {int(c[2])}" for p, c in zip(pts, col)]
    Path(path).write_text("\n".join(header + body) + "\n", encoding="ascii")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse the ASCII PLY written by :func:`write_ply`."""
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != "ply" or lines[1] != "format ascii 1.0":
        raise FormatError(f"{path}: not an ASCII PLY file")
    try:
        end = lines.index("end_header")
    except ValueError:
        raise FormatError(f"{path}: missing end_header") from None
    count = None
    for line in lines[:end]:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    rows = [line.split() for line in lines[end + 1:end + 1 + count]]
    if len(rows) != count or any(len(r) != 6 for r in rows):
        raise FormatError(f"{path}: expected {count} vertex rows of 6 values")
    data = np.array(rows, dtype=np.float64)
    return data[:, :3], data[:, 3:].astype(np.uint8)
