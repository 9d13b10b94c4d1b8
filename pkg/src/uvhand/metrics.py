"""Evaluation: Procrustes-aligned pose/mesh errors, PCK/PCV curves and AUC,
F-scores, orthographic depth rendering, and depth RMSE/PSNR.

Point coordinates are in meters everywhere; thresholds and reported errors
carry explicit mm/cm suffixes because the benchmark family mixes both.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError
from .mesh import TriMesh, HandTopology, regress_joints
from .transforms import apply_similarity, umeyama
from .warp import Camera


# ---------------------------------------------------------------------------
# alignment and point errors
# ---------------------------------------------------------------------------

def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align pred onto gt (rotation + translation + scale)."""
    rot, t, s = umeyama(np.asarray(pred, dtype=np.float64),
                        np.asarray(gt, dtype=np.float64), with_scale=True)
    return apply_similarity(pred, rot, t, s)


_UNIT_FACTORS = {"m": 1.0, "cm": 100.0, "mm": 1000.0}


def mean_euclidean_error(a: np.ndarray, b: np.ndarray, unit: str = "mm") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if unit not in _UNIT_FACTORS:
        raise ValueError(f"unit must be one of {sorted(_UNIT_FACTORS)}")
    return float(np.linalg.norm(a - b, axis=-1).mean() * _UNIT_FACTORS[unit])


# ---------------------------------------------------------------------------
# PCK / PCV
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PckCurve:
    thresholds_mm: np.ndarray
    fractions: np.ndarray

    def __post_init__(self):
        thr = np.asarray(self.thresholds_mm, dtype=np.float64)
        frac = np.asarray(self.fractions, dtype=np.float64)
        if thr.shape != frac.shape or thr.ndim != 1 or thr.size < 2:
            raise ShapeError("curve needs matching 1-d thresholds and fractions")
        if (np.diff(thr) <= 0).any():
            raise ShapeError("thresholds must be strictly ascending")
        if frac.min() < 0 or frac.max() > 1:
            raise ShapeError("fractions must lie in [0,1]")
        if (np.diff(frac) < -1e-12).any():
            raise ShapeError("fractions must be non-decreasing in the threshold")
        object.__setattr__(self, "thresholds_mm", thr)
        object.__setattr__(self, "fractions", frac)


def pck_auc(errors_mm: np.ndarray, max_threshold_mm: float = 50.0,
            step_mm: float = 1.0):
    """Pooled fraction-correct curve plus normalized trapezoidal AUC.

    errors_mm: per-keypoint (or per-vertex) errors, any shape, pooled over
    all entries. The curve runs 0..max threshold inclusive.
    """
    errors = np.asarray(errors_mm, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ShapeError("no errors to evaluate")
    if (errors < 0).any():
        raise ShapeError("errors must be nonnegative")
    n_steps = int(round(max_threshold_mm / step_mm))
    thresholds = np.arange(n_steps + 1) * step_mm
    fractions = (errors[None, :] <= thresholds[:, None] + 1e-12).mean(axis=1)
    auc = float(np.trapezoid(fractions, thresholds) / (thresholds[-1] - thresholds[0]))
    return PckCurve(thresholds_mm=thresholds, fractions=fractions), auc


# ---------------------------------------------------------------------------
# F-score
# ---------------------------------------------------------------------------

def f_score(pred_verts: np.ndarray, gt_verts: np.ndarray, tau_mm: float) -> float:
    """Harmonic mean of precision (pred within tau of gt) and recall
    (gt within tau of pred); points in meters, threshold in millimeters."""
    pred = np.asarray(pred_verts, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_verts, dtype=np.float64).reshape(-1, 3)
    if pred.size == 0 or gt.size == 0:
        raise ShapeError("point sets must be non-empty")
    tau = tau_mm / 1000.0
    d_pred, _ = cKDTree(gt).query(pred)
    d_gt, _ = cKDTree(pred).query(gt)
    precision = float((d_pred <= tau).mean())
    recall = float((d_gt <= tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# depth rendering
# ---------------------------------------------------------------------------

@dataclass
class DepthMap:
    depth: np.ndarray                   # (H,W) meters
    valid: np.ndarray                   # (H,W) bool

    def __post_init__(self):
        depth = np.ascontiguousarray(np.asarray(self.depth, dtype=np.float64))
        valid = np.ascontiguousarray(np.asarray(self.valid, dtype=bool))
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ShapeError("depth and valid must be matching (H,W)")
        if valid.any():
            vals = depth[valid]
            if not np.isfinite(vals).all() or (vals <= 0).any():
                raise ShapeError("valid depths must be positive and finite")
        self.depth = depth
        self.valid = valid


def render_depth(mesh: TriMesh, camera: Camera, resolution: int) -> DepthMap:
    """Z-buffer the mesh from the camera: nearest surface (smallest z) wins.

    The camera looks along +z; vertex z is taken as depth and interpolated
    linearly in screen space, so all z must be positive (put the subject in
    front of the camera first).
    """
    if mesh.n_faces == 0:
        raise ShapeError("cannot render an empty mesh")
    if (mesh.vertices[:, 2] <= 0).any():
        raise ShapeError("all vertex z must be positive to render depth; "
                         "translate the mesh in front of the camera")
    H = W = int(resolution)
    xy = camera.project(mesh.vertices)
    z = mesh.vertices[:, 2]
    depth = np.full((H, W), np.inf)
    for f in range(mesh.n_faces):
        i0, i1, i2 = mesh.faces[f]
        x0, y0 = xy[i0]
        x1, y1 = xy[i1]
        x2, y2 = xy[i2]
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area2) < 1e-12:
            continue
        c0 = max(int(np.ceil(min(x0, x1, x2) - 1e-9)), 0)
        c1 = min(int(np.floor(max(x0, x1, x2) + 1e-9)), W - 1)
        r0 = max(int(np.ceil(min(y0, y1, y2) - 1e-9)), 0)
        r1 = min(int(np.floor(max(y0, y1, y2) + 1e-9)), H - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1 + 1, dtype=np.float64),
                                 np.arange(r0, r1 + 1, dtype=np.float64))
        l0 = ((x1 - cols) * (y2 - rows) - (x2 - cols) * (y1 - rows)) / area2
        l1 = ((x2 - cols) * (y0 - rows) - (x0 - cols) * (y2 - rows)) / area2
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        zf = l0 * z[i0] + l1 * z[i1] + l2 * z[i2]
        sub = depth[r0:r1 + 1, c0:c1 + 1]
        write = inside & (zf < sub)
        sub[write] = zf[write]
    valid = np.isfinite(depth)
    depth[~valid] = 0.0
    return DepthMap(depth=depth, valid=valid)


def depth_rmse_psnr(pred: DepthMap, gt: DepthMap):
    """(RMSE in mm, PSNR in dB) over the intersection of validity masks.

    PSNR peak is the ground-truth valid depth range; a zero-RMSE comparison
    reports the 99 dB display cap instead of infinity.
    """
    if pred.depth.shape != gt.depth.shape:
        raise ShapeError("depth maps differ in size")
    both = pred.valid & gt.valid
    if not both.any():
        raise ShapeError("depth maps share no valid pixels")
    diff = pred.depth[both] - gt.depth[both]
    rmse_m = float(np.sqrt((diff ** 2).mean()))
    gt_vals = gt.depth[gt.valid]
    peak = float(gt_vals.max() - gt_vals.min())
    if rmse_m == 0.0:
        psnr = 99.0
    elif peak <= 0.0:
        psnr = 0.0
    else:
        psnr = min(20.0 * np.log10(peak / rmse_m), 99.0)
    return rmse_m * 1000.0, float(psnr)


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------

def evaluate_hand(pred_mesh: TriMesh, gt_mesh: TriMesh, topology: HandTopology,
                  camera: Camera | None = None, depth_resolution: int = 128):
    """Standard report for one prediction: Procrustes-aligned joint and
    vertex errors (cm), PCK/PCV AUC over 0-50 mm, F@5/F@15, and depth
    RMSE/PSNR from a shared front view.

    Returns (report dict, curves dict). Depth rendering shifts both meshes by
    the same offset so everything sits in front of the camera.
    """
    if pred_mesh.n_vertices != gt_mesh.n_vertices:
        raise ShapeError("prediction and ground truth differ in vertex count")
    gt_joints = regress_joints(gt_mesh, topology)
    pred_joints = regress_joints(pred_mesh, topology)
    aligned_joints = procrustes_align(pred_joints, gt_joints)
    aligned_verts = procrustes_align(pred_mesh.vertices, gt_mesh.vertices)

    joint_err_mm = np.linalg.norm(aligned_joints - gt_joints, axis=1) * 1000.0
    vert_err_mm = np.linalg.norm(aligned_verts - gt_mesh.vertices, axis=1) * 1000.0
    pck_curve, auc_pck = pck_auc(joint_err_mm)
    pcv_curve, auc_pcv = pck_auc(vert_err_mm)

    if camera is None:
        span = gt_mesh.vertices.max(axis=0) - gt_mesh.vertices.min(axis=0)
        scale = 0.9 * depth_resolution / max(float(span[:2].max()), 1e-6)
        camera = Camera(scale=scale, principal=((depth_resolution - 1) / 2.0,) * 2,
                        image_size=depth_resolution)
    zmin = min(gt_mesh.vertices[:, 2].min(), float(np.min(aligned_verts[:, 2])))
    shift = np.array([0.0, 0.0, 0.5 - zmin])
    center = gt_mesh.vertices.mean(axis=0)
    offset = shift - np.array([center[0], center[1], 0.0])
    gt_depth = render_depth(gt_mesh.transformed(translation=offset), camera,
                            depth_resolution)
    pred_depth = render_depth(
        TriMesh(vertices=aligned_verts + offset, faces=pred_mesh.faces),
        camera, depth_resolution)
    rmse_mm, psnr_db = depth_rmse_psnr(pred_depth, gt_depth)

    report = {
        "pose_error_cm": float(joint_err_mm.mean() / 10.0),
        "mesh_error_cm": float(vert_err_mm.mean() / 10.0),
        "auc_pck": auc_pck,
        "auc_pcv": auc_pcv,
        "f5": f_score(aligned_verts, gt_mesh.vertices, 5.0),
        "f15": f_score(aligned_verts, gt_mesh.vertices, 15.0),
        "depth_rmse_mm": rmse_mm,
        "psnr_db": psnr_db,
    }
    return report, {"pck": pck_curve, "pcv": pcv_curve}


def save_metrics_json(path, report: dict):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_curves_csv(path, curves: dict):
    """One CSV with a threshold_mm column plus one column per curve."""
    names = sorted(curves)
    thr = curves[names[0]].thresholds_mm
    for name in names[1:]:
        if not np.array_equal(curves[name].thresholds_mm, thr):
            raise ShapeError("curves must share thresholds to export together")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold_mm", *names])
        for i, t in enumerate(thr):
            writer.writerow([f"{t:g}", *(f"{curves[n].fractions[i]:.6f}" for n in names)])
