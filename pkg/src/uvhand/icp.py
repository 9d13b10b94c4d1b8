"""Point-to-point ICP registration of a coarse mesh onto a dense scan,
plus PLY point-cloud I/O and an optional non-rigid refinement pass."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import FitError, FormatError, ShapeError
from .mesh import TriMesh, compute_edges
from .transforms import apply_similarity, umeyama


@dataclass
class PointCloud:
    points: np.ndarray                  # (N,3) meters
    normals: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must be (N,3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ShapeError("point cloud contains non-finite coordinates")
        self.points = pts
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
            if nrm.shape != pts.shape:
                raise ShapeError("normals must match points")
            if not np.isfinite(nrm).all():
                raise ShapeError("normals contain non-finite values")
            self.normals = nrm

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    tolerance: float = 1e-9             # meters; stop when residual improves less
    rejection_factor: float = 2.5       # correspondences beyond factor x median dropped
    estimate_scale: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.rejection_factor <= 0:
            raise ValueError("rejection_factor must be positive")


@dataclass
class IcpResult:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    fitted: TriMesh
    residuals: np.ndarray               # RMS correspondence distance per iteration
    converged: bool

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        return apply_similarity(points, self.rotation, self.translation, self.scale)


def _source_points(source):
    if isinstance(source, TriMesh):
        return source.vertices, source
    if isinstance(source, PointCloud):
        return source.points, None
    pts = np.asarray(source, dtype=np.float64)
    return pts.reshape(-1, 3), None


def icp_register(source, target: PointCloud, params: IcpParams = IcpParams()) -> IcpResult:
    """Register source (mesh or points) onto the target cloud.

    The search starts from a centroid-aligned (and, in scale mode,
    spread-matched) guess. Each iteration matches transformed source points
    to their nearest target point, drops correspondences beyond
    rejection_factor x median distance, and refits the cumulative similarity
    in closed form, falling back to an untrimmed refit when trimming would
    raise the residual. The residual is the root-mean-square correspondence
    distance over all source points: the untrimmed least-squares step cannot
    raise it, which keeps the history non-increasing. Three consecutive
    increases abort with the history attached to the error.
    """
    src, mesh = _source_points(source)
    if src.shape[0] < 3 or target.n_points < 3:
        raise FitError("ICP needs at least 3 points on both sides")
    tree = cKDTree(target.points)
    rot = np.eye(3)
    scale = 1.0
    if params.estimate_scale:
        # Spread-ratio guess keeps the first correspondence query meaningful
        # when the clouds differ in size; exact for noise-free copies.
        spread_src = float(np.sqrt(((src - src.mean(axis=0)) ** 2).sum(axis=1).mean()))
        tgt_c = target.points - target.points.mean(axis=0)
        spread_tgt = float(np.sqrt((tgt_c ** 2).sum(axis=1).mean()))
        if spread_src > 0 and spread_tgt > 0:
            scale = spread_tgt / spread_src
    # Initial guess aligns centroids: a rotation about a distant origin looks
    # like a large translation, and without the shift the first
    # nearest-neighbor query matches unrelated regions.
    t = target.points.mean(axis=0) - scale * src.mean(axis=0)
    residuals = []
    converged = False
    grow_streak = 0
    for _ in range(params.max_iterations):
        moved = apply_similarity(src, rot, t, scale)
        dist, idx = tree.query(moved)
        med = np.median(dist)
        keep = dist <= params.rejection_factor * med if med > 0 else np.ones(len(dist), bool)
        if keep.sum() < 3:
            raise FitError("too few inlier correspondences after rejection")
        # The trimmed refit is robust but can raise the overall residual when
        # the inlier set shifts; the untrimmed refit never raises the
        # mean-square distance, so take whichever lands lower.
        candidates = [umeyama(src[keep], target.points[idx[keep]],
                              with_scale=params.estimate_scale)]
        if not keep.all():
            candidates.append(umeyama(src, target.points[idx],
                                      with_scale=params.estimate_scale))
        res = np.inf
        for cand in candidates:
            cand_dist, _ = tree.query(apply_similarity(src, *cand))
            cand_res = float(np.sqrt((cand_dist ** 2).mean()))
            if cand_res < res:
                rot, t, scale = cand
                res = cand_res
        if residuals:
            if res > residuals[-1] + params.tolerance:
                # growth is not convergence: keep iterating so the abort
                # below can see a genuine three-step divergence
                grow_streak += 1
                if grow_streak >= 3:
                    raise FitError(
                        "ICP diverged: residual grew 3 consecutive iterations "
                        f"(history tail: {[f'{r:.3e}' for r in residuals[-3:]] + [f'{res:.3e}']})")
            else:
                grow_streak = 0
                if residuals[-1] - res < params.tolerance:
                    residuals.append(res)
                    converged = True
                    break
        residuals.append(res)
    fitted_pts = apply_similarity(src, rot, t, scale)
    fitted = TriMesh(vertices=fitted_pts, faces=mesh.faces) if mesh is not None \
        else TriMesh(vertices=fitted_pts, faces=np.empty((0, 3), dtype=np.int64))
    return IcpResult(rotation=rot, translation=t, scale=scale, fitted=fitted,
                     residuals=np.asarray(residuals), converged=converged)


def nonrigid_refine(mesh: TriMesh, target: PointCloud, smoothness: float = 0.5,
                    iterations: int = 10) -> TriMesh:
    """Per-vertex snap to the nearest scan point, blended with a uniform
    Laplacian pull toward the 1-ring average. An interpretation layer on top
    of rigid ICP, for scans with genuine surface detail; keep the smoothness
    weight at 0.5 unless the scan is very clean.
    """
    if not 0.0 <= smoothness <= 1.0:
        raise ValueError("smoothness must be in [0,1]")
    edges = compute_edges(mesh).edges
    tree = cKDTree(target.points)
    verts = mesh.vertices.copy()
    deg = np.zeros(mesh.n_vertices)
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    deg = np.maximum(deg, 1.0)[:, None]
    for _ in range(iterations):
        _, idx = tree.query(verts)
        snapped = target.points[idx]
        ring = np.zeros_like(verts)
        np.add.at(ring, edges[:, 0], verts[edges[:, 1]])
        np.add.at(ring, edges[:, 1], verts[edges[:, 0]])
        verts = (1.0 - smoothness) * snapped + smoothness * (ring / deg)
    return TriMesh(vertices=verts, faces=mesh.faces)


# ---------------------------------------------------------------------------
# PLY I/O (vertex element only; ascii and binary little-endian)
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
    "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "int16": ("<i2", 2),
    "ushort": ("<u2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4),
    "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def save_ply(path, cloud: PointCloud, binary: bool = True):
    pts = cloud.points
    has_normals = cloud.normals is not None
    props = ["property float x", "property float y", "property float z"]
    if has_normals:
        props += ["property float nx", "property float ny", "property float nz"]
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(pts)}", *props, "end_header"]
    cols = np.hstack([pts, cloud.normals]) if has_normals else pts
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(cols.astype("<f4").tobytes())
        else:
            body = "\n".join(" ".join(f"{v:.9g}" for v in row) for row in cols)
            fh.write((body + "\n").encode("ascii"))


def load_ply(path) -> PointCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    end = blob.index(b"\n", end) + 1
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end:]

    fmt = None
    n_verts = None
    props = []                  # (name, numpy dtype str, size) of the vertex element
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"{path}: unsupported PLY format {parts[1]!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                if n_verts is not None:
                    raise FormatError(f"{path}: multiple vertex elements")
                n_verts = int(parts[2])
                in_vertex = True
            else:
                if n_verts is None and int(parts[2]) > 0:
                    raise FormatError(
                        f"{path}: element {parts[1]!r} precedes vertex data; unsupported layout")
                in_vertex = False
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise FormatError(f"{path}: list property on vertex element unsupported")
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unknown property type {parts[1]!r}")
            props.append((parts[2], *_PLY_TYPES[parts[1]]))
    if fmt is None or n_verts is None:
        raise FormatError(f"{path}: missing format or vertex element")
    names = [p[0] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError(f"{path}: vertex element lacks {axis!r}")

    if fmt == "ascii":
        rows = body.decode("ascii", errors="replace").split()
        want = n_verts * len(props)
        if len(rows) < want:
            raise FormatError(f"{path}: truncated ASCII vertex data")
        table = np.asarray(rows[:want], dtype=np.float64).reshape(n_verts, len(props))
        cols = {name: table[:, i] for i, (name, _, _) in enumerate(props)}
    else:
        rec = np.dtype([(name, dt) for name, dt, _ in props])
        want = n_verts * rec.itemsize
        if len(body) < want:
            raise FormatError(f"{path}: truncated binary vertex data "
                              f"(need {want} bytes, have {len(body)})")
        table = np.frombuffer(body, dtype=rec, count=n_verts)
        cols = {name: table[name].astype(np.float64) for name, _, _ in props}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return PointCloud(points=pts, normals=normals)
