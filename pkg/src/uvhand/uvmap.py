"""Encoding meshes as UV position maps and decoding them back.

A UV position map is a small image whose pixels store normalized XYZ surface
coordinates. Encoding rasterizes the mesh over a fixed 2D template (one UV
coordinate per template vertex, seams allowed via duplicated copies of mesh
vertices); decoding bilinearly samples the map at each template vertex and
averages the seam copies.

Pixel conventions: pixel (row i, col j) has center (u,v) = ((j+0.5)/W,
(i+0.5)/H); v indexes rows top-down. Sampling at uv coordinate (u,v) reads
continuous pixel position (u*W-0.5, v*H-0.5).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import scipy.sparse
import scipy.sparse.linalg
from scipy.spatial import cKDTree

from .errors import FormatError, MeshError, ShapeError, TemplateError
from .mesh import TriMesh, compute_edges

DEFAULT_HALF_EXTENT = 0.20  # meters; generous for an adult hand at the origin

# fixed neighbor priority for the one-pixel extrapolation band: (dx, dy),
# 4-connected first so axis neighbors beat diagonals, then reading order
_BAND_PRIORITY = ((0, -1), (-1, 0), (1, 0), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1))


# ---------------------------------------------------------------------------
# normalization cube
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationCube:
    """Axis-aligned cube mapping world coordinates to the [0,1]^3 value range."""

    center: tuple = (0.0, 0.0, 0.0)
    half_extent: float = DEFAULT_HALF_EXTENT

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        object.__setattr__(self, "center", tuple(float(v) for v in c))
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")

    @classmethod
    def from_mesh(cls, mesh_or_points, margin: float = 0.05) -> "NormalizationCube":
        """Tight cube around the points, inflated by `margin` relative."""
        pts = mesh_or_points.vertices if hasattr(mesh_or_points, "vertices") else mesh_or_points
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * float((hi - lo).max()) * (1.0 + margin)
        if half <= 0:
            half = 1e-6
        return cls(center=tuple(center), half_extent=half)

    @property
    def bbox_min(self) -> np.ndarray:
        return np.asarray(self.center) - self.half_extent

    @property
    def bbox_max(self) -> np.ndarray:
        return np.asarray(self.center) + self.half_extent

    @property
    def diagonal(self) -> float:
        return 2.0 * self.half_extent * float(np.sqrt(3.0))


def normalize_coords(points: np.ndarray, cube: NormalizationCube,
                     max_clamp_fraction: float = 0.01):
    """Map world points into [0,1]^3. Returns (values, n_clamped_coords).

    Raises MeshError when more than `max_clamp_fraction` of the coordinates
    fall outside the cube; a few clamped coordinates are tolerated because the
    extrapolation band can poke slightly past the surface bounds.
    """
    p = np.asarray(points, dtype=np.float64)
    vals = (p - cube.bbox_min) / (2.0 * cube.half_extent)
    outside = (vals < 0.0) | (vals > 1.0)
    n_clamped = int(outside.sum())
    if vals.size and n_clamped > max_clamp_fraction * vals.size:
        raise MeshError(
            f"{n_clamped}/{vals.size} coordinates fall outside the normalization cube; "
            "enlarge the cube or recenter the mesh")
    return np.clip(vals, 0.0, 1.0), n_clamped


def denormalize_coords(values: np.ndarray, cube: NormalizationCube) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return cube.bbox_min + v * (2.0 * cube.half_extent)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UVTemplate:
    """Fixed 2D layout for a mesh topology.

    Template vertices are chart points; several template vertices may map to
    the same mesh vertex (seam copies). `faces` index template vertices,
    `mesh_faces` the corresponding mesh vertices, and the two stay aligned
    row for row.
    """

    uv: np.ndarray            # (T,2) in [0,1]
    faces: np.ndarray         # (F,3) template indices
    vert_map: np.ndarray      # (T,) template -> mesh vertex
    n_mesh_verts: int
    form_id: str = "custom"
    mesh_faces: np.ndarray = field(default=None)

    def __post_init__(self):
        uv = np.ascontiguousarray(np.asarray(self.uv, dtype=np.float64))
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        vert_map = np.ascontiguousarray(np.asarray(self.vert_map, dtype=np.int64))
        if uv.ndim != 2 or uv.shape[1] != 2:
            raise ShapeError(f"template uv must be (T,2), got {uv.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ShapeError(f"template faces must be (F,3), got {faces.shape}")
        if vert_map.shape != (uv.shape[0],):
            raise ShapeError("vert_map must have one entry per template vertex")
        if uv.size and (uv.min() < -1e-9 or uv.max() > 1.0 + 1e-9):
            raise TemplateError("template uv coordinates must lie in [0,1]")
        if faces.size and (faces.min() < 0 or faces.max() >= uv.shape[0]):
            raise TemplateError("template face index out of range")
        if vert_map.size and (vert_map.min() < 0 or vert_map.max() >= self.n_mesh_verts):
            raise TemplateError("vert_map index out of range")
        counts = np.bincount(vert_map, minlength=self.n_mesh_verts)
        if (counts == 0).any():
            missing = int(np.argmin(counts))
            raise TemplateError(f"mesh vertex {missing} has no chart copy")
        mesh_faces = self.mesh_faces
        if mesh_faces is None:
            mesh_faces = vert_map[faces]
        else:
            mesh_faces = np.ascontiguousarray(np.asarray(mesh_faces, dtype=np.int64))
            if not np.array_equal(mesh_faces, vert_map[faces]):
                raise TemplateError("mesh_faces disagree with vert_map[faces]")
        object.__setattr__(self, "uv", np.clip(uv, 0.0, 1.0))
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "vert_map", vert_map)
        object.__setattr__(self, "mesh_faces", mesh_faces)

    @property
    def n_template_verts(self) -> int:
        return self.uv.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def check_mesh(self, mesh: TriMesh):
        """Raise TemplateError unless the mesh has exactly this connectivity."""
        if mesh.n_vertices != self.n_mesh_verts:
            raise TemplateError(
                f"template expects {self.n_mesh_verts} mesh vertices, mesh has {mesh.n_vertices}")
        if not np.array_equal(mesh.faces, self.mesh_faces):
            raise TemplateError("mesh faces do not match the template connectivity")


def _tutte_embed(faces: np.ndarray, n_verts: int, boundary: np.ndarray,
                 boundary_uv: np.ndarray) -> np.ndarray:
    """Uniform-weight Tutte embedding with the boundary pinned.

    Convex boundary placement keeps the embedding injective for triangulated
    disks, which is what the rasterizer's one-owner-per-pixel rule relies on.
    """
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    is_boundary = np.zeros(n_verts, dtype=bool)
    is_boundary[boundary] = True
    interior = np.nonzero(~is_boundary)[0]
    uv = np.zeros((n_verts, 2))
    uv[boundary] = boundary_uv
    if interior.size == 0:
        return uv
    pos = -np.ones(n_verts, dtype=np.int64)
    pos[interior] = np.arange(interior.size)

    rows, cols, vals = [], [], []
    rhs = np.zeros((interior.size, 2))
    deg = np.zeros(n_verts)
    np.add.at(deg, edges[:, 0], 1.0)
    np.add.at(deg, edges[:, 1], 1.0)
    for a, b in edges:
        for i, j in ((a, b), (b, a)):
            if is_boundary[i]:
                continue
            if is_boundary[j]:
                rhs[pos[i]] += uv[j]
            else:
                rows.append(pos[i])
                cols.append(pos[j])
                vals.append(-1.0)
    rows.extend(pos[interior])
    cols.extend(pos[interior])
    vals.extend(deg[interior])
    lap = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(interior.size, interior.size))
    sol = scipy.sparse.linalg.spsolve(lap, rhs)
    uv[interior] = np.asarray(sol).reshape(interior.size, 2)
    return uv


def _single_boundary_loop(mesh: TriMesh) -> np.ndarray:
    edges = compute_edges(mesh)
    loops = edges.boundary_loops()
    if len(loops) == 0:
        raise TemplateError(
            "mesh has no boundary; closed surfaces need the two-chart form UV3")
    if len(loops) > 1:
        raise TemplateError(f"mesh has {len(loops)} boundary loops, expected 1")
    return loops[0]


def _circle_boundary(loop: np.ndarray, mesh: TriMesh, uniform: bool,
                     center=(0.5, 0.5), radius: float = 0.48) -> np.ndarray:
    n = len(loop)
    if uniform:
        t = np.arange(n) / n
    else:
        seg = np.linalg.norm(mesh.vertices[np.roll(loop, -1)] - mesh.vertices[loop], axis=1)
        total = seg.sum()
        if total <= 0:
            raise TemplateError("boundary loop has zero length")
        t = np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / total
    ang = 2.0 * np.pi * t
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _squircle_boundary(loop: np.ndarray, mesh: TriMesh, radius: float = 0.40,
                       power: float = 4.0) -> np.ndarray:
    """Rounded-square (superellipse) boundary with chord-length spacing.

    Strict convexity matters: flat boundary segments would let faces whose
    three corners all sit on the boundary collapse to zero UV area, which
    breaks the one-owner-per-pixel partition.
    """
    seg = np.linalg.norm(mesh.vertices[np.roll(loop, -1)] - mesh.vertices[loop], axis=1)
    total = seg.sum()
    if total <= 0:
        raise TemplateError("boundary loop has zero length")
    t = np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / total
    ang = 2.0 * np.pi * t
    r = radius / (np.abs(np.cos(ang)) ** power + np.abs(np.sin(ang)) ** power) ** (1.0 / power)
    return np.stack([0.5 + r * np.cos(ang), 0.5 + r * np.sin(ang)], axis=1)


def _chart_from_faces(mesh: TriMesh, face_ids: np.ndarray):
    """Reindex a face subset into a standalone chart (local verts, local faces)."""
    sub = mesh.faces[face_ids]
    verts = np.unique(sub)
    local = -np.ones(mesh.n_vertices, dtype=np.int64)
    local[verts] = np.arange(verts.size)
    return verts, local[sub]


def make_template(mesh: TriMesh, form: str = "UV1") -> UVTemplate:
    """Build one of the built-in chart layouts for this mesh topology.

    UV1: single chart, circle boundary, uniform angular spacing.
    UV2: single chart, rounded-square boundary, chord-length spacing.
    UV3: two charts split by a centroid plane, packed side by side; works for
         closed surfaces and duplicates the cut vertices in both charts.
    """
    if form in ("UV1", "UV2"):
        loop = _single_boundary_loop(mesh)
        if form == "UV1":
            buv = _circle_boundary(loop, mesh, uniform=True)
        else:
            buv = _squircle_boundary(loop, mesh)
        uv = _tutte_embed(mesh.faces, mesh.n_vertices, loop, buv)
        return UVTemplate(uv=uv, faces=mesh.faces, vert_map=np.arange(mesh.n_vertices),
                          n_mesh_verts=mesh.n_vertices, form_id=form)
    if form != "UV3":
        raise TemplateError(f"unknown template form {form!r}; expected UV1, UV2 or UV3")

    if mesh.n_faces < 2:
        raise TemplateError("UV3 needs at least two faces to form two charts")
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    extent_order = np.argsort(centroids.max(axis=0) - centroids.min(axis=0))[::-1]
    last_err = None
    for axis in extent_order:
        # rank-based half split: robust to centroid ties, loud when the
        # halves fail to be disk charts
        order = np.argsort(centroids[:, axis], kind="stable")
        half = mesh.n_faces // 2
        side_a = np.zeros(mesh.n_faces, dtype=bool)
        side_a[order[:half]] = True
        try:
            return _pack_two_charts(mesh, side_a)
        except TemplateError as exc:
            last_err = exc
    raise TemplateError(f"no axis split yields two disk charts: {last_err}")


def _pack_two_charts(mesh: TriMesh, side_a: np.ndarray) -> UVTemplate:
    all_uv, all_vm, all_faces = [], [], []
    offset = 0
    centers = ((0.27, 0.5), (0.73, 0.5))
    for chart_id, face_ids in enumerate((np.nonzero(side_a)[0], np.nonzero(~side_a)[0])):
        verts, local_faces = _chart_from_faces(mesh, face_ids)
        chart = TriMesh(vertices=mesh.vertices[verts], faces=local_faces)
        edges = compute_edges(chart)
        loops = edges.boundary_loops()
        if len(loops) != 1:
            raise TemplateError(
                f"chart {chart_id} of the UV3 split has {len(loops)} boundary loops; "
                "this topology needs a custom template")
        buv = _circle_boundary(loops[0], chart, uniform=False,
                               center=centers[chart_id], radius=0.22)
        uv = _tutte_embed(chart.faces, chart.n_vertices, loops[0], buv)
        if not (np.isfinite(uv).all() and uv.min() >= 0.0 and uv.max() <= 1.0):
            raise TemplateError(f"chart {chart_id} embedding left the unit square")
        all_uv.append(uv)
        all_vm.append(verts)
        all_faces.append(local_faces + offset)
        offset += chart.n_vertices
    faces = np.concatenate(all_faces)
    # keep face order aligned with the mesh: chart faces were emitted
    # grouped, so restore original face ids before building the template
    restore = np.empty(mesh.n_faces, dtype=np.int64)
    restore[np.concatenate([np.nonzero(side_a)[0], np.nonzero(~side_a)[0]])] = \
        np.arange(mesh.n_faces)
    faces = faces[restore]
    return UVTemplate(uv=np.concatenate(all_uv), faces=faces,
                      vert_map=np.concatenate(all_vm), n_mesh_verts=mesh.n_vertices,
                      form_id="UV3")


def make_fallback_template(mesh: TriMesh) -> UVTemplate:
    """Default layout when no curated template is available.

    Single-chart meshes get UV1; closed surfaces fall through to the
    two-chart UV3 split.
    """
    try:
        return make_template(mesh, "UV1")
    except TemplateError:
        tpl = make_template(mesh, "UV3")
        return UVTemplate(uv=tpl.uv, faces=tpl.faces, vert_map=tpl.vert_map,
                          n_mesh_verts=tpl.n_mesh_verts, form_id="fallback")


def save_template(template: UVTemplate, path, mesh: TriMesh | None = None):
    """Write the template as a Wavefront OBJ with vt entries.

    One `v` line per mesh vertex (positions from `mesh` when given, zeros
    otherwise), one `vt` line per template vertex, faces as v/vt references.
    """
    if mesh is not None:
        template.check_mesh(mesh)
        positions = mesh.vertices
    else:
        positions = np.zeros((template.n_mesh_verts, 3))
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in positions]
    lines += [f"vt {u:.9g} {v:.9g}" for u, v in template.uv]
    for mf, tf in zip(template.mesh_faces, template.faces):
        lines.append("f " + " ".join(f"{mv + 1}/{tv + 1}" for mv, tv in zip(mf, tf)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_template(path) -> UVTemplate:
    """Read a template OBJ written by save_template (v/vt faces required)."""
    verts, uvs, faces_v, faces_vt = _parse_template_obj(path)
    if uvs is None or faces_vt is None:
        raise FormatError(f"{path}: template OBJ needs vt coordinates on every face")
    vert_map = -np.ones(uvs.shape[0], dtype=np.int64)
    for fv, ft in zip(faces_v, faces_vt):
        for mv, tv in zip(fv, ft):
            if vert_map[tv] == -1:
                vert_map[tv] = mv
            elif vert_map[tv] != mv:
                raise FormatError(
                    f"{path}: vt index {tv + 1} is shared by mesh vertices "
                    f"{vert_map[tv] + 1} and {mv + 1}")
    used = vert_map >= 0
    if not used.all():
        # drop unreferenced vt entries, remapping face indices
        remap = -np.ones(uvs.shape[0], dtype=np.int64)
        remap[used] = np.arange(int(used.sum()))
        uvs = uvs[used]
        vert_map = vert_map[used]
        faces_vt = remap[faces_vt]
    return UVTemplate(uv=uvs, faces=np.asarray(faces_vt), vert_map=vert_map,
                      n_mesh_verts=verts.shape[0], form_id="file",
                      mesh_faces=np.asarray(faces_v))


def _parse_template_obj(path):
    from .mesh import parse_obj
    return parse_obj(path)


def interior_vertex_mask(template: UVTemplate, resolution: int,
                         min_pixels: float = 1.5) -> np.ndarray:
    """Mesh vertices whose every chart copy sits well inside the chart.

    "Inside" means at least `min_pixels` (at the given resolution) away from
    every chart-boundary segment in UV space. Round-trip accuracy guarantees
    only apply to these vertices; near the boundary the codec leans on the
    extrapolation band.
    """
    faces = template.faces
    halfedges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    halfedges = np.sort(halfedges, axis=1)
    uniq, counts = np.unique(halfedges, axis=0, return_counts=True)
    boundary_edges = uniq[counts == 1]
    tpl_interior = np.ones(template.n_template_verts, dtype=bool)
    if boundary_edges.size:
        px = template.uv * resolution
        a = px[boundary_edges[:, 0]]                    # (S,2)
        b = px[boundary_edges[:, 1]]
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-30)
        p = px[:, None, :]                              # (T,1,2)
        t = ((p - a[None]) * ab[None]).sum(axis=2) / denom
        t = np.clip(t, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        dist = np.sqrt(((p - closest) ** 2).sum(axis=2)).min(axis=1)
        tpl_interior = dist >= min_pixels
    mesh_interior = np.ones(template.n_mesh_verts, dtype=bool)
    np.logical_and.at(mesh_interior, template.vert_map, tpl_interior)
    return mesh_interior


def subdivide_template(template: UVTemplate) -> UVTemplate:
    """Template for the edge-unpooled topology.

    New template vertices are UV edge midpoints; their mesh ids follow the
    same ascending-edge numbering that edge unpooling uses, so a subdivided
    template stays aligned with the unpooled mesh.
    """
    tfaces = template.faces
    tedges = np.concatenate([tfaces[:, [0, 1]], tfaces[:, [1, 2]], tfaces[:, [2, 0]]])
    tedges = np.unique(np.sort(tedges, axis=1), axis=0)
    tedge_index = {(int(a), int(b)): k for k, (a, b) in enumerate(tedges)}

    mesh_conn = TriMesh(vertices=np.zeros((template.n_mesh_verts, 3)),
                        faces=template.mesh_faces)
    medges = compute_edges(mesh_conn).edges
    medge_index = {(int(a), int(b)): k for k, (a, b) in enumerate(medges)}

    T = template.n_template_verts
    mid_uv = 0.5 * (template.uv[tedges[:, 0]] + template.uv[tedges[:, 1]])
    mid_vm = np.empty(tedges.shape[0], dtype=np.int64)
    for k, (a, b) in enumerate(tedges):
        ma, mb = int(template.vert_map[a]), int(template.vert_map[b])
        key = (min(ma, mb), max(ma, mb))
        if key not in medge_index:
            raise TemplateError("template edge does not correspond to any mesh edge")
        mid_vm[k] = template.n_mesh_verts + medge_index[key]

    def mid(a, b):
        return T + tedge_index[(min(int(a), int(b)), max(int(a), int(b)))]

    new_faces = np.empty((4 * tfaces.shape[0], 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(tfaces):
        mab, mbc, mca = mid(a, b), mid(b, c), mid(c, a)
        new_faces[4 * i:4 * i + 4] = [(a, mab, mca), (b, mbc, mab),
                                      (c, mca, mbc), (mab, mbc, mca)]
    return UVTemplate(uv=np.concatenate([template.uv, mid_uv]),
                      faces=new_faces,
                      vert_map=np.concatenate([template.vert_map, mid_vm]),
                      n_mesh_verts=template.n_mesh_verts + medges.shape[0],
                      form_id=template.form_id)


# ---------------------------------------------------------------------------
# position maps
# ---------------------------------------------------------------------------

@dataclass
class UVPositionMap:
    """Image of normalized surface coordinates plus the chart occupancy mask.

    `mask` marks pixels whose center is owned by a chart face. A one-pixel
    extrapolation band around the mask also carries data (so that bilinear
    reads at the chart border see smooth values); everything further out is
    zero. Losses and warping should trust `mask`, not the raw data support.
    """

    data: np.ndarray                 # (H,W,3) normalized coordinates
    mask: np.ndarray                 # (H,W) bool, strict chart occupancy
    bbox: tuple                      # (min (3,), max (3,)) in meters

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim != 3 or data.shape[2] != 3:
            raise ShapeError(f"position map data must be (H,W,3), got {data.shape}")
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        if mask.shape != data.shape[:2]:
            raise ShapeError("mask shape must match data")
        if not np.isfinite(data).all():
            raise ShapeError("position map contains non-finite values")
        lo = np.asarray(self.bbox[0], dtype=np.float64).reshape(3)
        hi = np.asarray(self.bbox[1], dtype=np.float64).reshape(3)
        if not (hi > lo).all():
            raise ShapeError("bbox max must exceed bbox min on every axis")
        self.data = data
        self.mask = mask
        self.bbox = (lo, hi)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def cube(self) -> NormalizationCube:
        lo, hi = self.bbox
        return NormalizationCube(center=tuple(0.5 * (lo + hi)),
                                 half_extent=0.5 * float((hi - lo).max()))

    def points(self) -> np.ndarray:
        """Denormalized (H,W,3) world coordinates."""
        lo, hi = self.bbox
        return lo + self.data * (hi - lo)

    def sampling_region(self) -> np.ndarray:
        """Mask plus its one-pixel band: where data can be read bilinearly."""
        return scipy.ndimage.binary_dilation(self.mask, structure=np.ones((3, 3), dtype=bool))


def _barycentric(uv_face: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Barycentric coords of points (px,py) wrt a UV triangle. Returns
    (l0,l1,l2, area2); callers must skip faces with tiny |area2|."""
    (x0, y0), (x1, y1), (x2, y2) = uv_face
    area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area2
    l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area2
    l2 = 1.0 - l0 - l1
    return l0, l1, l2, area2


def rasterize_ownership(template: UVTemplate, resolution: int):
    """Assign each pixel center to at most one chart face.

    Returns (owner (H,W) int64 with -1 for unowned, bary (H,W,3)). Boundary
    ties are inclusive and the lowest face index wins, so the result is a
    deterministic partition of the covered pixels.
    """
    H = W = int(resolution)
    if H < 2:
        raise ShapeError("resolution must be at least 2")
    owner = -np.ones((H, W), dtype=np.int64)
    bary = np.zeros((H, W, 3))
    uv_px = np.empty_like(template.uv)
    uv_px[:, 0] = template.uv[:, 0] * W - 0.5   # continuous column
    uv_px[:, 1] = template.uv[:, 1] * H - 0.5   # continuous row
    for f in range(template.n_faces):
        tri = uv_px[template.faces[f]]
        c0 = max(int(np.ceil(tri[:, 0].min() - 1e-9)), 0)
        c1 = min(int(np.floor(tri[:, 0].max() + 1e-9)), W - 1)
        r0 = max(int(np.ceil(tri[:, 1].min() - 1e-9)), 0)
        r1 = min(int(np.floor(tri[:, 1].max() + 1e-9)), H - 1)
        if c1 < c0 or r1 < r0:
            continue
        cols, rows = np.meshgrid(np.arange(c0, c1 + 1), np.arange(r0, r1 + 1))
        l0, l1, l2, area2 = _barycentric(tri, cols.astype(np.float64), rows.astype(np.float64))
        if abs(area2) < 1e-12:
            continue
        inside = (l0 >= -1e-9) & (l1 >= -1e-9) & (l2 >= -1e-9)
        free = owner[r0:r1 + 1, c0:c1 + 1] == -1
        take = inside & free
        owner[r0:r1 + 1, c0:c1 + 1][take] = f
        sub = bary[r0:r1 + 1, c0:c1 + 1]
        sub[take] = np.stack([l0, l1, l2], axis=-1)[take]
    return owner, bary


def rasterize_mesh_to_uv(mesh: TriMesh, template: UVTemplate, resolution: int,
                         cube: NormalizationCube | None = None,
                         ownership=None) -> UVPositionMap:
    """Encode a mesh as a UV position map at the given square resolution.

    `ownership` accepts a precomputed rasterize_ownership(template,
    resolution) result; it depends only on the template and resolution, so
    callers encoding many meshes through one chart should share it.
    """
    template.check_mesh(mesh)
    if cube is None:
        cube = NormalizationCube.from_mesh(mesh)
    H = W = int(resolution)
    owner, bary = ownership if ownership is not None else rasterize_ownership(
        template, resolution)
    mask = owner >= 0

    data = np.zeros((H, W, 3))
    rows, cols = np.nonzero(mask)
    if rows.size:
        tri_verts = mesh.vertices[template.mesh_faces[owner[rows, cols]]]  # (P,3,3)
        pts = np.einsum("pk,pkc->pc", bary[rows, cols], tri_verts)
        vals, _ = normalize_coords(pts, cube)
        data[rows, cols] = vals

    # one-pixel extrapolation band: copy the neighbor's face and re-evaluate
    # its plane at this pixel's own center
    band_face = -np.ones((H, W), dtype=np.int64)
    for dx, dy in _BAND_PRIORITY:
        shifted = np.full((H, W), -1, dtype=np.int64)
        src_r = slice(max(dy, 0), H + min(dy, 0))
        src_c = slice(max(dx, 0), W + min(dx, 0))
        dst_r = slice(max(-dy, 0), H + min(-dy, 0))
        dst_c = slice(max(-dx, 0), W + min(-dx, 0))
        shifted[dst_r, dst_c] = owner[src_r, src_c]
        adopt = (~mask) & (band_face == -1) & (shifted >= 0)
        band_face[adopt] = shifted[adopt]
    brows, bcols = np.nonzero(band_face >= 0)
    if brows.size:
        uv_px = np.empty_like(template.uv)
        uv_px[:, 0] = template.uv[:, 0] * W - 0.5
        uv_px[:, 1] = template.uv[:, 1] * H - 0.5
        fids = band_face[brows, bcols]
        tris = uv_px[template.faces[fids]]                       # (P,3,2)
        px = bcols.astype(np.float64)
        py = brows.astype(np.float64)
        x0, y0 = tris[:, 0, 0], tris[:, 0, 1]
        x1, y1 = tris[:, 1, 0], tris[:, 1, 1]
        x2, y2 = tris[:, 2, 0], tris[:, 2, 1]
        area2 = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area2
        l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area2
        l2 = 1.0 - l0 - l1
        tri_verts = mesh.vertices[template.mesh_faces[fids]]
        pts = np.einsum("pk,pkc->pc", np.stack([l0, l1, l2], axis=1), tri_verts)
        vals = (pts - cube.bbox_min) / (2.0 * cube.half_extent)
        data[brows, bcols] = np.clip(vals, 0.0, 1.0)

    return UVPositionMap(data=data, mask=mask, bbox=(cube.bbox_min, cube.bbox_max))


def sample_uv_to_mesh(uvmap: UVPositionMap, template: UVTemplate,
                      return_info: bool = False):
    """Decode a position map back into a mesh on the template's topology.

    Each template vertex is read bilinearly with mask-weighted
    renormalization (corners outside the data support contribute nothing);
    vertices with no support in their 2x2 neighborhood fall back to the
    nearest supported pixel and are reported in the info dict.
    """
    region = uvmap.sampling_region()
    H, W = region.shape
    x = template.uv[:, 0] * W - 0.5
    y = template.uv[:, 1] * H - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx = x - x0
    wy = y - y0

    acc = np.zeros((template.n_template_verts, 3))
    wsum = np.zeros(template.n_template_verts)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            xi_c = np.clip(xi, 0, W - 1)
            yi_c = np.clip(yi, 0, H - 1)
            good = inb & region[yi_c, xi_c]
            w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            w = np.where(good, w, 0.0)
            acc += w[:, None] * uvmap.data[yi_c, xi_c]
            wsum += w

    supported = wsum > 1e-9
    vals = np.zeros_like(acc)
    vals[supported] = acc[supported] / wsum[supported, None]
    n_fallback = int((~supported).sum())
    if n_fallback:
        # fall back to the nearest strictly-masked pixel: band pixels are
        # only trustworthy on maps produced by the rasterizer
        rr, cc = np.nonzero(uvmap.mask)
        if rr.size == 0:
            raise TemplateError("position map has an empty mask; nothing to decode")
        tree = cKDTree(np.stack([cc, rr], axis=1))
        _, idx = tree.query(np.stack([x[~supported], y[~supported]], axis=1))
        vals[~supported] = uvmap.data[rr[idx], cc[idx]]

    # average seam copies back onto mesh vertices
    mesh_acc = np.zeros((template.n_mesh_verts, 3))
    np.add.at(mesh_acc, template.vert_map, vals)
    counts = np.bincount(template.vert_map, minlength=template.n_mesh_verts)
    verts_norm = mesh_acc / counts[:, None]
    lo, hi = uvmap.bbox
    verts = lo + verts_norm * (hi - lo)
    mesh = TriMesh(vertices=verts, faces=template.mesh_faces)
    if return_info:
        info = {"n_fallback": n_fallback, "fallback_verts": ~supported}
        return mesh, info
    return mesh


# ---------------------------------------------------------------------------
# UVP binary format
# ---------------------------------------------------------------------------

_UVP_MAGIC = b"UVP1"


def write_uvp(path, uvmap: UVPositionMap):
    """Binary position-map file: magic, u32 w/h/c, f32 bbox, u8 has_mask,
    f32 HxWx3 row-major channel-interleaved data, then u8 mask bytes.
    Little-endian throughout."""
    lo, hi = uvmap.bbox
    header = _UVP_MAGIC + struct.pack("<III", uvmap.width, uvmap.height, 3)
    header += struct.pack("<6f", *lo, *hi)
    header += struct.pack("<B", 1)
    payload = uvmap.data.astype("<f4").tobytes()
    payload += uvmap.mask.astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def read_uvp(path) -> UVPositionMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != _UVP_MAGIC:
        raise FormatError(f"{path}: not a UVP file (bad magic)")
    head_size = 4 + 12 + 24 + 1
    if len(blob) < head_size:
        raise FormatError(f"{path}: truncated UVP header")
    w, h, c = struct.unpack_from("<III", blob, 4)
    if c != 3:
        raise FormatError(f"{path}: expected 3 channels, found {c}")
    if w < 1 or h < 1 or w > 1 << 16 or h > 1 << 16:
        raise FormatError(f"{path}: implausible dimensions {w}x{h}")
    bbox_vals = struct.unpack_from("<6f", blob, 16)
    has_mask = blob[40]
    if has_mask not in (0, 1):
        raise FormatError(f"{path}: has_mask byte must be 0 or 1")
    need = head_size + 4 * w * h * 3 + (w * h if has_mask else 0)
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes, file has {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=w * h * 3, offset=head_size)
    data = data.reshape(h, w, 3).astype(np.float64)
    if has_mask:
        mask = np.frombuffer(blob, dtype=np.uint8, count=w * h,
                             offset=head_size + 4 * w * h * 3)
        mask = mask.reshape(h, w).astype(bool)
    else:
        mask = np.ones((h, w), dtype=bool)
    lo = np.asarray(bbox_vals[:3], dtype=np.float64)
    hi = np.asarray(bbox_vals[3:], dtype=np.float64)
    return UVPositionMap(data=data, mask=mask, bbox=(lo, hi))


def save_uv_png(path, uvmap: UVPositionMap):
    """16-bit PNG preview of the map (values scaled to the u16 range).

    Needs opencv-python; raises RuntimeError with an install hint otherwise.
    Channel order in the file follows the writer's convention (BGR for cv2),
    so this is a preview artifact, not an interchange format.
    """
    try:
        import cv2
    except ImportError as exc:
        raise RuntimeError(
            "PNG preview export requires opencv-python (pip install opencv-python)") from exc
    img = np.clip(uvmap.data, 0.0, 1.0)
    img16 = np.round(img * 65535.0).astype(np.uint16)
    if not cv2.imwrite(str(path), img16):
        raise RuntimeError(f"cv2 failed to write {path}")
