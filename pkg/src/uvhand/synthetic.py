"""Procedural test assets: a toy hand mesh with joint rules, a disk-topology
mesh with MANO-level vertex/face counts, deformation and scan generators.

Everything is deterministic given the seed; these assets stand in for the
licensed hand-model files a user would normally supply.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .errors import MeshError
from .mesh import HandTopology, TriMesh

_CELL = 0.016  # lattice cell size in meters; hand ends up ~16 cm tall


def _hand_cells() -> list:
    cells = [(x, y) for x in range(7) for y in range(6)]            # palm
    cells += [(2 * k, y) for k in range(4) for y in range(6, 10)]   # four fingers
    cells += [(x, 2) for x in range(7, 10)]                         # thumb
    return cells


def toy_hand_mesh() -> TriMesh:
    """Hand-shaped heightfield mesh: a palm with four fingers and a thumb.

    Disk topology (single boundary loop), all faces consistently oriented.
    Centered at the origin, units meters.
    """
    cells = _hand_cells()
    index: dict[tuple, int] = {}
    verts = []

    def vid(gx, gy):
        key = (gx, gy)
        if key not in index:
            index[key] = len(verts)
            verts.append((gx, gy))
        return index[key]

    faces = []
    for cx, cy in cells:
        v00 = vid(cx, cy)
        v10 = vid(cx + 1, cy)
        v11 = vid(cx + 1, cy + 1)
        v01 = vid(cx, cy + 1)
        faces.append((v00, v10, v11))
        faces.append((v00, v11, v01))

    grid = np.asarray(verts, dtype=np.float64)
    xy = grid * _CELL
    xy -= xy.mean(axis=0)
    # gentle dome so the surface is genuinely 3D
    r2 = (grid[:, 0] - 3.5) ** 2 + (grid[:, 1] - 3.0) ** 2
    z = 0.02 * np.exp(-r2 / (2 * 4.5**2))
    vertices = np.column_stack([xy, z])
    return TriMesh(vertices, np.asarray(faces, dtype=np.int64))


def toy_hand_topology() -> HandTopology:
    """Joint rules matching toy_hand_mesh: wrist + 3 joints per digit, 5 tips."""
    mesh = toy_hand_mesh()
    lookup: dict[tuple, int] = {}
    grid_of = {}
    # rebuild the lattice lookup the same way the mesh generator assigns ids
    cells = _hand_cells()
    verts = []
    for cx, cy in cells:
        for gx, gy in ((cx, cy), (cx + 1, cy), (cx + 1, cy + 1), (cx, cy + 1)):
            if (gx, gy) not in lookup:
                lookup[(gx, gy)] = len(verts)
                verts.append((gx, gy))
    grid_of = lookup

    V = mesh.n_vertices
    rules = []  # list of {vertex: weight}

    def combo(points):
        w = 1.0 / len(points)
        rules.append({grid_of[p]: w for p in points})

    combo([(3, 0), (4, 0)])                                   # wrist / root
    for k in range(4):                                        # finger chains
        x = 2 * k
        combo([(x, 6), (x + 1, 6)])
        combo([(x, 7), (x + 1, 7), (x, 8), (x + 1, 8)])
        combo([(x, 9), (x + 1, 9)])
    for x in (7, 8, 9):                                       # thumb chain
        combo([(x, 2), (x, 3)])

    weights = np.zeros((len(rules), V))
    for j, rule in enumerate(rules):
        for v, w in rule.items():
            weights[j, v] = w
    tips = np.asarray([grid_of[(2 * k, 10)] for k in range(4)] + [grid_of[(10, 2)]], dtype=np.int64)
    return HandTopology(n_verts=V, n_faces=mesh.n_faces, joint_weights=weights, fingertips=tips)


def mano_like_mesh(seed: int = 7, scale: float = 0.09) -> TriMesh:
    """Disk-topology mesh with exactly 778 vertices and 1538 faces.

    Built as a Delaunay triangulation of 16 boundary points on a regular
    polygon plus 762 strictly interior points, which forces the face count
    (F = 2V - hull - 2). z is a smooth dome. Stands in for a user-supplied
    MANO-topology mesh in topology-level tests.
    """
    n_boundary, n_interior = 16, 762
    rng = np.random.default_rng(seed)
    ang = 2 * np.pi * np.arange(n_boundary) / n_boundary
    boundary = np.column_stack([np.cos(ang), np.sin(ang)])
    r = 0.9 * np.sqrt(rng.uniform(0.0005, 1.0, n_interior))
    th = rng.uniform(0, 2 * np.pi, n_interior)
    interior = np.column_stack([r * np.cos(th), r * np.sin(th)])
    pts = np.concatenate([boundary, interior], axis=0)

    tri = Delaunay(pts)
    faces = tri.simplices.astype(np.int64)
    if len(np.unique(faces)) != len(pts):
        raise MeshError("Delaunay dropped points; change the seed")
    if len(faces) != 2 * len(pts) - n_boundary - 2:
        raise MeshError("unexpected Delaunay face count")
    # consistent CCW orientation
    p = pts[faces]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    flip = signed < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    rad2 = (pts**2).sum(axis=1)
    z = 0.25 * (1.0 - rad2 / rad2.max())
    vertices = np.column_stack([pts, z]) * scale
    return TriMesh(vertices, faces)


def deform_mesh(mesh: TriMesh, rng: np.random.Generator,
                max_rotation: float = 0.35, scale_jitter: float = 0.12,
                wave_amplitude: float = 0.08, max_shift: float = 0.01) -> TriMesh:
    """Random smooth deformation: rotation, anisotropic scale, low-frequency
    displacement waves and a small shift. Amplitudes are relative to mesh size."""
    v = mesh.vertices
    size = float(np.ptp(v, axis=0).max())

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_rotation, max_rotation)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)

    s = 1.0 + rng.uniform(-scale_jitter, scale_jitter, size=3)
    center = v.mean(axis=0)
    out = (v - center) * s @ R.T

    for _ in range(3):
        freq = rng.uniform(0.5, 1.5) * 2 * np.pi / size
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        normal_dir = rng.normal(size=3)
        normal_dir /= np.linalg.norm(normal_dir)
        phase = rng.uniform(0, 2 * np.pi)
        amp = wave_amplitude * size * rng.uniform(0.2, 1.0) / 3
        out += amp * np.sin(freq * (out @ direction) + phase)[:, None] * normal_dir

    out += center + rng.uniform(-max_shift, max_shift, size=3)
    return TriMesh(out, mesh.faces)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted per-vertex unit normals."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    normals = np.zeros_like(v)
    for k in range(3):
        np.add.at(normals, f[:, k], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return normals / norm


def sample_surface_points(mesh: TriMesh, n_points: int, rng: np.random.Generator,
                          noise: float = 0.0) -> np.ndarray:
    """Uniform-by-area random points on the surface, with optional Gaussian noise."""
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    probs = areas / areas.sum()
    picks = rng.choice(len(f), size=n_points, p=probs)
    r1 = np.sqrt(rng.uniform(size=n_points))
    r2 = rng.uniform(size=n_points)
    a, b, c = tri[picks, 0], tri[picks, 1], tri[picks, 2]
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    if noise > 0:
        pts = pts + rng.normal(scale=noise, size=pts.shape)
    return pts
