"""Triangle-mesh container, topology utilities, joint regression and edge unpooling.

Meshes are plain vertex/face arrays in meters. All functions here are pure;
nothing mutates its inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MeshError, ShapeError


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh: `vertices` (V,3) float64 meters, `faces` (F,3) int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size:
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise MeshError(f"degenerate face (repeated vertex index) at face {int(np.argmax(degen))}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "TriMesh":
        """Return a rigidly/similarity transformed copy (R @ v * s + t)."""
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        v = v * float(scale)
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriMesh(v, self.faces)

    def zero_area_faces(self, rel_tol: float = 1e-12) -> np.ndarray:
        """Indices of geometrically degenerate (zero-area) faces.

        Allowed in a valid mesh but skipped by rasterization; this is the
        validation pass that flags them.
        """
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        area2 = np.linalg.norm(cross, axis=1)
        scale = max(float(np.ptp(self.vertices)) if self.n_vertices else 1.0, 1e-30)
        return np.nonzero(area2 <= rel_tol * scale * scale)[0]


@dataclass(frozen=True)
class EdgeSet:
    """Unique undirected edges of a mesh.

    `edges` is (E,2) int64 with edges[i,0] < edges[i,1], sorted lexicographically.
    `edge_faces[i]` lists the faces incident to edge i (length 1 on the boundary,
    2 in the interior).
    """

    edges: np.ndarray
    edge_faces: list
    n_vertices: int
    n_faces: int

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    @property
    def boundary_edges(self) -> np.ndarray:
        counts = np.fromiter((len(fs) for fs in self.edge_faces), dtype=np.int64, count=self.n_edges)
        return np.nonzero(counts == 1)[0]

    def boundary_loop_count(self) -> int:
        """Number of closed boundary loops (cycles of boundary edges)."""
        bidx = self.boundary_edges
        if len(bidx) == 0:
            return 0
        bedges = self.edges[bidx]
        # each boundary vertex of a manifold-with-boundary mesh has exactly
        # two incident boundary edges, so the boundary decomposes into cycles
        verts = np.unique(bedges)
        remap = {int(v): i for i, v in enumerate(verts)}
        parent = list(range(len(verts)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        n_components = len(verts)
        for a, b in bedges:
            ra, rb = find(remap[int(a)]), find(remap[int(b)])
            if ra != rb:
                parent[ra] = rb
                n_components -= 1
        return n_components

    def boundary_loops(self) -> list:
        """Boundary loops as ordered vertex index lists (arbitrary start/direction)."""
        bedges = self.edges[self.boundary_edges]
        adj: dict[int, list[int]] = {}
        for a, b in bedges:
            adj.setdefault(int(a), []).append(int(b))
            adj.setdefault(int(b), []).append(int(a))
        for v, nbrs in adj.items():
            if len(nbrs) != 2:
                raise MeshError(f"boundary vertex {v} has {len(nbrs)} boundary edges, expected 2")
        loops = []
        seen: set[int] = set()
        for start in sorted(adj):
            if start in seen:
                continue
            loop = [start]
            seen.add(start)
            prev, cur = None, start
            while True:
                nxt = [n for n in adj[cur] if n != prev]
                nxt = nxt[0] if nxt else adj[cur][0]
                if nxt == start:
                    break
                loop.append(nxt)
                seen.add(nxt)
                prev, cur = cur, nxt
            loops.append(loop)
        return loops


def compute_edges(mesh: TriMesh) -> EdgeSet:
    """Extract unique undirected edges and their incident faces.

    Deterministic and independent of face ordering. Raises MeshError when an
    edge is shared by more than two faces (non-manifold).
    """
    f = mesh.faces
    he = f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    he_sorted = np.sort(he, axis=1)
    edges, inverse, counts = np.unique(he_sorted, axis=0, return_inverse=True, return_counts=True)
    if counts.size and counts.max() > 2:
        bad = edges[np.argmax(counts)]
        raise MeshError(f"non-manifold edge ({bad[0]}, {bad[1]}) shared by {int(counts.max())} faces")
    face_of_halfedge = np.repeat(np.arange(len(f), dtype=np.int64), 3)
    order = np.argsort(inverse, kind="stable")
    edge_faces: list = [[] for _ in range(len(edges))]
    for he_i in order:
        edge_faces[int(inverse[he_i])].append(int(face_of_halfedge[he_i]))
    return EdgeSet(edges=edges, edge_faces=edge_faces, n_vertices=mesh.n_vertices, n_faces=mesh.n_faces)


def edge_unpool(mesh: TriMesh) -> TriMesh:
    """Refine a manifold mesh by inserting a midpoint vertex on every edge.

    Each triangle splits into four; V' = V + E and F' = 4F. Original vertices
    keep their indices and positions; new vertices are appended in ascending
    (min index, max index) edge order, which makes the refined numbering
    reproducible. Children of face k occupy slots 4k..4k+3 in the order
    (corner a, corner b, corner c, center), preserving orientation.
    """
    eset = compute_edges(mesh)
    edges = eset.edges
    V = mesh.n_vertices
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    new_vertices = np.concatenate([mesh.vertices, midpoints], axis=0)

    f = mesh.faces
    he_sorted = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    # unique rows of he_sorted are exactly `edges`; recover per-halfedge edge ids
    _, inverse = np.unique(he_sorted, axis=0, return_inverse=True)
    eid = inverse.reshape(-1, 3)  # per face: edge ids of (ab, bc, ca)
    m_ab = V + eid[:, 0]
    m_bc = V + eid[:, 1]
    m_ca = V + eid[:, 2]
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    children = np.stack(
        [
            np.stack([a, m_ab, m_ca], axis=1),
            np.stack([b, m_bc, m_ab], axis=1),
            np.stack([c, m_ca, m_bc], axis=1),
            np.stack([m_ab, m_bc, m_ca], axis=1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return TriMesh(new_vertices, children)


@dataclass(frozen=True)
class HandTopology:
    """Fixed hand-mesh topology plus the joint regression rules.

    `joint_weights` is (n_joints, n_verts); row j gives the linear combination
    producing joint j. `fingertips` lists the vertex index of each fingertip.
    Regression yields n_joints + len(fingertips) points (21 for a hand).
    """

    n_verts: int
    n_faces: int
    joint_weights: np.ndarray
    fingertips: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        w = np.asarray(self.joint_weights, dtype=np.float64)
        tips = np.asarray(self.fingertips, dtype=np.int64).ravel()
        object.__setattr__(self, "joint_weights", w)
        object.__setattr__(self, "fingertips", tips)
        if w.ndim != 2 or w.shape[1] != self.n_verts:
            raise ShapeError(f"joint weight matrix {w.shape} does not match {self.n_verts} vertices")
        sums = w.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-8):
            raise MeshError("joint weights must each sum to 1")
        if tips.size and (tips.min() < 0 or tips.max() >= self.n_verts):
            raise MeshError("fingertip vertex index out of range")

    @property
    def n_joints(self) -> int:
        return self.joint_weights.shape[0] + len(self.fingertips)


def regress_joints(mesh: TriMesh, topology: HandTopology) -> np.ndarray:
    """21 hand joints: linear-combination joints followed by fingertip vertices.

    Linear in the vertices, hence exactly equivariant to rigid transforms.
    """
    if mesh.n_vertices != topology.n_verts:
        raise ShapeError(f"mesh has {mesh.n_vertices} vertices, topology expects {topology.n_verts}")
    combo = topology.joint_weights @ mesh.vertices
    tips = mesh.vertices[topology.fingertips]
    return np.concatenate([combo, tips], axis=0)


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------

def parse_obj(path) -> tuple:
    """Low-level ASCII OBJ parse.

    Returns (vertices (V,3), uvs (T,2) or None, faces_v (F,3), faces_vt (F,3) or None).
    Only `v`, `vt` and triangular `f` records are interpreted; other records are
    ignored. Raises FormatError with the offending line number.
    """
    vertices, uvs, faces_v, faces_vt = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
                elif tag == "vt":
                    uvs.append((float(parts[1]), float(parts[2])))
                elif tag == "f":
                    refs = parts[1:]
                    if len(refs) != 3:
                        raise FormatError(f"{path}:{lineno}: non-triangular face with {len(refs)} vertices")
                    vi, ti = [], []
                    for ref in refs:
                        fields = ref.split("/")
                        vi.append(int(fields[0]) - 1)
                        if len(fields) > 1 and fields[1]:
                            ti.append(int(fields[1]) - 1)
                    faces_v.append(tuple(vi))
                    if len(ti) == 3:
                        faces_vt.append(tuple(ti))
                    elif ti:
                        raise FormatError(f"{path}:{lineno}: face mixes texture-indexed and plain vertices")
            except FormatError:
                raise
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: cannot parse {tag!r} record: {exc}") from exc
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    fv = np.asarray(faces_v, dtype=np.int64).reshape(-1, 3)
    uv = np.asarray(uvs, dtype=np.float64).reshape(-1, 2) if uvs else None
    fvt = np.asarray(faces_vt, dtype=np.int64).reshape(-1, 3) if len(faces_vt) == len(faces_v) and faces_vt else None
    return verts, uv, fv, fvt


def load_obj(path) -> TriMesh:
    """Load an ASCII OBJ file as a TriMesh (texture/normal records ignored)."""
    verts, _, faces, _ = parse_obj(path)
    if len(verts) == 0:
        raise FormatError(f"{path}: no vertices found")
    return TriMesh(verts, faces)


def save_obj(mesh: TriMesh, path, uvs: np.ndarray | None = None, faces_vt: np.ndarray | None = None) -> None:
    """Write an ASCII OBJ with 9 significant digits (lossless for float32 data,
    round-trips float64 to ~1e-9 relative)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if uvs is not None:
            for uv in np.asarray(uvs, dtype=np.float64).reshape(-1, 2):
                fh.write(f"vt {uv[0]:.9g} {uv[1]:.9g}\n")
        if faces_vt is not None:
            for fv, ft in zip(mesh.faces, np.asarray(faces_vt, dtype=np.int64)):
                fh.write(f"f {fv[0]+1}/{ft[0]+1} {fv[1]+1}/{ft[1]+1} {fv[2]+1}/{ft[2]+1}\n")
        else:
            for fv in mesh.faces:
                fh.write(f"f {fv[0]+1} {fv[1]+1} {fv[2]+1}\n")


# ---------------------------------------------------------------------------
# Joint-rule files: plain-text header + (joint_id, vertex_id, weight) triples,
# with an equivalent little-endian binary variant.
# ---------------------------------------------------------------------------

_JR_TEXT_MAGIC = "UVJR"
_JR_BIN_MAGIC = b"UVJB"


def save_joint_rules(topology: HandTopology, path, binary: bool = False) -> None:
    """Serialize joint rules. Fingertips are stored as weight-1.0 triples whose
    joint ids follow the linear-combination joints."""
    n_combo = topology.joint_weights.shape[0]
    triples = []
    for j in range(n_combo):
        row = topology.joint_weights[j]
        for v in np.nonzero(row)[0]:
            triples.append((j, int(v), float(row[v])))
    for k, v in enumerate(topology.fingertips):
        triples.append((n_combo + k, int(v), 1.0))
    if binary:
        with open(path, "wb") as fh:
            fh.write(_JR_BIN_MAGIC)
            fh.write(struct.pack("<5I", 1, topology.n_verts, topology.n_faces,
                                 topology.n_joints, len(triples)))
            for j, v, w in triples:
                fh.write(struct.pack("<IId", j, v, w))
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{_JR_TEXT_MAGIC} 1\n")
            fh.write(f"{topology.n_verts} {topology.n_faces} {topology.n_joints} {len(topology.fingertips)}\n")
            for j, v, w in triples:
                fh.write(f"{j} {v} {w:.17g}\n")


def load_joint_rules(path) -> HandTopology:
    """Load joint rules saved by save_joint_rules (text or binary autodetected)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _JR_BIN_MAGIC:
        return _load_joint_rules_binary(path)
    return _load_joint_rules_text(path)


def _load_joint_rules_text(path) -> HandTopology:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.strip().startswith("#")]
    if not lines or not lines[0].startswith(_JR_TEXT_MAGIC):
        raise FormatError(f"{path}: not a joint-rule file")
    try:
        n_verts, n_faces, n_joints, n_tips = (int(x) for x in lines[1].split())
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: bad joint-rule header: {exc}") from exc
    n_combo = n_joints - n_tips
    weights = np.zeros((n_combo, n_verts))
    tips = np.full(n_tips, -1, dtype=np.int64)
    for lineno, line in enumerate(lines[2:], start=3):
        try:
            j_s, v_s, w_s = line.split()
            j, v, w = int(j_s), int(v_s), float(w_s)
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad triple: {exc}") from exc
        if j < n_combo:
            weights[j, v] = w
        else:
            tips[j - n_combo] = v
    if (tips < 0).any():
        raise FormatError(f"{path}: missing fingertip rule")
    return HandTopology(n_verts=n_verts, n_faces=n_faces, joint_weights=weights, fingertips=tips)


def _load_joint_rules_binary(path) -> HandTopology:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 24:
        raise FormatError(f"{path}: truncated joint-rule file")
    version, n_verts, n_faces, n_joints, n_triples = struct.unpack_from("<5I", data, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported joint-rule version {version}")
    expect = 24 + 16 * n_triples
    if len(data) < expect:
        raise FormatError(f"{path}: truncated joint-rule file")
    max_j = -1
    triples = []
    for i in range(n_triples):
        j, v, w = struct.unpack_from("<IId", data, 24 + 16 * i)
        triples.append((j, v, w))
        max_j = max(max_j, j)
    tip_ids = sorted({j for j, _, w in triples if w == 1.0 and sum(1 for jj, _, _ in triples if jj == j) == 1})
    # fingertips are by convention the trailing single-entry unit-weight joints
    n_tips = 0
    for j in range(max_j, -1, -1):
        if j in tip_ids:
            n_tips += 1
        else:
            break
    n_combo = n_joints - n_tips
    weights = np.zeros((n_combo, n_verts))
    tips = np.zeros(n_tips, dtype=np.int64)
    for j, v, w in triples:
        if j < n_combo:
            weights[j, v] = w
        else:
            tips[j - n_combo] = v
    return HandTopology(n_verts=n_verts, n_faces=n_faces, joint_weights=weights, fingertips=tips)
