import numpy as np
import pytest

from uvhand.errors import FormatError, MeshError, ShapeError
from uvhand.mesh import (
    HandTopology,
    TriMesh,
    compute_edges,
    edge_unpool,
    load_joint_rules,
    load_obj,
    regress_joints,
    save_joint_rules,
    save_obj,
)
from uvhand.synthetic import deform_mesh

from conftest import random_rotation


def single_triangle():
    return TriMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def tetrahedron():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    return TriMesh(verts, faces)


# ---------------------------------------------------------------------------
# OBJ I/O
# ---------------------------------------------------------------------------

def test_load_obj_minimal(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_obj(p)
    assert m.n_vertices == 3 and m.n_faces == 1
    assert np.array_equal(m.faces, [[0, 1, 2]])


def test_obj_round_trip_random_mesh(tmp_path, rng):
    verts = rng.uniform(-1, 1, size=(100, 3))
    faces = np.array([[i, i + 1, i + 2] for i in range(0, 98)])
    m = TriMesh(verts, faces)
    path = tmp_path / "m.obj"
    save_obj(m, path)
    back = load_obj(path)
    assert np.array_equal(back.faces, m.faces)
    assert np.abs(back.vertices - m.vertices).max() < 1e-7


def test_obj_rejects_quad(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(FormatError, match="non-triangular"):
        load_obj(p)


def test_obj_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 zz\n")
    with pytest.raises(FormatError, match=":2"):
        load_obj(p)


# ---------------------------------------------------------------------------
# compute_edges
# ---------------------------------------------------------------------------

def test_single_triangle_edges():
    es = compute_edges(single_triangle())
    assert es.n_edges == 3
    assert all(len(fs) == 1 for fs in es.edge_faces)
    assert es.boundary_loop_count() == 1


def test_tetrahedron_edges_closed():
    es = compute_edges(tetrahedron())
    assert es.n_edges == 6
    assert es.euler_characteristic == 2
    assert len(es.boundary_edges) == 0
    assert es.boundary_loop_count() == 0


def test_mano_like_edge_count(mano_like):
    # Euler oracle: one boundary loop disk, so V - E + F = 1 -> E = 2315
    es = compute_edges(mano_like)
    assert mano_like.n_vertices == 778 and mano_like.n_faces == 1538
    assert es.n_edges == 2315
    assert es.euler_characteristic == 1
    assert es.boundary_loop_count() == 1


def test_edges_face_permutation_invariant(toy_hand, rng):
    es1 = compute_edges(toy_hand)
    perm = rng.permutation(toy_hand.n_faces)
    es2 = compute_edges(TriMesh(toy_hand.vertices, toy_hand.faces[perm]))
    assert np.array_equal(es1.edges, es2.edges)
    # incident face sets are identical up to the permutation
    for fs1, fs2 in zip(es1.edge_faces, es2.edge_faces):
        assert sorted(fs1) == sorted(int(perm[f]) for f in fs2)


def test_nonmanifold_edge_rejected():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshError, match="non-manifold"):
        compute_edges(TriMesh(verts, faces))


# ---------------------------------------------------------------------------
# edge_unpool
# ---------------------------------------------------------------------------

def test_unpool_single_triangle():
    out = edge_unpool(single_triangle())
    assert out.n_vertices == 6 and out.n_faces == 4


def test_unpool_mano_like_counts(mano_like):
    dense = edge_unpool(mano_like)
    assert dense.n_vertices == 3093
    assert dense.n_faces == 6152


def test_unpool_tetrahedron_twice():
    # V' = V + E recurrence oracle: 4+6=10 then 10+24=34; F: 16 then 64
    once = edge_unpool(tetrahedron())
    assert once.n_vertices == 10 and once.n_faces == 16
    twice = edge_unpool(once)
    assert twice.n_vertices == 34 and twice.n_faces == 64


def test_unpool_midpoints_and_originals(toy_hand):
    es = compute_edges(toy_hand)
    out = edge_unpool(toy_hand)
    V = toy_hand.n_vertices
    assert np.array_equal(out.vertices[:V], toy_hand.vertices)
    expected_mid = 0.5 * (toy_hand.vertices[es.edges[:, 0]] + toy_hand.vertices[es.edges[:, 1]])
    assert np.allclose(out.vertices[V:], expected_mid)


def test_unpool_preserves_euler_and_boundary(toy_hand):
    before = compute_edges(toy_hand)
    after = compute_edges(edge_unpool(toy_hand))
    assert after.euler_characteristic == before.euler_characteristic
    assert after.boundary_loop_count() == before.boundary_loop_count()


def test_unpool_rejects_nonmanifold():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    with pytest.raises(MeshError):
        edge_unpool(TriMesh(verts, faces))


# ---------------------------------------------------------------------------
# regress_joints
# ---------------------------------------------------------------------------

def test_joints_at_origin(toy_topology):
    verts = np.zeros((toy_topology.n_verts, 3))
    faces = np.array([[0, 1, 2]])
    joints = regress_joints(TriMesh(verts, faces), toy_topology)
    assert joints.shape == (21, 3)
    assert np.all(joints == 0)


def test_joints_translation_equivariance(toy_hand, toy_topology):
    t = np.array([0.3, -0.1, 0.05])
    j0 = regress_joints(toy_hand, toy_topology)
    j1 = regress_joints(toy_hand.transformed(translation=t), toy_topology)
    assert np.abs(j1 - (j0 + t)).max() < 1e-12


def test_joints_rigid_equivariance(toy_hand, toy_topology, rng):
    R = random_rotation(rng)
    t = rng.normal(size=3)
    j0 = regress_joints(toy_hand, toy_topology)
    j1 = regress_joints(toy_hand.transformed(rotation=R, translation=t), toy_topology)
    assert np.abs(j1 - (j0 @ R.T + t)).max() < 1e-9


def test_joints_match_brute_force(toy_hand, toy_topology, rng):
    mesh = deform_mesh(toy_hand, rng)
    joints = regress_joints(mesh, toy_topology)
    # direct-summation oracle
    expect = np.zeros((21, 3))
    for j in range(16):
        for v in range(toy_topology.n_verts):
            expect[j] += toy_topology.joint_weights[j, v] * mesh.vertices[v]
    for k, v in enumerate(toy_topology.fingertips):
        expect[16 + k] = mesh.vertices[v]
    assert np.abs(joints - expect).max() < 1e-9


def test_joints_vertex_count_mismatch(toy_topology):
    small = TriMesh(np.zeros((4, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(ShapeError):
        regress_joints(small, toy_topology)


# ---------------------------------------------------------------------------
# joint-rule files
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("binary", [False, True])
def test_joint_rules_round_trip(tmp_path, toy_topology, binary):
    path = tmp_path / ("rules.bin" if binary else "rules.txt")
    save_joint_rules(toy_topology, path, binary=binary)
    back = load_joint_rules(path)
    assert back.n_verts == toy_topology.n_verts
    assert back.n_faces == toy_topology.n_faces
    assert np.allclose(back.joint_weights, toy_topology.joint_weights)
    assert np.array_equal(back.fingertips, toy_topology.fingertips)


def test_joint_rules_bad_magic(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("NOPE 1\n")
    with pytest.raises(FormatError):
        load_joint_rules(p)


def test_topology_weights_must_sum_to_one():
    with pytest.raises(MeshError):
        HandTopology(n_verts=3, n_faces=1, joint_weights=np.array([[0.5, 0.2, 0.0]]))


# ---------------------------------------------------------------------------
# mesh validation
# ---------------------------------------------------------------------------

def test_face_index_out_of_range():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


def test_degenerate_face_index_rejected():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))


def test_zero_area_faces_flagged():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
    faces = np.array([[0, 1, 3], [0, 1, 2]])  # second face is collinear
    flagged = TriMesh(verts, faces).zero_area_faces()
    assert list(flagged) == [1]
