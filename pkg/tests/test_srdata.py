"""Chart-confined smoothing and (smooth, detailed) pair construction."""
import numpy as np
import pytest

from uvhand.errors import MeshError
from uvhand.mesh import TriMesh, edge_unpool
from uvhand.srdata import (SrPair, add_surface_detail, expected_dense_counts,
                           gaussian_smooth_uv, make_sr_pair,
                           read_pair_manifest, write_pair_manifest)
from uvhand.synthetic import toy_hand_mesh
from uvhand.uvmap import (NormalizationCube, UVPositionMap,
                          interior_vertex_mask, make_template,
                          rasterize_mesh_to_uv, sample_uv_to_mesh,
                          subdivide_template)

BBOX = (np.zeros(3), np.ones(3))


@pytest.fixture
def rng():
    return np.random.default_rng(77001)


def disk_map(rng, size=32, radius=0.4):
    """Random map over a centered disk mask."""
    ax = (np.arange(size) + 0.5) / size - 0.5
    mask = ax[None, :] ** 2 + ax[:, None] ** 2 < radius ** 2
    data = np.where(mask[..., None], rng.uniform(0.2, 0.8, (size, size, 3)), 0.0)
    return UVPositionMap(data=data, mask=mask, bbox=BBOX)


@pytest.fixture(scope="module")
def hand():
    mesh = toy_hand_mesh()
    return mesh, make_template(mesh, form="UV1")


class TestGaussianSmooth:
    def test_sigma_zero_identity(self, rng):
        m = disk_map(rng)
        out = gaussian_smooth_uv(m, 0.0)
        np.testing.assert_array_equal(out.data, m.data)
        np.testing.assert_array_equal(out.mask, m.mask)

    def test_negative_sigma_rejected(self, rng):
        with pytest.raises(ValueError):
            gaussian_smooth_uv(disk_map(rng), -1.0)

    def test_constant_map_unchanged(self, rng):
        m = disk_map(rng)
        m.data[m.mask] = 0.7
        out = gaussian_smooth_uv(m, 3.0)
        np.testing.assert_allclose(out.data[out.mask], 0.7, atol=1e-12)

    def test_mask_unchanged_and_support_bounded(self, rng):
        import scipy.ndimage
        m = disk_map(rng)
        out = gaussian_smooth_uv(m, 2.5)
        np.testing.assert_array_equal(out.mask, m.mask)
        band = scipy.ndimage.binary_dilation(m.mask, np.ones((3, 3), bool))
        assert (out.data[~band] == 0).all()

    def test_outside_values_never_leak_in(self, rng):
        m = disk_map(rng)
        polluted = UVPositionMap(
            data=np.where(m.mask[..., None], m.data,
                          rng.uniform(-5, 5, m.data.shape)),
            mask=m.mask, bbox=m.bbox)
        a = gaussian_smooth_uv(m, 2.0)
        b = gaussian_smooth_uv(polluted, 2.0)
        np.testing.assert_allclose(a.data[m.mask], b.data[m.mask], atol=1e-12)

    def test_matches_bruteforce_2d_convolution(self, rng):
        # oracle: full 2D truncated-Gaussian normalized convolution over the
        # mask, then the same exact in-mask mean restoration
        sigma = 2.0
        m = disk_map(rng, size=40)
        out = gaussian_smooth_uv(m, sigma)
        radius = int(4.0 * sigma + 0.5)
        ax = np.arange(-radius, radius + 1, dtype=np.float64)
        k1 = np.exp(-ax ** 2 / (2 * sigma * sigma))
        k2 = np.outer(k1, k1)
        H = W = 40
        want = np.zeros_like(m.data)
        mf = m.mask.astype(np.float64)
        for i in range(H):
            for j in range(W):
                if not m.mask[i, j]:
                    continue
                r0, r1 = max(0, i - radius), min(H, i + radius + 1)
                c0, c1 = max(0, j - radius), min(W, j + radius + 1)
                kw = k2[r0 - i + radius:r1 - i + radius,
                        c0 - j + radius:c1 - j + radius] * mf[r0:r1, c0:c1]
                want[i, j] = (kw[..., None] * m.data[r0:r1, c0:c1]).sum((0, 1)) / kw.sum()
        for c in range(3):
            want[..., c][m.mask] += (m.data[..., c][m.mask].mean()
                                     - want[..., c][m.mask].mean())
        np.testing.assert_allclose(out.data[m.mask], want[m.mask], atol=1e-6)

    def test_in_mask_mean_preserved(self, rng):
        m = disk_map(rng, size=48)
        for sigma in (1.0, 2.5, 4.0):
            out = gaussian_smooth_uv(m, sigma)
            for c in range(3):
                assert abs(out.data[..., c][m.mask].mean()
                           - m.data[..., c][m.mask].mean()) < 1e-9

    def test_on_rasterized_map(self, hand):
        mesh, template = hand
        uvm = rasterize_mesh_to_uv(mesh, template, 64)
        out = gaussian_smooth_uv(uvm, 2.0)
        assert out.bbox[0] is uvm.bbox[0] or np.array_equal(out.bbox[0], uvm.bbox[0])
        d = np.abs(out.data - uvm.data)[uvm.mask]
        assert 0 < d.mean() < 0.2      # blurred, but not destroyed


class TestAddSurfaceDetail:
    def test_topology_kept_displacement_bounded(self, rng):
        mesh = toy_hand_mesh()
        out = add_surface_detail(mesh, rng, amplitude=0.02, n_bumps=10)
        assert out.n_vertices == mesh.n_vertices
        np.testing.assert_array_equal(out.faces, mesh.faces)
        size = np.ptp(mesh.vertices, axis=0).max()
        moved = np.linalg.norm(out.vertices - mesh.vertices, axis=1)
        assert moved.max() <= 10 * 0.02 * size + 1e-12
        assert moved.max() > 0

    def test_seeded(self):
        mesh = toy_hand_mesh()
        a = add_surface_detail(mesh, np.random.default_rng(5))
        b = add_surface_detail(mesh, np.random.default_rng(5))
        np.testing.assert_array_equal(a.vertices, b.vertices)


class TestMakeSrPair:
    def test_degenerate_refinement_round_trips(self, hand):
        mesh, template = hand
        dense = edge_unpool(mesh)
        pair = make_sr_pair(mesh, dense, template)
        assert isinstance(pair, SrPair) and pair.smoothed is None
        assert pair.low.data.shape == (256, 256, 3)
        assert pair.high.data.shape == (256, 256, 3)
        np.testing.assert_array_equal(pair.low.bbox[0], pair.high.bbox[0])
        np.testing.assert_array_equal(pair.low.bbox[1], pair.high.bbox[1])
        tpl_hi = subdivide_template(template)
        rec = sample_uv_to_mesh(pair.high, tpl_hi)
        interior = interior_vertex_mask(tpl_hi, 256)
        assert interior.any()
        err = np.linalg.norm(rec.vertices - dense.vertices, axis=1)
        assert err[interior].max() <= 2.0 * pair.high.cube().diagonal / 256

    def test_counts_helper(self, hand):
        mesh, _ = hand
        dense = edge_unpool(mesh)
        assert expected_dense_counts(mesh) == (dense.n_vertices, dense.n_faces)

    def test_topology_mismatch_rejected(self, hand):
        mesh, template = hand
        with pytest.raises(MeshError, match="edge-unpooled"):
            make_sr_pair(mesh, mesh, template)
        dense = edge_unpool(mesh)
        shuffled = TriMesh(dense.vertices, dense.faces[::-1].copy())
        with pytest.raises(MeshError, match="edge-unpooled"):
            make_sr_pair(mesh, shuffled, template)

    def test_smoothed_variant(self, hand, rng):
        mesh, template = hand
        dense = add_surface_detail(edge_unpool(mesh), rng, amplitude=0.02)
        pair = make_sr_pair(mesh, dense, template, smooth_sigma=2.0,
                            resolution=128)
        assert pair.smoothed is not None
        np.testing.assert_array_equal(pair.smoothed.mask, pair.high.mask)
        diff = np.abs(pair.smoothed.data - pair.high.data)[pair.high.mask]
        assert diff.mean() > 0

    def test_detail_localized_at_bumps(self, hand, rng):
        mesh, template = hand
        plain = edge_unpool(mesh)
        bumpy = add_surface_detail(plain, rng, amplitude=0.03, n_bumps=6)
        cube = NormalizationCube.from_mesh(
            np.concatenate([mesh.vertices, bumpy.vertices]))
        tpl_hi = subdivide_template(template)
        pair = make_sr_pair(mesh, bumpy, template, cube=cube, resolution=128,
                            template_hi=tpl_hi)
        # reference displacement field: detailed minus undisplaced dense map
        ref = rasterize_mesh_to_uv(plain, tpl_hi, 128, cube=cube)
        both = pair.high.mask & pair.low.mask & ref.mask
        bump_px = np.linalg.norm(pair.high.data - ref.data, axis=-1)[both]
        diff = np.linalg.norm(pair.high.data - pair.low.data, axis=-1)[both]
        assert diff[bump_px > np.quantile(bump_px, 0.9)].mean() > \
            2.0 * diff[bump_px < np.quantile(bump_px, 0.1)].mean()
        assert float(np.sqrt((diff ** 2).mean())) > 0


class TestManifest:
    def test_round_trip(self, tmp_path):
        cube = NormalizationCube(center=(0.1, 0.2, 0.3), half_extent=0.5)
        path = tmp_path / "pairs.jsonl"
        write_pair_manifest(path, [
            {"low_path": "a_low.uvp", "high_path": "a_high.uvp", "cube": cube},
            {"low_path": "b_low.uvp", "high_path": "b_high.uvp",
             "cube": {"center": [0, 0, 0], "half_extent": 1.0}},
        ])
        records = read_pair_manifest(path)
        assert len(records) == 2
        assert records[0]["low_path"] == "a_low.uvp"
        assert records[0]["cube"] == cube
        assert records[1]["cube"].half_extent == 1.0
