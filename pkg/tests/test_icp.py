"""Registration tests: similarity fitting, ICP recovery, PLY I/O."""
import numpy as np
import pytest

from uvhand.errors import FitError, FormatError, ShapeError
from uvhand.icp import (
    IcpParams,
    PointCloud,
    icp_register,
    load_ply,
    nonrigid_refine,
    save_ply,
)
from uvhand.synthetic import deform_mesh, sample_surface_points
from uvhand.transforms import (
    apply_similarity,
    axis_angle_rotation,
    random_rotation_matrix,
    rotation_angle,
    umeyama,
)


class TestUmeyama:
    def test_exact_recovery(self, rng):
        src = rng.normal(size=(40, 3))
        rot = random_rotation_matrix(rng)
        t = rng.normal(size=3)
        s = 1.7
        dst = apply_similarity(src, rot, t, s)
        r2, t2, s2 = umeyama(src, dst, with_scale=True)
        np.testing.assert_allclose(r2, rot, atol=1e-10)
        np.testing.assert_allclose(t2, t, atol=1e-10)
        assert s2 == pytest.approx(s, abs=1e-10)

    def test_rigid_mode_keeps_unit_scale(self, rng):
        src = rng.normal(size=(25, 3))
        dst = apply_similarity(src, random_rotation_matrix(rng), rng.normal(size=3), 2.0)
        _, _, s = umeyama(src, dst, with_scale=False)
        assert s == 1.0

    def test_reflection_guard(self, rng):
        # mirrored target must still produce a proper rotation
        src = rng.normal(size=(30, 3))
        dst = src * np.array([1.0, 1.0, -1.0])
        rot, _, _ = umeyama(src, dst)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-10)

    def test_collinear_rejected(self):
        src = np.outer(np.arange(10.0), [1.0, 2.0, 3.0])
        with pytest.raises(FitError):
            umeyama(src, src + 1.0)

    def test_optimality_against_random_search(self, rng):
        src = rng.normal(size=(20, 3))
        dst = rng.normal(size=(20, 3))
        rot, t, s = umeyama(src, dst, with_scale=True)
        best = ((apply_similarity(src, rot, t, s) - dst) ** 2).sum()
        for _ in range(1000):
            rr = random_rotation_matrix(rng)
            tt = rng.normal(size=3)
            ss = rng.uniform(0.2, 3.0)
            trial = ((apply_similarity(src, rr, tt, ss) - dst) ** 2).sum()
            assert best <= trial + 1e-9

    def test_too_few_points(self):
        with pytest.raises(FitError):
            umeyama(np.zeros((2, 3)), np.zeros((2, 3)))


class TestIcp:
    def test_identity(self, mano_like):
        result = icp_register(mano_like, PointCloud(points=mano_like.vertices))
        assert result.converged
        assert result.residuals[-1] <= 1e-12
        np.testing.assert_allclose(result.rotation, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(result.translation, 0.0, atol=1e-9)

    def test_recovers_known_transform(self, mano_like):
        angle = np.deg2rad(15.0)
        rot = axis_angle_rotation([0.3, 1.0, 0.2], angle)
        t = np.array([0.03, -0.02, 0.03])       # 5 cm magnitude overall
        target = PointCloud(points=apply_similarity(mano_like.vertices, rot, t))
        result = icp_register(mano_like, target, IcpParams(max_iterations=50))
        err_rot = rotation_angle(result.rotation.T @ rot)
        assert err_rot < 1e-4
        np.testing.assert_allclose(result.translation, t, atol=1e-5)
        assert result.converged

    def test_scale_estimation(self, mano_like):
        rot = axis_angle_rotation([0.0, 0.0, 1.0], 0.1)
        target = PointCloud(points=apply_similarity(mano_like.vertices, rot,
                                                    np.array([0.01, 0.0, 0.0]), 1.3))
        result = icp_register(mano_like, target,
                              IcpParams(estimate_scale=True, max_iterations=60))
        assert result.scale == pytest.approx(1.3, abs=1e-6)

    def test_noise_residual_bound(self, mano_like):
        rng = np.random.default_rng(42)
        rot = axis_angle_rotation([1.0, 0.2, 0.1], 0.15)
        pts = apply_similarity(mano_like.vertices, rot, np.array([0.02, 0.01, -0.01]))
        target = PointCloud(points=pts + rng.normal(scale=1e-3, size=pts.shape))
        result = icp_register(mano_like, target)
        assert result.residuals[-1] <= 2e-3

    def test_residual_history_non_increasing(self, mano_like, rng):
        rot = random_rotation_matrix(rng)
        # moderate rotation via slerp-ish blend: pull toward identity
        rot = axis_angle_rotation(rng.normal(size=3), 0.25)
        target = PointCloud(points=apply_similarity(mano_like.vertices, rot,
                                                    rng.normal(scale=0.02, size=3)))
        params = IcpParams(max_iterations=40, tolerance=1e-10)
        result = icp_register(mano_like, target, params)
        res = result.residuals
        assert all(res[i + 1] <= res[i] + params.tolerance for i in range(len(res) - 1))

    def test_outlier_rejection(self, mano_like):
        rng = np.random.default_rng(7)
        rot = axis_angle_rotation([0.1, 0.9, 0.3], 0.2)
        t = np.array([0.01, 0.02, -0.015])
        pts = apply_similarity(mano_like.vertices, rot, t)
        outliers = rng.uniform(-0.5, 0.5, size=(40, 3))
        target = PointCloud(points=np.vstack([pts, outliers]))
        result = icp_register(mano_like, target)
        assert rotation_angle(result.rotation.T @ rot) < 1e-3
        np.testing.assert_allclose(result.translation, t, atol=1e-4)

    def test_mesh_passthrough(self, toy_hand):
        result = icp_register(toy_hand, PointCloud(points=toy_hand.vertices))
        assert np.array_equal(result.fitted.faces, toy_hand.faces)
        np.testing.assert_allclose(result.fitted.vertices, toy_hand.vertices, atol=1e-9)

    def test_too_few_points(self):
        with pytest.raises(FitError):
            icp_register(np.zeros((2, 3)), PointCloud(points=np.zeros((5, 3)) + np.eye(5, 3)))

    def test_bad_params(self):
        with pytest.raises(ValueError):
            IcpParams(max_iterations=0)
        with pytest.raises(ValueError):
            IcpParams(rejection_factor=0.0)

    def test_divergence_abort(self, monkeypatch, mano_like):
        # a fit that walks the source further away every iteration must trip
        # the three-consecutive-growth abort instead of looping to the cap
        import uvhand.icp as icp_mod

        step = [0.0]

        def runaway_fit(src, dst, with_scale=False):
            step[0] += 1.0
            return np.eye(3), np.array([step[0], 0.0, 0.0]), 1.0

        monkeypatch.setattr(icp_mod, "umeyama", runaway_fit)
        with pytest.raises(FitError, match="diverged"):
            icp_register(mano_like, PointCloud(points=mano_like.vertices),
                         IcpParams(max_iterations=20))


class TestNonrigidRefine:
    def test_moves_toward_scan(self, toy_hand, rng):
        bumpy = deform_mesh(toy_hand, rng, max_rotation=0.0, scale_jitter=0.0,
                            wave_amplitude=0.25, max_shift=0.0)
        scan = PointCloud(points=sample_surface_points(bumpy, 4000, rng))
        from scipy.spatial import cKDTree
        tree = cKDTree(scan.points)
        before = tree.query(toy_hand.vertices)[0].mean()
        refined = nonrigid_refine(toy_hand, scan, smoothness=0.5, iterations=10)
        after = tree.query(refined.vertices)[0].mean()
        assert after < before
        assert np.array_equal(refined.faces, toy_hand.faces)

    def test_smoothness_validated(self, toy_hand):
        with pytest.raises(ValueError):
            nonrigid_refine(toy_hand, PointCloud(points=toy_hand.vertices), smoothness=1.5)


class TestPly:
    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip(self, rng, tmp_path, binary):
        pts = rng.normal(size=(57, 3))
        cloud = PointCloud(points=pts)
        path = tmp_path / "c.ply"
        save_ply(path, cloud, binary=binary)
        back = load_ply(path)
        np.testing.assert_allclose(back.points, pts, atol=1e-6)
        assert back.normals is None

    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip_with_normals(self, rng, tmp_path, binary):
        pts = rng.normal(size=(31, 3))
        nrm = rng.normal(size=(31, 3))
        path = tmp_path / "n.ply"
        save_ply(path, PointCloud(points=pts, normals=nrm), binary=binary)
        back = load_ply(path)
        np.testing.assert_allclose(back.points, pts, atol=1e-6)
        np.testing.assert_allclose(back.normals, nrm, atol=1e-6)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_bytes(b"obj\nend_header\n")
        with pytest.raises(FormatError):
            load_ply(path)

    def test_big_endian_rejected(self, tmp_path):
        path = tmp_path / "x.ply"
        path.write_text("ply\nformat binary_big_endian 1.0\nelement vertex 0\n"
                        "property float x\nproperty float y\nproperty float z\n"
                        "end_header\n")
        with pytest.raises(FormatError):
            load_ply(path)

    def test_truncated_binary(self, rng, tmp_path):
        path = tmp_path / "t.ply"
        save_ply(path, PointCloud(points=rng.normal(size=(10, 3))), binary=True)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(FormatError):
            load_ply(path)

    def test_missing_coordinate_property(self, tmp_path):
        path = tmp_path / "m.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 1\n"
                        "property float x\nproperty float y\nend_header\n1 2\n")
        with pytest.raises(FormatError):
            load_ply(path)

    def test_extra_property_skipped(self, tmp_path):
        path = tmp_path / "e.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 2\n"
                        "property float x\nproperty float y\nproperty float z\n"
                        "property float confidence\nend_header\n"
                        "1 2 3 0.5\n4 5 6 0.9\n")
        cloud = load_ply(path)
        np.testing.assert_allclose(cloud.points, [[1, 2, 3], [4, 5, 6]])

    def test_nonfinite_rejected(self):
        with pytest.raises(ShapeError):
            PointCloud(points=np.array([[np.nan, 0, 0]]))
