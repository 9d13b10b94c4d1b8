"""Training data for the map refiner: (smooth, detailed) position-map pairs.

A coarse mesh and its once-subdivided, detail-carrying refinement rasterize
into pixel-aligned maps over the same chart; Gaussian smoothing inside the
chart mask supplies the degraded inputs. Registration of scans onto meshes
lives in `icp`; this module only builds and serializes the pairs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .errors import MeshError
from .mesh import TriMesh, compute_edges, edge_unpool
from .synthetic import deform_mesh, toy_hand_mesh, vertex_normals
from .uvmap import (NormalizationCube, UVPositionMap, UVTemplate,
                    make_template, rasterize_mesh_to_uv, rasterize_ownership,
                    subdivide_template)
from .warp import Camera


def gaussian_smooth_uv(uvmap: UVPositionMap, sigma: float,
                       truncate: float = 4.0) -> UVPositionMap:
    """Separable Gaussian blur confined to the chart: out-of-mask pixels
    contribute nothing, and each output renormalizes by the in-mask kernel
    mass, so constants survive exactly and no mass leaks across the chart
    boundary. The per-channel in-mask mean is restored exactly afterwards
    (renormalization alone can drift it by ~1e-5 near the boundary). The
    one-pixel extrapolation band is refilled from the blurred chart so
    bilinear reads at the border stay smooth; the mask is unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return UVPositionMap(data=uvmap.data.copy(), mask=uvmap.mask.copy(),
                             bbox=uvmap.bbox)
    mask = uvmap.mask
    mf = mask.astype(np.float64)
    num = np.stack([scipy.ndimage.gaussian_filter(
        uvmap.data[..., c] * mf, sigma, mode="constant", truncate=truncate)
        for c in range(3)], axis=-1)
    den = scipy.ndimage.gaussian_filter(mf, sigma, mode="constant",
                                        truncate=truncate)
    support = den > 1e-12
    out = np.zeros_like(uvmap.data)
    out[support] = num[support] / den[support][:, None]
    for c in range(3):
        channel = out[..., c]
        channel[support] += uvmap.data[..., c][mask].mean() - channel[mask].mean()
    band = scipy.ndimage.binary_dilation(mask, np.ones((3, 3), dtype=bool))
    out[~(band & support)] = 0.0
    return UVPositionMap(data=out, mask=mask.copy(), bbox=uvmap.bbox)


def extend_off_chart(uvmap: UVPositionMap) -> UVPositionMap:
    """Continue chart values outward by nearest-pixel extension.

    Stored maps keep zeros off the chart, which a convolutional consumer
    sees as a cliff at the boundary and answers with ringing. Replacing
    every off-chart pixel with its nearest in-chart value removes the edge
    while leaving all supervised pixels (and the mask) untouched; decoding
    never reads the extended pixels.
    """
    mask = uvmap.mask
    if mask.all():
        return UVPositionMap(data=uvmap.data.copy(), mask=mask.copy(),
                             bbox=uvmap.bbox)
    iy, ix = scipy.ndimage.distance_transform_edt(
        ~mask, return_distances=False, return_indices=True)
    return UVPositionMap(data=uvmap.data[iy, ix], mask=mask.copy(),
                         bbox=uvmap.bbox)


def detail_pattern(n_verts: int, rng: np.random.Generator,
                   amplitude: float = 0.02, n_bumps: int = 12,
                   radius: float = 0.15) -> list:
    """Bump recipe as (center vertex index, radius, height) rows.

    Keyed to vertex indices rather than positions so one pattern applies
    consistently across deformed copies of the same topology; radius and
    height stay relative to the mesh extent until application time.
    """
    rows = []
    for _ in range(int(n_bumps)):
        idx = int(rng.integers(n_verts))
        r = radius * rng.uniform(0.6, 1.4)
        height = amplitude * rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        rows.append((idx, r, height))
    return rows


def apply_surface_detail(mesh: TriMesh, pattern: list) -> TriMesh:
    """Displace vertices along their normals by the pattern's Gaussian bumps."""
    v = mesh.vertices
    size = float(np.ptp(v, axis=0).max())
    normals = vertex_normals(mesh)
    disp = np.zeros(len(v))
    for idx, r_rel, h_rel in pattern:
        if not 0 <= idx < len(v):
            raise MeshError(f"bump center {idx} outside {len(v)} vertices")
        r = r_rel * size
        d2 = ((v - v[idx]) ** 2).sum(axis=1)
        disp += h_rel * size * np.exp(-d2 / (2.0 * r * r))
    return TriMesh(v + disp[:, None] * normals, mesh.faces)


def add_surface_detail(mesh: TriMesh, rng: np.random.Generator,
                       amplitude: float = 0.02, n_bumps: int = 12,
                       radius: float = 0.15) -> TriMesh:
    """Displace vertices along their normals by a sum of Gaussian bumps.

    amplitude and radius are relative to the mesh extent; signs alternate
    randomly so the detail has no net inflation.
    """
    pattern = detail_pattern(mesh.n_vertices, rng, amplitude=amplitude,
                             n_bumps=n_bumps, radius=radius)
    return apply_surface_detail(mesh, pattern)


@dataclass(frozen=True)
class SrPair:
    """One training pair; `smoothed` is the optional degraded input sample."""

    low: UVPositionMap
    high: UVPositionMap
    smoothed: UVPositionMap = None


def make_sr_pair(coarse_mesh: TriMesh, dense_mesh: TriMesh,
                 template: UVTemplate, cube: NormalizationCube = None,
                 resolution: int = 256, smooth_sigma: float = None,
                 template_hi: UVTemplate = None, ownership=None,
                 ownership_hi=None) -> SrPair:
    """Rasterize a registered (coarse, dense) mesh pair into aligned maps.

    The dense mesh must carry exactly the edge-unpooled topology of the
    coarse mesh (its vertex positions are free, typically refined toward a
    scan). Both maps share one normalization cube; the high map uses the
    subdivided template so its chart stays pixel-aligned with the low one.
    smooth_sigma additionally emits the blurred high map as the degraded
    input sample. template_hi / ownership caches can be passed in when
    encoding many pairs through the same chart.
    """
    want = edge_unpool(TriMesh(coarse_mesh.vertices, coarse_mesh.faces))
    if (dense_mesh.n_vertices != want.n_vertices
            or not np.array_equal(dense_mesh.faces, want.faces)):
        raise MeshError(
            f"dense mesh ({dense_mesh.n_vertices}v/{dense_mesh.n_faces}f) is "
            f"not the edge-unpooled refinement of the coarse mesh (expected "
            f"{want.n_vertices}v/{want.n_faces}f with matching face list)")
    if cube is None:
        cube = NormalizationCube.from_mesh(
            np.concatenate([coarse_mesh.vertices, dense_mesh.vertices]))
    if template_hi is None:
        template_hi = subdivide_template(template)
    low = rasterize_mesh_to_uv(coarse_mesh, template, resolution, cube=cube,
                               ownership=ownership)
    high = rasterize_mesh_to_uv(dense_mesh, template_hi, resolution,
                                cube=cube, ownership=ownership_hi)
    smoothed = None
    if smooth_sigma is not None:
        smoothed = gaussian_smooth_uv(high, smooth_sigma)
    return SrPair(low=low, high=high, smoothed=smoothed)


def expected_dense_counts(coarse_mesh: TriMesh) -> tuple:
    """(vertices, faces) of the edge-unpooled refinement: V+E and 4F."""
    n_edges = compute_edges(coarse_mesh).edges.shape[0]
    return coarse_mesh.n_vertices + n_edges, 4 * coarse_mesh.n_faces


@dataclass
class SrDataset:
    """Refinement corpus: blurred inputs, detailed targets, shared chart.

    Every sample encodes through the same subdivided template at the same
    resolution with one global cube, so a single mask/decoder serves the
    whole set. Maps are stored float32 to keep 200 pairs at 128 px around
    75 MB; training converts batches back to float64.
    """

    inputs: np.ndarray          # (N,3,R,R) smoothed detailed maps
    targets: np.ndarray         # (N,3,R,R) detailed maps
    mask: np.ndarray            # (R,R) shared chart support
    template: UVTemplate        # subdivided, matches the dense topology
    cube: NormalizationCube
    meshes: list                # dense meshes, for ground-truth renders
    camera: Camera              # frames every sample

    @property
    def bbox(self):
        return (self.cube.bbox_min, self.cube.bbox_max)

    def decoder(self):
        from .losses import UvDecoder
        return UvDecoder(self.template, self.mask, self.bbox)


def make_sr_dataset(n_pairs: int = 200, resolution: int = 128,
                    sigma: float = 2.0, seed: int = 0,
                    amplitude: float = 0.02, n_bumps: int = 12,
                    deform: dict = None) -> SrDataset:
    """Build a (smooth, detailed) map corpus from the deformed toy hand.

    Each sample deforms the base hand, refines it by edge unpooling, and
    displaces the refined surface with Gaussian bumps; the target map
    encodes that detailed mesh, and the input is the same map blurred
    in-chart with `sigma`, so the refiner learns to undo a known smoothing.
    All samples are lifted to positive depth and share one cube and camera
    so decoded meshes can be rendered against ground truth directly.
    """
    rng = np.random.default_rng(seed)
    base = toy_hand_mesh()
    template = make_template(base, form="UV1")
    template_hi = subdivide_template(template)
    deform = deform or {}
    dense = []
    for _ in range(int(n_pairs)):
        coarse = deform_mesh(base, rng, **deform)
        dense.append(add_surface_detail(edge_unpool(coarse), rng,
                                        amplitude=amplitude, n_bumps=n_bumps))
    pts = np.concatenate([m.vertices for m in dense])
    # the depth renderer needs every vertex in front of the camera (z > 0)
    shift = np.array([0.0, 0.0, max(0.0, 1e-3 - pts[:, 2].min())])
    dense = [TriMesh(m.vertices + shift, m.faces) for m in dense]
    cube = NormalizationCube.from_mesh(pts + shift)

    center = np.asarray(cube.center)
    scale = 0.4 * resolution / cube.half_extent
    camera = Camera(scale=scale,
                    principal=(resolution / 2 - scale * center[0],
                               resolution / 2 - scale * center[1]),
                    image_size=resolution)

    ownership = rasterize_ownership(template_hi, resolution)
    inputs = np.empty((n_pairs, 3, resolution, resolution), dtype=np.float32)
    targets = np.empty_like(inputs)
    mask = None
    for i, mesh in enumerate(dense):
        uvm = rasterize_mesh_to_uv(mesh, template_hi, resolution, cube=cube,
                                   ownership=ownership)
        targets[i] = np.moveaxis(uvm.data, -1, 0)
        blurred = extend_off_chart(gaussian_smooth_uv(uvm, sigma))
        inputs[i] = np.moveaxis(blurred.data, -1, 0)
        mask = uvm.mask
    return SrDataset(inputs=inputs, targets=targets, mask=mask,
                     template=template_hi, cube=cube, meshes=dense,
                     camera=camera)


def write_pair_manifest(path, records) -> None:
    """JSON lines {low_path, high_path, cube{center, half_extent}}."""
    with open(path, "w") as fh:
        for rec in records:
            cube = rec["cube"]
            if isinstance(cube, NormalizationCube):
                cube = {"center": list(cube.center),
                        "half_extent": cube.half_extent}
            fh.write(json.dumps({"low_path": str(rec["low_path"]),
                                 "high_path": str(rec["high_path"]),
                                 "cube": cube}, sort_keys=True) + "\n")


def read_pair_manifest(path) -> list:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            rec["cube"] = NormalizationCube(
                center=tuple(rec["cube"]["center"]),
                half_extent=rec["cube"]["half_extent"])
            records.append(rec)
    return records
