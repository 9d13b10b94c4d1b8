"""Projection-based feature warping: camera models, bilinear grid sampling
with analytic gradients, and the affine-connection operator that aligns
encoder features to UV space using the currently predicted position map.

Coordinate conventions used throughout:
  * grid/sample coordinates are in pixel units with integer values at pixel
    centers; (0,0) is the center of the top-left pixel, x runs along columns;
  * out-of-bounds samples contribute zeros (zero padding, not border clamp);
  * image resizing maps dst -> src via (dst + 0.5) * (src_size/dst_size) - 0.5
    with border clamping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

_SENTINEL = -1.0e4  # source coordinate for invalid samples; far outside any frame


@dataclass(frozen=True)
class Camera:
    """Orthographic or weak-perspective projection onto the image plane.

    `scale` is in pixels per meter at the native `image_size`. For the
    weak-perspective mode the effective scale of a point is
    scale / (1 + z / depth_offset), so depth_offset acts as the reference
    camera distance.
    """

    scale: float
    principal: tuple = (0.0, 0.0)
    image_size: int = 256
    mode: str = "orthographic"
    depth_offset: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("camera scale must be positive")
        if self.mode not in ("orthographic", "weak_perspective"):
            raise ValueError(f"unknown camera mode {self.mode!r}")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Map (...,3) points in meters to (...,2) pixel coordinates."""
        p = np.asarray(points, dtype=np.float64)
        if self.mode == "orthographic":
            s = self.scale
            x = s * p[..., 0] + self.principal[0]
            y = s * p[..., 1] + self.principal[1]
        else:
            s = self.scale / (1.0 + p[..., 2] / self.depth_offset)
            x = s * p[..., 0] + self.principal[0]
            y = s * p[..., 1] + self.principal[1]
        return np.stack([x, y], axis=-1)

    def project_with_jacobian(self, points: np.ndarray):
        """Projection plus d(x,y)/d(X,Y,Z) as (...,2,3)."""
        p = np.asarray(points, dtype=np.float64)
        out = self.project(p)
        jac = np.zeros(p.shape[:-1] + (2, 3))
        if self.mode == "orthographic":
            jac[..., 0, 0] = self.scale
            jac[..., 1, 1] = self.scale
        else:
            denom = 1.0 + p[..., 2] / self.depth_offset
            s = self.scale / denom
            jac[..., 0, 0] = s
            jac[..., 1, 1] = s
            jac[..., 0, 2] = -s * p[..., 0] / (denom * self.depth_offset)
            jac[..., 1, 2] = -s * p[..., 1] / (denom * self.depth_offset)
        return out, jac


@dataclass
class SampleGrid:
    """Per-output-pixel source coordinates in feature-map pixel units.

    `x`/`y` have the spatial size of the UV level they were projected from;
    `valid` marks samples whose UV pixel lies inside the chart mask and whose
    projection lands in frame. Invalid samples carry a far-off sentinel
    coordinate so that sampling them yields zero.
    """

    x: np.ndarray
    y: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape:
            raise ShapeError("grid x/y shape mismatch")
        if self.valid is None:
            self.valid = np.ones(self.x.shape, dtype=bool)
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all()):
            raise ShapeError("grid coordinates must be finite")


# ---------------------------------------------------------------------------
# bilinear point sampling (zero padding), with gradients
# ---------------------------------------------------------------------------

def bilinear_sample_forward(feat: np.ndarray, gx: np.ndarray, gy: np.ndarray):
    """Sample (N,C,H,W) features at per-batch points gx/gy of shape (N,P).

    Returns (values (N,C,P), cache). Out-of-bounds corners contribute zero.
    """
    feat = np.asarray(feat, dtype=np.float64)
    N, C, H, W = feat.shape
    gx = np.asarray(gx, dtype=np.float64).reshape(N, -1)
    gy = np.asarray(gy, dtype=np.float64).reshape(N, -1)
    # guard against overflow in the int cast for sentinel coordinates
    gx = np.clip(gx, -2.0 * max(W, 1) - 2, 2.0 * max(W, 1) + 2)
    gy = np.clip(gy, -2.0 * max(H, 1) - 2, 2.0 * max(H, 1) + 2)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    wx = gx - x0
    wy = gy - y0

    nid = np.arange(N)[:, None]
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            v = feat[nid, :, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]  # (N,P,C)
            v = np.where(inb[..., None], v, 0.0)
            w = (wx if dx else 1.0 - wx) * (wy if dy else 1.0 - wy)
            corners.append((xi, yi, inb, v, w))
    out = sum(v * w[..., None] for _, _, _, v, w in corners)
    cache = (feat.shape, corners, wx, wy)
    return np.transpose(out, (0, 2, 1)), cache


def bilinear_sample_backward(dout: np.ndarray, cache):
    """Gradients of bilinear_sample_forward: (dfeat (N,C,H,W), dgx, dgy (N,P))."""
    (N, C, H, W), corners, wx, wy = cache
    dout_pc = np.transpose(np.asarray(dout, dtype=np.float64), (0, 2, 1))  # (N,P,C)
    dfeat = np.zeros((N, H * W, C))
    nid = np.arange(N)[:, None]
    for xi, yi, inb, _, w in corners:
        lin = np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
        contrib = np.where(inb[..., None], dout_pc * w[..., None], 0.0)
        np.add.at(dfeat, (nid, lin), contrib)
    dfeat = np.transpose(dfeat.reshape(N, H, W, C), (0, 3, 1, 2))

    (x0y0, x1y0, x0y1, x1y1) = (corners[0][3], corners[1][3], corners[2][3], corners[3][3])
    dval_dx = (1.0 - wy)[..., None] * (x1y0 - x0y0) + wy[..., None] * (x1y1 - x0y1)
    dval_dy = (1.0 - wx)[..., None] * (x0y1 - x0y0) + wx[..., None] * (x1y1 - x1y0)
    dgx = (dout_pc * dval_dx).sum(axis=2)
    dgy = (dout_pc * dval_dy).sum(axis=2)
    return dfeat, dgx, dgy


def grid_sample_forward(features: np.ndarray, grid: SampleGrid):
    """Warp (N,C,H,W) features by a SampleGrid; output spatial size = grid size."""
    feat = np.asarray(features, dtype=np.float64)
    if feat.ndim != 4:
        raise ShapeError("features must be (N,C,H,W)")
    N = feat.shape[0]
    gh, gw = grid.x.shape[-2:]
    if grid.x.ndim == 2:
        gx = np.broadcast_to(grid.x.reshape(1, -1), (N, gh * gw))
        gy = np.broadcast_to(grid.y.reshape(1, -1), (N, gh * gw))
        shared = True
    else:
        if grid.x.shape[0] != N:
            raise ShapeError("per-batch grid batch size mismatch")
        gx = grid.x.reshape(N, -1)
        gy = grid.y.reshape(N, -1)
        shared = False
    out, cache = bilinear_sample_forward(feat, gx, gy)
    C = feat.shape[1]
    return out.reshape(N, C, gh, gw), (cache, (gh, gw), shared)


def grid_sample_backward(dout: np.ndarray, cache):
    inner, (gh, gw), shared = cache
    N, C = dout.shape[:2]
    dfeat, dgx, dgy = bilinear_sample_backward(dout.reshape(N, C, -1), inner)
    if shared:
        dgx = dgx.sum(axis=0).reshape(gh, gw)
        dgy = dgy.sum(axis=0).reshape(gh, gw)
    else:
        dgx = dgx.reshape(N, gh, gw)
        dgy = dgy.reshape(N, gh, gw)
    return dfeat, dgx, dgy


def grid_sample(features: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Convenience wrapper returning only the warped features."""
    out, _ = grid_sample_forward(features, grid)
    return out


# ---------------------------------------------------------------------------
# bilinear resize (border clamp), with gradient wrt the input
# ---------------------------------------------------------------------------

def _resize_axis_coords(out_size: int, in_size: int):
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    w = src - i0
    return i0, i1, w


def bilinear_resize_forward(x: np.ndarray, out_h: int, out_w: int):
    """Resize (N,C,H,W) to (N,C,out_h,out_w); bilinear, border-clamped."""
    x = np.asarray(x, dtype=np.float64)
    N, C, H, W = x.shape
    y0, y1, wy = _resize_axis_coords(out_h, H)
    x0, x1, wx = _resize_axis_coords(out_w, W)
    top = x[:, :, y0, :] * (1 - wy)[None, None, :, None] + x[:, :, y1, :] * wy[None, None, :, None]
    out = top[:, :, :, x0] * (1 - wx) + top[:, :, :, x1] * wx
    return out, ((N, C, H, W), y0, y1, wy, x0, x1, wx)


def bilinear_resize_backward(dout: np.ndarray, cache) -> np.ndarray:
    (N, C, H, W), y0, y1, wy, x0, x1, wx = cache
    dout = np.asarray(dout, dtype=np.float64)
    # scatter along one axis at a time; add.at needs the fancy index up front
    dtop = np.zeros((N, C, len(y0), W)).transpose(3, 0, 1, 2)
    np.add.at(dtop, x0, (dout * (1 - wx)).transpose(3, 0, 1, 2))
    np.add.at(dtop, x1, (dout * wx).transpose(3, 0, 1, 2))
    dtop = dtop.transpose(1, 2, 3, 0)
    dx = np.zeros((N, C, H, W)).transpose(2, 0, 1, 3)
    np.add.at(dx, y0, (dtop * (1 - wy)[None, None, :, None]).transpose(2, 0, 1, 3))
    np.add.at(dx, y1, (dtop * wy[None, None, :, None]).transpose(2, 0, 1, 3))
    return dx.transpose(1, 2, 0, 3)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out, _ = bilinear_resize_forward(x, out_h, out_w)
    return out


# ---------------------------------------------------------------------------
# UV map -> sample grid projection
# ---------------------------------------------------------------------------

def uv_grid_from_array(uv: np.ndarray, bbox, camera: Camera, feature_size,
                       mask: np.ndarray | None = None):
    """Project a normalized (3,h,w) UV position map into feature-map pixels.

    Returns (SampleGrid, jacobian (2,3,h,w) of grid coords wrt the normalized
    UV values). Masked pixels get the sentinel coordinate and a zero jacobian.
    Out-of-frame projections are flagged invalid but keep their (clamped)
    coordinates.
    """
    uv = np.asarray(uv, dtype=np.float64)
    if uv.ndim != 3 or uv.shape[0] != 3:
        raise ShapeError("uv map must be (3,h,w)")
    fh, fw = (feature_size, feature_size) if np.isscalar(feature_size) else feature_size
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bbox)
    span = hi - lo
    pts = lo[:, None, None] + uv * span[:, None, None]           # (3,h,w) meters
    xy, jac = camera.project_with_jacobian(np.moveaxis(pts, 0, -1))
    k = camera.image_size / fw
    ky = camera.image_size / fh
    gx = (xy[..., 0] + 0.5) / k - 0.5
    gy = (xy[..., 1] + 0.5) / ky - 0.5
    # chain: grid <- image px <- meters <- normalized uv value
    jac_grid = np.moveaxis(jac, (-2, -1), (0, 1))                # (2,3,h,w)
    jac_grid = jac_grid * span[None, :, None, None]
    jac_grid[0] /= k
    jac_grid[1] /= ky

    in_frame = (gx > -1.0) & (gx < fw) & (gy > -1.0) & (gy < fh)
    valid = in_frame.copy()
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != gx.shape:
            raise ShapeError(f"mask shape {m.shape} does not match uv level {gx.shape}")
        valid &= m
        gx = np.where(m, gx, _SENTINEL)
        gy = np.where(m, gy, _SENTINEL)
        jac_grid = np.where(m[None, None], jac_grid, 0.0)
    gx = np.clip(gx, _SENTINEL, 2.0 * fw)
    gy = np.clip(gy, _SENTINEL, 2.0 * fh)
    return SampleGrid(x=gx, y=gy, valid=valid), jac_grid


def project_uv_to_grid(uvmap, camera: Camera, feature_size) -> SampleGrid:
    """SampleGrid for a UVPositionMap object (duck-typed: data/bbox/mask)."""
    uv = np.moveaxis(np.asarray(uvmap.data, dtype=np.float64), -1, 0)
    grid, _ = uv_grid_from_array(uv, uvmap.bbox, camera, feature_size, mask=uvmap.mask)
    return grid


# ---------------------------------------------------------------------------
# affine connection: warp encoder features into UV space, then upsample 2x
# ---------------------------------------------------------------------------

def affine_connection_forward(uv: np.ndarray, feat: np.ndarray, camera: Camera,
                              bbox, mask: np.ndarray | None = None):
    """Align encoder features with the UV layout predicted so far.

    uv: (N,3,h,w) normalized position maps; feat: (N,C,h,w) encoder features
    at the same level. Each UV pixel's 3D point is projected into the image
    and the features are sampled there; the warped result is upsampled 2x.
    Returns ((N,C,2h,2w), cache).
    """
    uv = np.asarray(uv, dtype=np.float64)
    feat = np.asarray(feat, dtype=np.float64)
    if uv.shape[0] != feat.shape[0]:
        raise ShapeError("uv/feature batch size mismatch")
    if uv.shape[-2:] != feat.shape[-2:]:
        raise ShapeError(f"uv level {uv.shape[-2:]} must pair with encoder level {feat.shape[-2:]}")
    N, _, h, w = uv.shape
    grids = []
    jacs = []
    for n in range(N):
        g, j = uv_grid_from_array(uv[n], bbox, camera, (feat.shape[2], feat.shape[3]), mask=mask)
        grids.append(g)
        jacs.append(j)
    gx = np.stack([g.x for g in grids])
    gy = np.stack([g.y for g in grids])
    valid = np.stack([g.valid for g in grids])
    warped, samp_cache = grid_sample_forward(feat, SampleGrid(x=gx, y=gy, valid=valid))
    warped = warped * valid[:, None]
    out, up_cache = bilinear_resize_forward(warped, 2 * h, 2 * w)
    cache = (samp_cache, up_cache, np.stack(jacs), valid, uv.shape)
    return out, cache


def affine_connection_backward(dout: np.ndarray, cache):
    """Gradients wrt (uv, feat)."""
    samp_cache, up_cache, jacs, valid, uv_shape = cache
    dwarped = bilinear_resize_backward(dout, up_cache)
    dwarped = dwarped * valid[:, None]
    dfeat, dgx, dgy = grid_sample_backward(dwarped, samp_cache)
    # jacs: (N,2,3,h,w); dgx/dgy: (N,h,w)
    duv = dgx[:, None] * jacs[:, 0] + dgy[:, None] * jacs[:, 1]
    return duv.reshape(uv_shape), dfeat


def affine_connection(uvmap_or_array, encoder_feat: np.ndarray, camera: Camera,
                      bbox=None, mask: np.ndarray | None = None) -> np.ndarray:
    """Forward-only affine connection.

    Accepts either a UVPositionMap (bbox/mask taken from it) or a normalized
    (N,3,h,w)/(3,h,w) array plus an explicit bbox.
    """
    if hasattr(uvmap_or_array, "data") and hasattr(uvmap_or_array, "bbox"):
        uv = np.moveaxis(np.asarray(uvmap_or_array.data, dtype=np.float64), -1, 0)[None]
        bbox = uvmap_or_array.bbox
        mask = uvmap_or_array.mask if mask is None else mask
    else:
        uv = np.asarray(uvmap_or_array, dtype=np.float64)
        if uv.ndim == 3:
            uv = uv[None]
        if bbox is None:
            raise ValueError("bbox required when passing a raw array")
    feat = np.asarray(encoder_feat, dtype=np.float64)
    squeeze = feat.ndim == 3
    if squeeze:
        feat = feat[None]
    out, _ = affine_connection_forward(uv, feat, camera, bbox, mask=mask)
    return out[0] if squeeze else out
