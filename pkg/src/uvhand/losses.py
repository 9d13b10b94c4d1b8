"""Training objectives over position maps and the meshes decoded from them.

Three alignment terms: masked L1 on map values, L1 on forward differences
(offset-invariant), and per-vertex L1 on decoded meshes. Every loss returns
a LossReport carrying the analytic gradient with respect to the prediction;
the vertex term chains through the map read-out, which is linear once the
mask is fixed (see UvDecoder).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import scipy.sparse
from scipy.spatial import cKDTree

from .errors import ShapeError, TemplateError
from .mesh import TriMesh
from .uvmap import UVPositionMap, UVTemplate


@dataclass(frozen=True)
class LossWeights:
    uv: float = 1.0
    grad: float = 1.0
    verts: float = 1.0
    scales: tuple = None        # None: last four scales weight 1, earlier 0

    def __post_init__(self):
        for name in ("uv", "grad", "verts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} weight must be nonnegative")
        if self.scales is not None:
            sc = tuple(float(s) for s in self.scales)
            if any(s < 0 for s in sc):
                raise ValueError("scale weights must be nonnegative")
            object.__setattr__(self, "scales", sc)

    def resolve_scales(self, n_scales: int) -> np.ndarray:
        if self.scales is None:
            w = np.ones(n_scales)
            w[:max(0, n_scales - 4)] = 0.0
            return w
        if len(self.scales) != n_scales:
            raise ShapeError(
                f"{len(self.scales)} scale weights for {n_scales} scales")
        return np.asarray(self.scales, dtype=np.float64)


@dataclass
class LossReport:
    total: float
    components: dict
    grad_wrt_prediction: object     # array, or list of arrays for multi-scale

    def to_json(self) -> str:
        """One JSON line with total and components (gradient omitted)."""
        return json.dumps({"total": self.total, **self.components},
                          sort_keys=True)


def _canon_maps(pred, gt, mask):
    """Normalize map inputs to (N,C,H,W) float64 plus an (N,1,H,W) mask.

    Accepts UVPositionMap, (C,H,W), or (N,C,H,W); returns a restore function
    mapping a canonical-shape gradient back to the caller's layout.
    """
    def unwrap(m):
        if isinstance(m, UVPositionMap):
            return m.data.transpose(2, 0, 1), m.mask
        return np.asarray(m, dtype=np.float64), None

    p, pmask = unwrap(pred)
    g, gmask = unwrap(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    if mask is None:
        if pmask is not None and gmask is not None:
            mask = pmask & gmask
        elif pmask is not None or gmask is not None:
            mask = pmask if pmask is not None else gmask
    if p.ndim == 3:
        batched = False
        p, g = p[None], g[None]
    elif p.ndim == 4:
        batched = True
    else:
        raise ShapeError(f"maps must be (C,H,W) or (N,C,H,W), got {p.shape}")
    n, _, h, w = p.shape
    if mask is None:
        m = np.ones((1, 1, h, w))
    else:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape == (h, w):
            m = m[None, None]
        elif m.shape == (n, h, w):
            m = m[:, None]
        elif m.shape != (n, 1, h, w):
            raise ShapeError(f"mask {m.shape} incompatible with maps {p.shape}")

    if isinstance(pred, UVPositionMap):
        restore = lambda grad: grad[0].transpose(1, 2, 0)
    elif batched:
        restore = lambda grad: grad
    else:
        restore = lambda grad: grad[0]
    return p.astype(np.float64), g.astype(np.float64), m, restore


def loss_uv(pred, gt, mask=None) -> LossReport:
    """Mean absolute difference over masked pixels x channels."""
    p, g, m, restore = _canon_maps(pred, gt, mask)
    count = float(np.broadcast_to(m, p.shape).sum())
    if count == 0:
        raise ShapeError("mask selects no pixels")
    diff = p - g
    value = float((np.abs(diff) * m).sum() / count)
    grad = np.sign(diff) * m / count
    return LossReport(total=value, components={"uv": value},
                      grad_wrt_prediction=restore(grad))


def loss_grad(pred, gt, mask=None) -> LossReport:
    """L1 alignment of forward differences along u and v.

    Differences that straddle the mask edge are excluded on both sides, so
    a constant in-mask offset costs nothing; the two directions pool into a
    single mean.
    """
    p, g, m, restore = _canon_maps(pred, gt, mask)
    mb = np.broadcast_to(m, p.shape)
    vu = mb[..., :, 1:] * mb[..., :, :-1]
    vv = mb[..., 1:, :] * mb[..., :-1, :]
    count = float(vu.sum() + vv.sum())
    if count == 0:
        raise ShapeError("mask admits no in-mask differences")
    du = (p[..., :, 1:] - p[..., :, :-1]) - (g[..., :, 1:] - g[..., :, :-1])
    dv = (p[..., 1:, :] - p[..., :-1, :]) - (g[..., 1:, :] - g[..., :-1, :])
    value = float(((np.abs(du) * vu).sum() + (np.abs(dv) * vv).sum()) / count)
    su = np.sign(du) * vu / count
    sv = np.sign(dv) * vv / count
    grad = np.zeros_like(p)
    grad[..., :, 1:] += su
    grad[..., :, :-1] -= su
    grad[..., 1:, :] += sv
    grad[..., :-1, :] -= sv
    return LossReport(total=value, components={"grad": value},
                      grad_wrt_prediction=restore(grad))


def _canon_verts(obj):
    if isinstance(obj, TriMesh):
        return obj.vertices, False
    v = np.asarray(obj, dtype=np.float64)
    if v.ndim == 2 and v.shape[1] == 3:
        return v, False
    if v.ndim == 3 and v.shape[2] == 3:
        return v, True
    raise ShapeError(f"vertices must be (V,3) or (N,V,3), got {v.shape}")


def loss_verts(pred_mesh, gt_mesh) -> LossReport:
    """Per-vertex L1 averaged over vertices.

    The per-vertex distance is the sum of absolute coordinate differences,
    so a uniform (d,0,0) offset costs exactly d.
    """
    p, _ = _canon_verts(pred_mesh)
    g, _ = _canon_verts(gt_mesh)
    if p.shape != g.shape:
        raise ShapeError(f"vertex counts differ: {p.shape} vs {g.shape}")
    n = p.size // 3
    diff = p - g
    value = float(np.abs(diff).sum() / n)
    grad = np.sign(diff) / n
    return LossReport(total=value, components={"verts": value},
                      grad_wrt_prediction=grad)


class UvDecoder:
    """sample_uv_to_mesh as a sparse linear operator for one (template, mask).

    With the mask fixed, the whole read-out (renormalized bilinear weights,
    nearest-pixel fallback, seam-copy averaging, denormalization) is linear
    in the pixel values and collapses into a (V, H*W) matrix applied per
    channel; backprop through the decode is the transpose.
    """

    def __init__(self, template: UVTemplate, mask: np.ndarray, bbox):
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {mask.shape}")
        if not mask.any():
            raise TemplateError("position map has an empty mask; nothing to decode")
        H, W = mask.shape
        region = scipy.ndimage.binary_dilation(
            mask, structure=np.ones((3, 3), dtype=bool))
        T = template.n_template_verts
        x = template.uv[:, 0] * W - 0.5
        y = template.uv[:, 1] * H - 0.5
        x0 = np.floor(x).astype(np.int64)
        y0 = np.floor(y).astype(np.int64)
        wx = x - x0
        wy = y - y0

        rows, cols, vals = [], [], []
        wsum = np.zeros(T)
        tids = np.arange(T)
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
                take = w > 0
                rows.append(tids[take])
                cols.append((yi_c * W + xi_c)[take])
                vals.append(w[take])
                wsum += w
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        supported = wsum > 1e-9
        keep = supported[rows]
        vals = vals[keep] / wsum[rows[keep]]
        rows, cols = rows[keep], cols[keep]

        self.fallback_verts = ~supported
        self.n_fallback = int(self.fallback_verts.sum())
        if self.n_fallback:
            rr, cc = np.nonzero(mask)
            tree = cKDTree(np.stack([cc, rr], axis=1))
            _, idx = tree.query(np.stack([x[~supported], y[~supported]], axis=1))
            rows = np.concatenate([rows, tids[~supported]])
            cols = np.concatenate([cols, rr[idx] * W + cc[idx]])
            vals = np.concatenate([vals, np.ones(self.n_fallback)])
        weights = scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(T, H * W))

        counts = np.bincount(template.vert_map, minlength=template.n_mesh_verts)
        seam = scipy.sparse.csr_matrix(
            (1.0 / counts[template.vert_map], (template.vert_map, tids)),
            shape=(template.n_mesh_verts, T))
        self.matrix = (seam @ weights).tocsr()
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
        self.lo = lo
        self.extent = hi - lo
        self.template = template
        self.n_verts = template.n_mesh_verts
        self.shape = (H, W)

    def _canon(self, maps):
        if isinstance(maps, UVPositionMap):
            maps = maps.data.transpose(2, 0, 1)
        maps = np.asarray(maps, dtype=np.float64)
        batched = maps.ndim == 4
        if not batched:
            maps = maps[None]
        if maps.shape[1] != 3 or maps.shape[2:] != self.shape:
            raise ShapeError(f"maps {maps.shape} do not match decoder "
                             f"(3,{self.shape[0]},{self.shape[1]})")
        return maps, batched

    def decode(self, maps) -> np.ndarray:
        """(N,3,H,W) or (3,H,W) map values -> (N,V,3) or (V,3) vertices."""
        maps, batched = self._canon(maps)
        n = maps.shape[0]
        flat = maps.reshape(n * 3, -1)
        out = (self.matrix @ flat.T).reshape(-1, n, 3).transpose(1, 0, 2)
        verts = self.lo + out * self.extent
        return verts if batched else verts[0]

    def backprop(self, dverts: np.ndarray) -> np.ndarray:
        """Gradient wrt decoded vertices -> gradient wrt map values."""
        dverts = np.asarray(dverts, dtype=np.float64)
        batched = dverts.ndim == 3
        if not batched:
            dverts = dverts[None]
        n = dverts.shape[0]
        dnorm = (dverts * self.extent).transpose(1, 0, 2).reshape(self.n_verts, n * 3)
        dflat = self.matrix.T @ dnorm
        dmaps = dflat.reshape(-1, n, 3).transpose(1, 2, 0).reshape(n, 3, *self.shape)
        return dmaps if batched else dmaps[0]


def loss_verts_from_map(pred, gt_verts, decoder: UvDecoder) -> LossReport:
    """Vertex L1 with the prediction decoded from a position map.

    The gradient is chained through the decoder back to map pixels; the
    report's gradient therefore has the map's shape, not the mesh's.
    """
    maps, batched = decoder._canon(pred)
    verts = decoder.decode(maps)
    gt, _ = _canon_verts(gt_verts)
    if gt.ndim == 2:
        gt = np.broadcast_to(gt, verts.shape)
    if gt.shape != verts.shape:
        raise ShapeError(f"decoded {verts.shape} vs ground truth {gt.shape}")
    n = verts.size // 3
    diff = verts - gt
    value = float(np.abs(diff).sum() / n)
    dmaps = decoder.backprop(np.sign(diff) / n)
    if isinstance(pred, UVPositionMap):
        grad = dmaps[0].transpose(1, 2, 0)
    else:
        grad = dmaps if batched else dmaps[0]
    return LossReport(total=value, components={"verts": value},
                      grad_wrt_prediction=grad)


def loss_affine(preds, gts, masks, weights: LossWeights = None,
                decoders=None) -> LossReport:
    """Multi-scale composite: sum_i w_i (l1 E_UV + l2 E_grad + l3 E_verts).

    preds/gts/masks are per-scale lists, coarse to fine; the vertex term at
    each scale compares the decoded prediction against the decoded ground
    truth, so `decoders` (one UvDecoder per scale) is required whenever the
    verts weight is positive.
    """
    weights = weights or LossWeights()
    n_scales = len(preds)
    if n_scales == 0:
        raise ShapeError("need at least one scale")
    if len(gts) != n_scales or len(masks) != n_scales:
        raise ShapeError(f"scale-count mismatch: {n_scales} preds, "
                         f"{len(gts)} gts, {len(masks)} masks")
    sw = weights.resolve_scales(n_scales)
    need_verts = weights.verts > 0 and (sw > 0).any()
    if need_verts:
        if decoders is None:
            raise ValueError("decoders required when the verts weight is positive")
        if len(decoders) != n_scales:
            raise ShapeError(f"{len(decoders)} decoders for {n_scales} scales")

    def zeros_like_pred(p):
        if isinstance(p, UVPositionMap):
            return np.zeros_like(p.data)
        return np.zeros_like(np.asarray(p, dtype=np.float64))

    parts = {"uv": 0.0, "grad": 0.0, "verts": 0.0}
    grads = []
    for i in range(n_scales):
        if sw[i] == 0:
            grads.append(zeros_like_pred(preds[i]))
            continue
        g_total = None

        def accumulate(report, coeff):
            nonlocal g_total
            contrib = coeff * report.grad_wrt_prediction
            g_total = contrib if g_total is None else g_total + contrib

        if weights.uv > 0:
            r = loss_uv(preds[i], gts[i], masks[i])
            parts["uv"] += sw[i] * weights.uv * r.total
            accumulate(r, sw[i] * weights.uv)
        if weights.grad > 0:
            r = loss_grad(preds[i], gts[i], masks[i])
            parts["grad"] += sw[i] * weights.grad * r.total
            accumulate(r, sw[i] * weights.grad)
        if need_verts:
            gt_v = decoders[i].decode(gts[i])
            r = loss_verts_from_map(preds[i], gt_v, decoders[i])
            parts["verts"] += sw[i] * weights.verts * r.total
            accumulate(r, sw[i] * weights.verts)
        if g_total is None:
            g_total = zeros_like_pred(preds[i])
        grads.append(g_total)
    total = float(sum(parts.values()))
    return LossReport(total=total, components=parts, grad_wrt_prediction=grads)


def loss_sr(pred, gt, mask, decoder: UvDecoder) -> LossReport:
    """Map-refinement objective: E_UV + E_verts at unit weights.

    Both meshes come from decoding the maps, so the single gradient covers
    the whole chain back to predicted pixels.
    """
    r_uv = loss_uv(pred, gt, mask)
    gt_v = decoder.decode(gt)
    r_v = loss_verts_from_map(pred, gt_v, decoder)
    total = r_uv.total + r_v.total
    grad = r_uv.grad_wrt_prediction + r_v.grad_wrt_prediction
    return LossReport(total=total,
                      components={"uv": r_uv.total, "verts": r_v.total},
                      grad_wrt_prediction=grad)
