"""Finite-difference verification of analytic gradients.

Used by the test suite and by the `gradcheck` CLI command. All checks run in
float64 with central differences; step size scales with the coordinate so the
check stays meaningful for values far from 1.
"""
from __future__ import annotations

import numpy as np


def central_difference(fn, arrays, which: int, flat_index: int, h: float) -> float:
    """d fn / d arrays[which].flat[flat_index] by central differences.

    `fn` must be a pure scalar function of the list of arrays; the probed
    array is copied, so fn never sees an aliased mutation.
    """
    plus = [a.copy() if i == which else a for i, a in enumerate(arrays)]
    plus[which].flat[flat_index] += h
    minus = [a.copy() if i == which else a for i, a in enumerate(arrays)]
    minus[which].flat[flat_index] -= h
    return (float(fn(plus)) - float(fn(minus))) / (2.0 * h)


def sample_flat_indices(rng: np.random.Generator, size: int, n: int) -> np.ndarray:
    if size <= n:
        return np.arange(size)
    return rng.choice(size, size=n, replace=False)


def max_rel_error(fn, arrays, grads, rng: np.random.Generator,
                  n_coords: int = 30, h_scale: float = 1e-6,
                  atol: float = 0.0, return_records: bool = False):
    """Worst relative disagreement between analytic and numeric gradients.

    fn: scalar function of the list of float64 arrays; grads: analytic
    gradients aligned with `arrays` (None entries are skipped). Samples up to
    n_coords coordinates per array. Relative error uses |a - n| / max(|a| +
    |n|, 1e-8). Coordinates where both sides are within `atol` of zero count
    as exact agreement: central differences cannot resolve derivatives below
    roughly eps*|f|/h, so a zero analytic gradient probed against 1e-12 of
    cancellation noise is a false positive, not a mismatch.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    records = []
    worst = 0.0
    for which, grad in enumerate(grads):
        if grad is None:
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != arrays[which].shape:
            raise ValueError(
                f"gradient {which} has shape {grad.shape}, parameter has {arrays[which].shape}")
        for flat_index in sample_flat_indices(rng, arrays[which].size, n_coords):
            x = float(arrays[which].flat[flat_index])
            h = h_scale * max(1.0, abs(x))
            numeric = central_difference(fn, arrays, which, int(flat_index), h)
            analytic = float(grad.flat[flat_index])
            if abs(analytic) <= atol and abs(numeric) <= atol:
                rel = 0.0
            else:
                rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
            records.append((which, int(flat_index), analytic, numeric, rel))
            worst = max(worst, rel)
    if return_records:
        return worst, records
    return worst


def assert_gradients_match(fn, arrays, grads, rng: np.random.Generator,
                           n_coords: int = 30, h_scale: float = 1e-6,
                           rel_tol: float = 1e-5):
    worst, records = max_rel_error(fn, arrays, grads, rng, n_coords=n_coords,
                                   h_scale=h_scale, return_records=True)
    if worst >= rel_tol:
        bad = max(records, key=lambda r: r[4])
        raise AssertionError(
            f"gradient mismatch: param {bad[0]} flat[{bad[1]}] analytic={bad[2]:.6e} "
            f"numeric={bad[3]:.6e} rel={bad[4]:.3e} (tol {rel_tol:g})")
    return worst


def _separated(rng, shape, gap=0.05):
    """Pred/gt pair whose differences stay away from the L1 kink."""
    gt = rng.random(shape)
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return gt + signs * (gap + rng.random(shape) * 0.3), gt


def gradient_suite(n_instances: int = 20, seed: int = 0, n_coords: int = 10):
    """Worst finite-difference relative error for every differentiable op.

    Sweeps `n_instances` randomized instances of each loss, of grid sampling,
    and of each network layer; returns {op name: max relative error}. Shapes
    are kept small so the full sweep finishes quickly, but every backward
    path (including the decoder chain inside the vertex losses) is hit.
    """
    from . import losses, net, warp
    from .synthetic import toy_hand_mesh
    from .uvmap import NormalizationCube, make_template, rasterize_mesh_to_uv

    rng = np.random.default_rng(seed)
    hand = toy_hand_mesh()
    template = make_template(hand, form="UV1")
    cube = NormalizationCube.from_mesh(hand)
    bbox = (cube.bbox_min, cube.bbox_max)
    res_pair = (12, 24)
    masks = {r: rasterize_mesh_to_uv(hand, template, r, cube=cube).mask
             for r in res_pair}
    decoders = {r: losses.UvDecoder(template, masks[r], bbox) for r in res_pair}

    def mask_for(r):
        return masks[r]

    def sep_maps(r, channels=3, gap=0.05):
        """gt plus an offset whose values and forward differences clear gap.

        One sign per channel keeps every absolute-value term (pointwise,
        finite differences, and decoded vertices, which are convex pixel
        combinations) away from its kink under the FD step.
        """
        gt = rng.random((channels, r, r))
        sign = np.where(rng.random((channels, 1, 1)) < 0.5, -1.0, 1.0)
        inc_u = gap + rng.random((channels, 1, r)) * 0.1
        inc_v = gap + rng.random((channels, r, 1)) * 0.1
        off = gap + np.cumsum(inc_u, axis=2) + np.cumsum(inc_v, axis=1)
        return gt + sign * off, gt

    worst: dict = {}
    noise_floor = 1e-9

    def record(name, value):
        worst[name] = max(worst.get(name, 0.0), value)

    def checked(fn, arrays, grads):
        return max_rel_error(fn, arrays, grads, rng, n_coords=n_coords,
                             atol=noise_floor)

    def through_tape(name, build, arrays):
        """Check a tape op: build() maps Tensors to one output Tensor."""
        tensors = [net.Tensor(a, requires_grad=True) for a in arrays]
        out = build(tensors)
        proj = rng.normal(size=out.shape)

        def fn(vals):
            ts = [net.Tensor(v) for v in vals]
            return float((build(ts).data * proj).sum())

        net.backward([out], [proj])
        record(name, checked(fn, arrays, [t.grad for t in tensors]))

    camera = net.default_camera(res_pair[0] * 2)
    for _ in range(n_instances):
        r = res_pair[0]

        pred, gt = sep_maps(r)
        rep = losses.loss_uv(pred, gt, mask_for(r))
        record("loss_uv", checked(
            lambda a: losses.loss_uv(a[0], gt, mask_for(r)).total,
            [pred], [rep.grad_wrt_prediction]))

        pred, gt = sep_maps(r)
        rep = losses.loss_grad(pred, gt, mask_for(r))
        record("loss_grad", checked(
            lambda a: losses.loss_grad(a[0], gt, mask_for(r)).total,
            [pred], [rep.grad_wrt_prediction]))

        pv, gv = _separated(rng, (hand.vertices.shape[0], 3))
        rep = losses.loss_verts(pv, gv)
        record("loss_verts", checked(
            lambda a: losses.loss_verts(a[0], gv).total,
            [pv], [rep.grad_wrt_prediction]))

        preds, gts, ms = [], [], []
        for r in res_pair:
            p, g = sep_maps(r)
            preds.append(p)
            gts.append(g)
            ms.append(mask_for(r))
        decs = [decoders[r] for r in res_pair]
        w = losses.LossWeights(scales=(1.0, 1.0))
        rep = losses.loss_affine(preds, gts, ms, weights=w, decoders=decs)

        def fn_affine(a):
            return losses.loss_affine(a, gts, ms, weights=w,
                                      decoders=decs).total

        record("loss_affine", checked(fn_affine, preds,
                                      rep.grad_wrt_prediction))

        r = res_pair[1]
        pred, gt = sep_maps(r)
        rep = losses.loss_sr(pred, gt, mask_for(r), decoders[r])
        record("loss_sr", checked(
            lambda a: losses.loss_sr(a[0], gt, mask_for(r),
                                     decoders[r]).total,
            [pred], [rep.grad_wrt_prediction]))

        feat = rng.normal(size=(1, 2, 6, 6))
        gx = 0.3 + rng.random((4, 5)) * 4.9
        gy = 0.3 + rng.random((4, 5)) * 4.9
        proj = rng.normal(size=(1, 2, 4, 5))
        _, cache = warp.grid_sample_forward(feat, warp.SampleGrid(x=gx, y=gy))
        dfeat, dgx, dgy = warp.grid_sample_backward(proj, cache)

        def fn_gs(a):
            out, _ = warp.grid_sample_forward(a[0],
                                              warp.SampleGrid(x=a[1], y=a[2]))
            return float((out * proj).sum())

        record("grid_sample", checked(fn_gs, [feat, gx, gy],
                                      [dfeat, dgx, dgy]))

        x = rng.normal(size=(2, 3, 6, 6))
        wgt = rng.normal(size=(4, 3, 3, 3)) * 0.4
        b = rng.normal(size=(4,)) * 0.1
        through_tape("conv2d",
                     lambda t: net.conv2d(t[0], t[1], t[2]), [x, wgt, b])

        x = rng.normal(size=(3, 2, 5, 5))
        gamma = 0.5 + rng.random((2,))
        beta = rng.normal(size=(2,)) * 0.3
        through_tape(
            "batchnorm",
            lambda t: net.batchnorm(
                t[0], t[1], t[2],
                {"mean": np.zeros(2), "var": np.ones(2)}, training=True),
            [x, gamma, beta])

        x = rng.normal(size=(2, 3, 6, 6))
        x[np.abs(x) < 0.05] = 0.2        # keep away from the ReLU kink
        through_tape("relu", lambda t: net.relu(t[0]), [x])

        x = rng.normal(size=(2, 3, 6, 6)) * 2.0
        through_tape("sigmoid", lambda t: net.sigmoid(t[0]), [x])

        x = rng.normal(size=(2, 3, 5, 5))
        through_tape("upsample2x", lambda t: net.upsample2x(t[0]), [x])

        a = rng.normal(size=(2, 2, 5, 5))
        c = rng.normal(size=(2, 3, 5, 5))
        through_tape("concat", lambda t: net.concat(t), [a, c])

        # Pin samples 0.2+ texels from every boundary so the FD step never
        # crosses a bilinear cell; invert the camera to get uv from grid x/y.
        fh = fw = 6
        k = camera.image_size / fw
        gxy = (rng.integers(1, fw - 2, size=(2, 2, fh, fw))
               + 0.2 + 0.6 * rng.random((2, 2, fh, fw)))
        img = (gxy + 0.5) * k - 0.5
        uv = np.empty((2, 3, fh, fw))
        uv[:, 0] = (img[:, 0] - camera.principal[0]) / camera.scale
        uv[:, 1] = (img[:, 1] - camera.principal[1]) / camera.scale
        uv[:, 2] = rng.random((2, fh, fw))
        feat = rng.normal(size=(2, 2, fh, fw))
        through_tape(
            "affine_connect",
            lambda t: net.affine_connect(t[0], t[1], camera,
                                         net.DEFAULT_BBOX), [uv, feat])

    return worst
