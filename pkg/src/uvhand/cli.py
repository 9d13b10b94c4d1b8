"""Command-line surface: encode/decode maps, registration, training, checks.

Exit codes: 0 success, 1 usage error (bad flags, unknown subcommand), 2 data
error (unreadable or inconsistent inputs, failed numerical checks). Heavy
imports happen inside the handlers so that --threads / UVHAND_THREADS can cap
the BLAS pool before numpy first loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "OMP_NUM_THREADS", "NUMEXPR_NUM_THREADS")

# recognized run-config keys -> value kind; path kinds must exist at load
_CONFIG_KEYS = {
    "mesh": "path", "template": "path", "source": "path", "target": "path",
    "uvp": "path", "checkpoint": "path",
    "resolution": "int", "seed": "int", "steps": "int", "batch": "int",
    "samples": "int", "threads": "int", "max_iter": "int",
    "depth_resolution": "int", "instances": "int", "times": "int",
    "lr": "float", "sigma": "float", "tolerance": "float", "tol": "float",
    "amplitude": "float", "cube_half_extent": "float",
    "cube_center": "vec3",
}


class _UsageError(Exception):
    """Raised instead of argparse's SystemExit so main() maps it to code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _vec3(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        values = tuple(float(p) for p in parts)
    except ValueError:
        values = ()
    if len(values) != 3:
        raise argparse.ArgumentTypeError(
            f"expected three comma-separated numbers, got {text!r}")
    return values


def load_run_config(path) -> dict:
    """Parse a `key = value` file; every key must be known, paths must exist."""
    from .errors import FormatError
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or not key or not val:
                raise FormatError(f"{path}:{lineno}: expected `key = value`")
            if key not in _CONFIG_KEYS:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
            kind = _CONFIG_KEYS[key]
            try:
                if kind == "int":
                    parsed = int(val)
                elif kind == "float":
                    parsed = float(val)
                elif kind == "vec3":
                    parts = val.replace(",", " ").split()
                    if len(parts) != 3:
                        raise ValueError
                    parsed = tuple(float(p) for p in parts)
                else:
                    parsed = val
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: bad {kind} value {val!r}") from None
            if kind == "path" and not os.path.exists(parsed):
                raise FormatError(
                    f"{path}:{lineno}: {key} refers to a missing file: "
                    f"{parsed}")
            values[key] = parsed
    return values


class _Options:
    """Merged option view with CLI flag > config file > built-in default."""

    def __init__(self, args):
        self._args = args
        self._config = (load_run_config(args.config)
                        if getattr(args, "config", None) else {})
        self.resolved = {}

    def get(self, name, default=None):
        value = getattr(self._args, name, None)
        if value is not None:
            source = "cli"
        elif name in self._config:
            value, source = self._config[name], "config"
        else:
            value, source = default, "default"
        self.resolved[name] = (value, source)
        return value

    def require(self, name):
        value = self.get(name)
        if value is None:
            raise _UsageError(f"missing required option --{name.replace('_', '-')}")
        return value

    def announce(self):
        if getattr(self._args, "verbose", False):
            for key in sorted(self.resolved):
                value, source = self.resolved[key]
                print(f"{key} = {value}  [{source}]", file=sys.stderr)


def _apply_thread_cap(argv) -> None:
    """Cap BLAS pools before numpy import; flag overrides, env is fallback."""
    value = None
    from_flag = False
    for i, token in enumerate(argv):
        if token == "--threads" and i + 1 < len(argv):
            value, from_flag = argv[i + 1], True
        elif token.startswith("--threads="):
            value, from_flag = token.split("=", 1)[1], True
    if value is None:
        value = os.environ.get("UVHAND_THREADS")
    if value is None:
        return
    try:
        count = str(max(1, int(value)))
    except ValueError:
        return                          # argparse reports the bad value later
    for var in _THREAD_VARS:
        if from_flag:
            os.environ[var] = count
        else:
            os.environ.setdefault(var, count)


def _load_points(path):
    from .icp import PointCloud, load_ply
    from .mesh import load_obj
    if str(path).lower().endswith(".ply"):
        return load_ply(path)
    return PointCloud(points=load_obj(path).vertices)


def _cube_from_options(opts, fallback_points=None):
    from .errors import FormatError
    from .uvmap import NormalizationCube
    center = opts.get("cube_center")
    half = opts.get("cube_half_extent")
    if (center is None) != (half is None):
        raise FormatError(
            "cube_center and cube_half_extent must be given together")
    if center is not None:
        return NormalizationCube(center=tuple(center),
                                 half_extent=float(half))
    if fallback_points is None:
        return None
    return NormalizationCube.from_mesh(fallback_points)


def _cmd_encode(args) -> int:
    opts = _Options(args)
    mesh_path = opts.require("mesh")
    template_path = opts.require("template")
    out = opts.require("out")
    res = int(opts.get("resolution", 256))
    opts.get("cube_center")
    opts.get("cube_half_extent")
    opts.announce()
    from .mesh import load_obj
    from .uvmap import load_template, rasterize_mesh_to_uv, write_uvp
    mesh = load_obj(mesh_path)
    template = load_template(template_path)
    cube = _cube_from_options(opts, fallback_points=mesh)
    uvmap = rasterize_mesh_to_uv(mesh, template, res, cube=cube)
    write_uvp(out, uvmap)
    print(f"wrote {out}: {res}x{res} map, "
          f"{int(uvmap.mask.sum())} chart pixels")
    return 0


def _cmd_decode(args) -> int:
    opts = _Options(args)
    uvp_path = opts.require("uvp")
    template_path = opts.require("template")
    out = opts.require("out")
    opts.announce()
    from .mesh import save_obj
    from .uvmap import load_template, read_uvp, sample_uv_to_mesh
    uvmap = read_uvp(uvp_path)
    template = load_template(template_path)
    mesh = sample_uv_to_mesh(uvmap, template)
    save_obj(mesh, out)
    print(f"wrote {out}: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    return 0


def _cmd_unpool(args) -> int:
    opts = _Options(args)
    mesh_path = opts.require("mesh")
    out = opts.get("out")
    times = int(opts.get("times", 1))
    if times < 1:
        raise _UsageError("--times must be at least 1")
    opts.announce()
    from .mesh import edge_unpool, load_obj, save_obj
    mesh = load_obj(mesh_path)
    for _ in range(times):
        mesh = edge_unpool(mesh)
    print(f"unpooled: {mesh.n_vertices} vertices, {mesh.n_faces} faces")
    if out:
        save_obj(mesh, out)
        print(f"wrote {out}")
    return 0


def _cmd_register(args) -> int:
    opts = _Options(args)
    source_path = opts.require("source")
    target_path = opts.require("target")
    out = opts.get("out")
    max_iter = int(opts.get("max_iter", 50))
    tolerance = float(opts.get("tolerance", 1e-9))
    estimate_scale = bool(opts.get("estimate_scale", False))
    opts.announce()
    from .icp import IcpParams, icp_register
    from .mesh import load_obj, save_obj
    source = load_obj(source_path)
    target = _load_points(target_path)
    params = IcpParams(max_iterations=max_iter, tolerance=tolerance,
                       estimate_scale=estimate_scale)
    result = icp_register(source, target, params)
    print(f"iterations: {len(result.residuals)}")
    print(f"residual: {result.residuals[-1]:.6e}")
    print(f"scale: {result.scale:.6f}")
    print(f"converged: {result.converged}")
    if out:
        save_obj(result.fitted, out)
        print(f"wrote {out}")
    return 0


def _cmd_smooth(args) -> int:
    opts = _Options(args)
    uvp_path = opts.require("uvp")
    out = opts.require("out")
    sigma = float(opts.require("sigma"))
    opts.announce()
    from .srdata import gaussian_smooth_uv
    from .uvmap import read_uvp, write_uvp
    smoothed = gaussian_smooth_uv(read_uvp(uvp_path), sigma)
    write_uvp(out, smoothed)
    print(f"wrote {out}: sigma {sigma:g}")
    return 0


def _cmd_sr_pair(args) -> int:
    opts = _Options(args)
    coarse_path = opts.require("coarse")
    dense_path = opts.require("dense")
    template_path = opts.require("template")
    out_low = opts.require("out_low")
    out_high = opts.require("out_high")
    res = int(opts.get("resolution", 256))
    sigma = opts.get("sigma")
    out_smooth = opts.get("out_smooth")
    manifest = opts.get("manifest")
    if out_smooth and sigma is None:
        raise _UsageError("--out-smooth requires --sigma")
    opts.announce()
    from .mesh import load_obj
    from .srdata import make_sr_pair, write_pair_manifest
    from .uvmap import load_template, write_uvp
    pair = make_sr_pair(load_obj(coarse_path), load_obj(dense_path),
                        load_template(template_path), resolution=res,
                        smooth_sigma=None if sigma is None else float(sigma))
    write_uvp(out_low, pair.low)
    write_uvp(out_high, pair.high)
    print(f"wrote {out_low} and {out_high} ({res}x{res})")
    if out_smooth:
        write_uvp(out_smooth, pair.smoothed)
        print(f"wrote {out_smooth}")
    if manifest:
        write_pair_manifest(manifest, [{
            "low_path": out_low, "high_path": out_high,
            "cube": pair.low.cube()}])
        print(f"wrote {manifest}")
    return 0


def _cmd_train_toy(args) -> int:
    opts = _Options(args)
    model = args.model
    out = opts.require("out")
    seed = int(opts.get("seed", 0))
    batch = opts.get("batch")
    batch = None if batch is None else int(batch)
    log_path = opts.get("log")
    if model == "affinenet":
        steps = int(opts.get("steps", 3000))
        lr = float(opts.get("lr", 1e-4))
        samples = int(opts.get("samples", 8))
    else:
        steps = int(opts.get("steps", 400))
        lr = float(opts.get("lr", 1e-3))
        samples = int(opts.get("samples", 200))
    opts.announce()
    import numpy as np

    from .net import AffineNet, SRNet, toy_config
    from .srdata import make_sr_dataset
    from .train import (TrainLog, evaluate_sr_improvement, make_toy_dataset,
                        train_affinenet, train_srnet)
    log = TrainLog() if log_path else None
    if model == "affinenet":
        dataset = make_toy_dataset(n_samples=samples, seed=seed)
        net = AffineNet(toy_config(), np.random.default_rng(seed))
        reports = train_affinenet(net, dataset, steps, lr=lr,
                                  batch_size=batch, seed=seed, log=log,
                                  checkpoint_path=out)
    else:
        dataset = make_sr_dataset(n_pairs=samples, seed=seed)
        net = SRNet(np.random.default_rng(seed), width_multiplier=1 / 8)
        reports = train_srnet(net, dataset.inputs, dataset.targets,
                              dataset.mask, dataset.decoder(), steps, lr=lr,
                              batch_size=batch, seed=seed, log=log,
                              checkpoint_path=out)
    print(f"trained {model} for {steps} steps: "
          f"loss {reports[0].total:.5f} -> {reports[-1].total:.5f}")
    if model == "srnet":
        scores = evaluate_sr_improvement(net, dataset,
                                         n_eval=min(20, samples))
        print(f"depth rmse {scores['rmse_in']:.3f} -> "
              f"{scores['rmse_out']:.3f} mm "
              f"(reduction {scores['rmse_reduction']:.1%}), "
              f"psnr {scores['psnr_in']:.2f} -> "
              f"{scores['psnr_out']:.2f} dB")
    print(f"wrote {out}")
    if log_path:
        log.save(log_path)
        print(f"wrote {log_path}")
    return 0


def _cmd_sr_infer(args) -> int:
    opts = _Options(args)
    ckpt_path = opts.require("checkpoint")
    uvp_path = opts.require("uvp")
    out = opts.require("out")
    opts.announce()
    import numpy as np

    from .errors import FormatError
    from .net import SRNet
    from .srdata import extend_off_chart
    from .train import load_checkpoint
    from .uvmap import UVPositionMap, read_uvp, write_uvp
    config, blobs = load_checkpoint(ckpt_path)
    if config.get("model") != "srnet":
        raise FormatError(f"{ckpt_path}: not an srnet checkpoint "
                          f"(model = {config.get('model')!r})")
    net = SRNet(np.random.default_rng(0),
                width_multiplier=float(config["width_multiplier"]))
    net.load_state(blobs)
    uvmap = read_uvp(uvp_path)
    x = np.moveaxis(extend_off_chart(uvmap).data, -1, 0)[None]
    pred = np.moveaxis(net.forward(x).data[0], 0, -1)
    refined = np.where(uvmap.mask[..., None], pred, uvmap.data)
    write_uvp(out, UVPositionMap(data=refined, mask=uvmap.mask,
                                 bbox=uvmap.bbox))
    print(f"wrote {out}")
    return 0


def _cmd_eval(args) -> int:
    opts = _Options(args)
    pred_path = opts.require("pred")
    gt_path = opts.require("gt")
    out = opts.get("out")
    curves_path = opts.get("curves")
    depth_res = int(opts.get("depth_resolution", 128))
    opts.announce()
    from .mesh import load_obj
    from .metrics import evaluate_hand, save_curves_csv, save_metrics_json
    from .synthetic import toy_hand_topology
    report, curves = evaluate_hand(load_obj(pred_path), load_obj(gt_path),
                                   toy_hand_topology(),
                                   depth_resolution=depth_res)
    print(json.dumps(report, indent=2, sort_keys=True))
    if out:
        save_metrics_json(out, report)
        print(f"wrote {out}", file=sys.stderr)
    if curves_path:
        save_curves_csv(curves_path, curves)
        print(f"wrote {curves_path}", file=sys.stderr)
    return 0


def _cmd_render_depth(args) -> int:
    opts = _Options(args)
    mesh_path = opts.require("mesh")
    res = int(opts.get("resolution", 128))
    out = opts.get("out")
    opts.announce()
    import numpy as np

    from .mesh import TriMesh, load_obj
    from .metrics import render_depth
    from .warp import Camera
    mesh = load_obj(mesh_path)
    verts = mesh.vertices
    zmin = verts[:, 2].min()
    if zmin <= 0:
        # the renderer needs positive depth; lift and say so
        mesh = TriMesh(verts + [0.0, 0.0, 1e-3 - zmin], mesh.faces)
        verts = mesh.vertices
        print(f"note: mesh shifted by {1e-3 - zmin:.6f} along z "
              f"to sit in front of the camera", file=sys.stderr)
    center = 0.5 * (verts.min(axis=0) + verts.max(axis=0))
    half = max(0.5 * np.ptp(verts, axis=0).max(), 1e-9)
    scale = 0.4 * res / half
    camera = Camera(scale=scale,
                    principal=(res / 2 - scale * center[0],
                               res / 2 - scale * center[1]),
                    image_size=res)
    dm = render_depth(mesh, camera, res)
    coverage = float(dm.valid.mean())
    if dm.valid.any():
        lo, hi = float(dm.depth[dm.valid].min()), float(dm.depth[dm.valid].max())
    else:
        lo = hi = float("nan")
    print(f"rendered {res}x{res}: coverage {coverage:.1%}, "
          f"depth range [{lo:.4f}, {hi:.4f}]")
    if out:
        np.savez(out, depth=dm.depth, valid=dm.valid)
        print(f"wrote {out}")
    return 0


def _cmd_gradcheck(args) -> int:
    opts = _Options(args)
    bits = int(opts.get("bits", 64))
    instances = int(opts.get("instances", 20))
    seed = int(opts.get("seed", 0))
    tol = float(opts.get("tol", 1e-5))
    if bits != 64:
        raise _UsageError("only --bits 64 is supported")
    opts.announce()
    from .gradcheck import gradient_suite
    results = gradient_suite(n_instances=instances, seed=seed)
    failed = []
    for name in sorted(results):
        flag = ""
        if results[name] > tol:
            failed.append(name)
            flag = "  FAIL"
        print(f"{name:16s} {results[name]:.3e}{flag}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)} "
              f"(tol {tol:g})", file=sys.stderr)
        return 2
    print(f"all {len(results)} ops within {tol:g}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="uvhand", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value run-config file")
    common.add_argument("--threads", type=int,
                        help="cap BLAS threads (env UVHAND_THREADS "
                             "is the fallback)")
    common.add_argument("--verbose", action="store_true",
                        help="print resolved options and their sources")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("encode", parents=[common],
                       help="rasterize an OBJ mesh into a UVP position map")
    p.add_argument("--mesh")
    p.add_argument("--template")
    p.add_argument("--res", dest="resolution", type=int)
    p.add_argument("--out")
    p.add_argument("--cube-center", dest="cube_center", type=_vec3)
    p.add_argument("--cube-half-extent", dest="cube_half_extent", type=float)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", parents=[common],
                       help="sample a UVP map back into an OBJ mesh")
    p.add_argument("--uvp")
    p.add_argument("--template")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("unpool", parents=[common],
                       help="refine a mesh by edge unpooling")
    p.add_argument("--mesh")
    p.add_argument("--out")
    p.add_argument("--times", type=int)
    p.set_defaults(func=_cmd_unpool)

    p = sub.add_parser("register", parents=[common],
                       help="rigid/similarity ICP of a mesh onto points")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--out")
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--estimate-scale", dest="estimate_scale",
                   action="store_true", default=None)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("smooth", parents=[common],
                       help="chart-confined Gaussian smoothing of a UVP map")
    p.add_argument("--uvp")
    p.add_argument("--sigma", type=float)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_smooth)

    p = sub.add_parser("sr-pair", parents=[common],
                       help="build an aligned (coarse, dense) map pair")
    p.add_argument("--coarse")
    p.add_argument("--dense")
    p.add_argument("--template")
    p.add_argument("--res", dest="resolution", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--out-low", dest="out_low")
    p.add_argument("--out-high", dest="out_high")
    p.add_argument("--out-smooth", dest="out_smooth")
    p.add_argument("--manifest")
    p.set_defaults(func=_cmd_sr_pair)

    p = sub.add_parser("train-toy", parents=[common],
                       help="train a reduced-width net on synthetic data")
    p.add_argument("model", choices=("affinenet", "srnet"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--log")
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("sr-infer", parents=[common],
                       help="refine a UVP map with a trained srnet")
    p.add_argument("--checkpoint")
    p.add_argument("--uvp")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sr_infer)

    p = sub.add_parser("eval", parents=[common],
                       help="hand-reconstruction metrics for a mesh pair")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--out")
    p.add_argument("--curves")
    p.add_argument("--depth-res", dest="depth_resolution", type=int)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render-depth", parents=[common],
                       help="orthographic depth render of a mesh")
    p.add_argument("--mesh")
    p.add_argument("--res", dest="resolution", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_render_depth)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every gradient")
    p.add_argument("--bits", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:            # argparse --help
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from .errors import UVHandError
        if isinstance(exc, UVHandError):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
