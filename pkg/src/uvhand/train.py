"""Optimization and toy training harnesses for the two network stacks.

Adam with optional cosine learning-rate decay drives the parameters; the
toy dataset renders procedurally deformed hands into silhouette/depth
images with matching multi-scale ground-truth position maps, small enough
to overfit on a CPU in minutes. Checkpoints use a simple tagged binary
format, logs are JSON lines.
"""
from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, FormatError, ShapeError
from .losses import LossWeights, UvDecoder, loss_affine, loss_sr
from .mesh import TriMesh
from .metrics import depth_rmse_psnr, render_depth
from .net import AffineNet, NetConfig, Tensor, backward, toy_config
from .synthetic import deform_mesh, toy_hand_mesh
from .uvmap import (NormalizationCube, UVTemplate, make_template,
                    rasterize_mesh_to_uv)
from .warp import Camera


@dataclass
class AdamState:
    """Optimizer state: per-parameter moment buffers plus the schedule.

    total_steps switches on cosine decay from lr to min_lr over that many
    steps; None keeps the learning rate constant.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = None
    min_lr: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.total_steps is None:
            return self.lr
        frac = min(self.step / max(1, self.total_steps), 1.0)
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (
            1.0 + np.cos(np.pi * frac))


def adam_step(params: dict, state: AdamState) -> float:
    """One bias-corrected update from each Tensor's accumulated gradient.

    Missing gradients count as zero. Any non-finite gradient aborts with the
    offending parameter named. Gradients are cleared after the update.
    Returns the learning rate that was applied.
    """
    lr = state.current_lr()
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FitError(f"non-finite gradient for parameter {name!r} "
                           f"at step {state.step}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None
    return lr


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON config echo, named f32 blobs
# ---------------------------------------------------------------------------

_MAGIC = b"UVCK"
_VERSION = 1


def save_checkpoint(path, config: dict, blobs: dict) -> None:
    """Write atomically (temp file + rename) so readers never see a torso."""
    payload = io.BytesIO()
    payload.write(_MAGIC)
    payload.write(struct.pack("<I", _VERSION))
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    payload.write(struct.pack("<I", len(cfg)))
    payload.write(cfg)
    payload.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        raw = name.encode("utf-8")
        payload.write(struct.pack("<I", len(raw)))
        payload.write(raw)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        payload.write(struct.pack("<I", arr.ndim))
        payload.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.write(arr.tobytes())
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Read a checkpoint back as (config dict, {name: float32 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint {path}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != _MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack("<I", take(4))[0]
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg_len = struct.unpack("<I", take(4))[0]
    config = json.loads(bytes(take(cfg_len)).decode("utf-8"))
    blobs = {}
    n_blobs = struct.unpack("<I", take(4))[0]
    for _ in range(n_blobs):
        name_len = struct.unpack("<I", take(4))[0]
        name = bytes(take(name_len)).decode("utf-8")
        ndim = struct.unpack("<I", take(4))[0]
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4")
        blobs[name] = data.reshape(shape).copy()
    if pos != len(view):
        raise FormatError(f"{path} has {len(view) - pos} trailing bytes")
    return config, blobs


class TrainLog:
    """Collects one record per step; save() writes them as JSON lines."""

    def __init__(self):
        self.rows = []

    def append(self, step: int, lr: float, report) -> None:
        self.rows.append({"step": int(step), "lr": float(lr),
                          "total": float(report.total), **report.components})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic toy dataset
# ---------------------------------------------------------------------------

@dataclass
class ToyDataset:
    """Rendered inputs plus multi-scale ground truth for overfit runs.

    Chart masks depend only on (template, resolution), so one mask per scale
    serves every sample.
    """

    images: np.ndarray              # (N,3,R,R): silhouette, depth, ramp
    gt_maps: list                   # per scale (N,3,s,s), coarse to fine
    masks: list                     # per scale (s,s) bool
    verts: np.ndarray               # (N,V,3) deformed vertices, meters
    template: UVTemplate
    cube: NormalizationCube
    camera: Camera
    config: NetConfig

    @property
    def bbox(self) -> tuple:
        return (self.cube.bbox_min, self.cube.bbox_max)

    def decoders(self) -> list:
        return [UvDecoder(self.template, m, self.bbox) for m in self.masks]


def make_toy_dataset(config: NetConfig = None, n_samples: int = 8,
                     seed: int = 0) -> ToyDataset:
    """Deform the toy hand, render it, and rasterize ground-truth maps.

    All samples share one normalization cube and one camera so that map
    values, decoded vertices and the feature warp agree about geometry.
    """
    config = config or toy_config()
    rng = np.random.default_rng(seed)
    base = toy_hand_mesh()
    template = make_template(base, form="UV1")
    meshes = [deform_mesh(base, rng) for _ in range(n_samples)]

    pts = np.concatenate([m.vertices for m in meshes], axis=0)
    # the depth renderer needs every vertex in front of the camera (z > 0)
    shift = np.array([0.0, 0.0, max(0.0, 1e-3 - pts[:, 2].min())])
    meshes = [TriMesh(m.vertices + shift, m.faces) for m in meshes]
    cube = NormalizationCube.from_mesh(pts + shift)

    r = config.resolution
    center = np.asarray(cube.center)
    scale = 0.4 * r / cube.half_extent
    camera = Camera(scale=scale,
                    principal=(r / 2 - scale * center[0],
                               r / 2 - scale * center[1]),
                    image_size=r)

    images = np.zeros((n_samples, 3, r, r))
    gt_maps = [np.zeros((n_samples, 3, s, s)) for s in config.head_resolutions]
    masks = [None] * 5
    zlo = center[2] - cube.half_extent
    axis = (np.arange(r) + 0.5) / r
    ramp = 0.5 * (axis[None, :] + axis[:, None])
    for n, mesh in enumerate(meshes):
        dm = render_depth(mesh, camera, r)
        depth_norm = np.where(dm.valid,
                              (dm.depth - zlo) / (2.0 * cube.half_extent), 0.0)
        images[n] = np.stack([dm.valid.astype(np.float64), depth_norm, ramp])
        for k, s in enumerate(config.head_resolutions):
            uvm = rasterize_mesh_to_uv(mesh, template, s, cube=cube)
            gt_maps[k][n] = np.moveaxis(uvm.data, -1, 0)
            if masks[k] is None:
                masks[k] = uvm.mask
    return ToyDataset(images=images, gt_maps=gt_maps, masks=masks,
                      verts=np.stack([m.vertices for m in meshes]),
                      template=template, cube=cube, camera=camera,
                      config=config)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _config_echo(config: NetConfig, model: str) -> dict:
    echo = dataclasses.asdict(config)
    echo["model"] = model
    return echo


def train_affinenet(net: AffineNet, dataset: ToyDataset, steps: int,
                    lr: float = 1e-4, batch_size: int = None,
                    weights: LossWeights = None, seed: int = 0,
                    total_steps: int = None, betas=(0.9, 0.99),
                    log: TrainLog = None, checkpoint_path=None,
                    decoders: list = None) -> list:
    """Fit the map regressor on the toy dataset; returns per-step reports.

    Deterministic given (seed, single-threaded numpy). batch_size None uses
    the full dataset each step. The default beta2 is shorter-memoried than
    the usual 0.999: with L1 losses the gradient scale is nearly constant,
    and the faster second-moment tracking converges noticeably quicker on
    small overfit runs.
    """
    n = dataset.images.shape[0]
    batch_size = n if batch_size is None else min(int(batch_size), n)
    if batch_size < 1:
        raise ShapeError("batch_size must be at least 1")
    state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1],
                      total_steps=total_steps)
    order = np.random.default_rng(seed)
    if decoders is None and (weights is None or weights.verts > 0):
        decoders = dataset.decoders()
    reports = []
    for step in range(steps):
        if batch_size == n:
            idx = np.arange(n)
        else:
            idx = order.choice(n, size=batch_size, replace=False)
        out = net.forward(dataset.images[idx], camera=dataset.camera,
                          bbox=dataset.bbox, masks=dataset.masks,
                          training=True)
        heads = out["uv"]
        report = loss_affine([h.data for h in heads],
                             [g[idx] for g in dataset.gt_maps],
                             dataset.masks, weights=weights,
                             decoders=decoders)
        backward(heads, report.grad_wrt_prediction)
        lr_used = adam_step(net.params, state)
        if log is not None:
            log.append(step, lr_used, report)
        reports.append(report)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, _config_echo(net.config, "affinenet"),
                        net.state_dict())
    return reports


def train_srnet(net, inputs: np.ndarray, targets: np.ndarray, mask,
                decoder: UvDecoder, steps: int, lr: float = 1e-3,
                batch_size: int = None, seed: int = 0,
                total_steps: int = None, betas=(0.9, 0.99),
                log: TrainLog = None, checkpoint_path=None) -> list:
    """Fit the map refiner on (degraded, reference) map pairs."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.shape != targets.shape or inputs.ndim != 4:
        raise ShapeError(f"inputs {inputs.shape} and targets {targets.shape} "
                         "must be matching (N,3,H,W)")
    n = inputs.shape[0]
    batch_size = n if batch_size is None else min(int(batch_size), n)
    state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1],
                      total_steps=total_steps)
    order = np.random.default_rng(seed)
    reports = []
    for step in range(steps):
        if batch_size == n:
            idx = np.arange(n)
        else:
            idx = order.choice(n, size=batch_size, replace=False)
        pred = net.forward(inputs[idx])
        report = loss_sr(pred.data, targets[idx], mask, decoder)
        backward([pred], [report.grad_wrt_prediction])
        lr_used = adam_step(net.params, state)
        if log is not None:
            log.append(step, lr_used, report)
        reports.append(report)
    if checkpoint_path is not None:
        config = {"model": "srnet", "width_multiplier": net.width_multiplier,
                  "widths": list(net.widths)}
        save_checkpoint(checkpoint_path, config, net.state_dict())
    return reports


def evaluate_sr_improvement(net, dataset, n_eval: int = 20,
                            depth_resolution: int = 128) -> dict:
    """Depth accuracy of decoded maps before and after refinement.

    For the first n_eval samples, both the blurred input map and the net's
    output are decoded onto the dense topology, rendered with the dataset
    camera, and compared against the ground-truth mesh render. Returns mean
    RMSE (mm) and PSNR (dB) for input and output plus the fractional RMSE
    reduction. Decoded z is floored at a hair above zero because the
    renderer requires positive depth; a net whose output actually lands
    there fails the RMSE comparison anyway.
    """
    decoder = dataset.decoder()
    n = min(int(n_eval), len(dataset.meshes))
    if n < 1:
        raise ShapeError("need at least one evaluation sample")
    faces = dataset.meshes[0].faces
    sums = {"rmse_in": 0.0, "rmse_out": 0.0, "psnr_in": 0.0, "psnr_out": 0.0}
    for i in range(n):
        x = dataset.inputs[i:i + 1].astype(np.float64)
        pred = net.forward(x).data[0]
        gt_dm = render_depth(dataset.meshes[i], dataset.camera,
                             depth_resolution)
        for maps, tag in ((x[0], "in"), (pred, "out")):
            verts = decoder.decode(maps[None])[0]
            verts[:, 2] = np.maximum(verts[:, 2], 1e-9)
            dm = render_depth(TriMesh(verts, faces), dataset.camera,
                              depth_resolution)
            rmse, psnr = depth_rmse_psnr(dm, gt_dm)
            sums["rmse_" + tag] += rmse
            sums["psnr_" + tag] += psnr
    out = {k: v / n for k, v in sums.items()}
    out["rmse_reduction"] = 1.0 - out["rmse_out"] / max(out["rmse_in"], 1e-12)
    return out
