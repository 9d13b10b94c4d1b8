"""From-scratch network stacks over a minimal reverse-mode tape.

Two models: a five-level encoder/decoder that regresses UV position maps
coarse to fine, re-aligning encoder features at every level through the
projection-based warp, and a three-layer fully convolutional map refiner.
Every layer carries a hand-written backward pass; the tape only does graph
bookkeeping. All math runs in float64 so finite-difference checks stay
meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .warp import (Camera, affine_connection_backward,
                   affine_connection_forward, bilinear_resize_backward,
                   bilinear_resize_forward)


class Tensor:
    """Tape node: float64 data plus gradient plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, backward_fn) -> Tensor:
    t = Tensor(data)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward_fn = backward_fn
    return t


def backward(outputs, seeds):
    """Propagate seed gradients through the union graph of `outputs`.

    outputs: Tensors to seed; seeds: arrays matching their shapes. Gradients
    accumulate into every reachable node with requires_grad set.
    """
    if len(outputs) != len(seeds):
        raise ShapeError(f"{len(outputs)} outputs but {len(seeds)} seeds")
    topo = []
    seen = set()
    stack = [(o, False) for o in outputs]
    while stack:
        node, emit = stack.pop()
        if emit:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for t, s in zip(outputs, seeds):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != t.data.shape:
            raise ShapeError(f"seed {s.shape} for output {t.data.shape}")
        t.grad = s.copy() if t.grad is None else t.grad + s
    for node in reversed(topo):
        if node._backward_fn is None or node.grad is None:
            continue
        for p, g in zip(node._parents, node._backward_fn(node.grad)):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

_COL_BUDGET = 1 << 23       # float64 elements per im2col slab (~64 MB)


def _im2col_rows(xp, kh, kw, stride, r0, r1, ow):
    """Column matrix for output rows [r0, r1): (N, C*kh*kw, (r1-r0)*ow)."""
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sl = win[:, :, r0 * stride:(r1 - 1) * stride + 1:stride, ::stride]
    return np.ascontiguousarray(
        sl.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, -1))


def _col2im_rows(dcols, dxp, kh, kw, stride, r0, r1, ow):
    d6 = dcols.reshape(dxp.shape[0], dxp.shape[1], kh, kw, r1 - r0, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, r0 * stride + i:(r1 - 1) * stride + i + 1:stride,
                j:j + (ow - 1) * stride + 1:stride] += d6[:, :, i, j]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = None) -> Tensor:
    """Zero-padded convolution; pad defaults to kernel//2 (size-preserving
    at stride 1). im2col runs in row slabs to bound peak memory."""
    w, b = weight.data, bias.data
    o, cin, kh, kw = w.shape
    if pad is None:
        pad = kh // 2
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv input must be (N,C,H,W), got {xd.shape}")
    if xd.shape[1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {xd.shape[1]}")
    n, _, h, win_w = xd.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (win_w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} too large for input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w2 = w.reshape(o, -1)
    slab = max(1, _COL_BUDGET // max(1, n * cin * kh * kw * ow))
    out = np.empty((n, o, oh * ow))
    for r0 in range(0, oh, slab):
        r1 = min(oh, r0 + slab)
        cols = _im2col_rows(xp, kh, kw, stride, r0, r1, ow)
        out[:, :, r0 * ow:r1 * ow] = np.matmul(w2, cols)
    out = out.reshape(n, o, oh, ow) + b.reshape(1, o, 1, 1)

    def backward_fn(dout):
        dflat = dout.reshape(n, o, oh * ow)
        db = dflat.sum(axis=(0, 2))
        dw2 = np.zeros_like(w2)
        dxp = np.zeros_like(xp)
        for r0 in range(0, oh, slab):
            r1 = min(oh, r0 + slab)
            cols = _im2col_rows(xp, kh, kw, stride, r0, r1, ow)
            piece = dflat[:, :, r0 * ow:r1 * ow]
            dw2 += np.einsum("nol,nkl->ok", piece, cols)
            _col2im_rows(np.matmul(w2.T, piece), dxp, kh, kw, stride, r0, r1, ow)
        dx = dxp[:, :, pad:pad + h, pad:pad + win_w] if pad else dxp
        return dx, dw2.reshape(w.shape), db

    return _node(out, (x, weight, bias), backward_fn)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with running statistics.

    Biased variance throughout (normalization and running buffer share the
    same convention). `state` holds {"mean","var"} arrays mutated in place
    during training.
    """
    xd = x.data
    c = xd.shape[1]
    axes = (0, 2, 3)
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state["mean"] = (1.0 - momentum) * state["mean"] + momentum * mu
        state["var"] = (1.0 - momentum) * state["var"] + momentum * var
    else:
        mu, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward_fn(dout):
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
        dxhat = dout * gamma.data.reshape(1, c, 1, 1)
        if training:
            m = xd.size // c
            dx = (inv.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cannot add {a.data.shape} and {b.data.shape}")
    return _node(a.data + b.data, (a, b), lambda dout: (dout, dout))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(np.where(keep, x.data, 0.0), (x,),
                 lambda dout: (dout * keep,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                   np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _node(out, (x,), lambda dout: (dout * out * (1.0 - out),))


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x spatial upsampling (half-pixel-center convention)."""
    n, c, h, w = x.data.shape
    out, cache = bilinear_resize_forward(x.data, 2 * h, 2 * w)
    return _node(out, (x,),
                 lambda dout: (bilinear_resize_backward(dout, cache),))


def concat(xs, axis: int = 1) -> Tensor:
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(dout):
        sl = [slice(None)] * dout.ndim
        grads = []
        for i in range(len(xs)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(dout[tuple(sl)])
        return tuple(grads)

    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 backward_fn)


def affine_connect(uv: Tensor, feat: Tensor, camera: Camera, bbox,
                   mask=None) -> Tensor:
    """Warp encoder features into the layout of the current UV prediction,
    then upsample 2x; gradients flow into both the map and the features."""
    out, cache = affine_connection_forward(uv.data, feat.data, camera, bbox,
                                           mask=mask)

    def backward_fn(dout):
        duv, dfeat = affine_connection_backward(dout, cache)
        return duv, dfeat

    return _node(out, (uv, feat), backward_fn)


def he_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# model configuration
# ---------------------------------------------------------------------------

_FULL_ENCODER = (64, 128, 256, 512, 1024)
_FULL_DECODER = (512, 256, 128, 64, 32)


@dataclass(frozen=True)
class NetConfig:
    """Widths and input size of the map-regression stack.

    Full widths reproduce the published per-level feature sizes; the
    multiplier scales every channel count (minimum 1) for toy CPU runs.
    """

    resolution: int = 256
    width_multiplier: float = 1.0
    encoder_channels: tuple = _FULL_ENCODER
    decoder_channels: tuple = _FULL_DECODER

    def __post_init__(self):
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ValueError("encoder and decoder must have exactly 5 levels")
        if self.resolution < 32 or self.resolution % 32:
            raise ValueError("resolution must be a positive multiple of 32")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    @property
    def enc_widths(self) -> tuple:
        return tuple(self.scaled(c) for c in self.encoder_channels)

    @property
    def dec_widths(self) -> tuple:
        return tuple(self.scaled(c) for c in self.decoder_channels)

    @property
    def head_resolutions(self) -> tuple:
        """Spatial sizes of the five UV heads, coarse to fine."""
        r = self.resolution
        return (r // 16, r // 8, r // 4, r // 2, r)


def toy_config() -> NetConfig:
    return NetConfig(resolution=64, width_multiplier=1.0 / 16.0)


def default_camera(resolution: int) -> Camera:
    """Orthographic camera that keeps the unit cube inside the frame."""
    return Camera(scale=0.5 * resolution,
                  principal=(0.25 * resolution, 0.25 * resolution),
                  image_size=resolution)


DEFAULT_BBOX = (np.zeros(3), np.ones(3))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class _ParamStore:
    """Shared parameter/BN bookkeeping for both models."""

    def __init__(self):
        self.params = {}
        self.bn_state = {}

    def _add_conv(self, name, cin, cout, k, rng):
        self.params[f"{name}.w"] = Tensor(he_uniform(rng, (cout, cin, k, k)),
                                          requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _add_bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.bn_state[name] = {"mean": np.zeros(c), "var": np.ones(c)}

    def _conv(self, name, x, stride=1, pad=None):
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                      stride=stride, pad=pad)

    def _block(self, name, x, training, stride=1):
        x = self._conv(name, x, stride=stride)
        x = batchnorm(x, self.params[f"{name}.gamma"],
                      self.params[f"{name}.beta"], self.bn_state[name],
                      training)
        return relu(x)

    def state_dict(self) -> dict:
        out = {k: v.data.copy() for k, v in self.params.items()}
        for name, st in self.bn_state.items():
            out[f"{name}.running_mean"] = st["mean"].copy()
            out[f"{name}.running_var"] = st["var"].copy()
        return out

    def load_state(self, blobs: dict):
        for k, v in self.params.items():
            if k not in blobs:
                raise KeyError(f"checkpoint missing parameter {k!r}")
            if blobs[k].shape != v.data.shape:
                raise ShapeError(f"parameter {k!r}: checkpoint {blobs[k].shape} "
                                 f"vs model {v.data.shape}")
            v.data = blobs[k].astype(np.float64)
        for name, st in self.bn_state.items():
            st["mean"] = blobs[f"{name}.running_mean"].astype(np.float64)
            st["var"] = blobs[f"{name}.running_var"].astype(np.float64)


class AffineNet(_ParamStore):
    """Coarse-to-fine UV map regressor with per-level feature re-alignment.

    The encoder halves resolution five times; the decoder predicts a map at
    every level and warps the matching encoder features into the predicted
    layout before refining the next level.
    """

    def __init__(self, config: NetConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        e, d = config.enc_widths, config.dec_widths
        cin = 3
        for i, cout in enumerate(e, start=1):
            self._add_conv(f"enc{i}", cin, cout, 3, rng)
            self._add_bn(f"enc{i}", cout)
            cin = cout
        self._add_conv("dec4", e[4], d[0], 3, rng)
        self._add_bn("dec4", d[0])
        self._add_conv("head4", d[0], 3, 3, rng)
        for i in (3, 2, 1, 0):
            j = 4 - i                       # dec_widths index of level i
            self._add_conv(f"dec{i}", d[j - 1], d[j], 3, rng)
            self._add_bn(f"dec{i}", d[j])
            self._add_conv(f"ref{i}", e[i] + d[j] + 3, d[j], 3, rng)
            self._add_bn(f"ref{i}", d[j])
            self._add_conv(f"head{i}", d[j], 3, 3, rng)

    def forward(self, image, camera: Camera = None, bbox=None, masks=None,
                training: bool = False) -> dict:
        """Run the stack on (N,3,R,R) input.

        masks: optional list of chart masks aligned with the five head
        scales (coarse to fine); the first four gate the feature warps.
        Returns every intermediate keyed by name plus the head list under
        "uv" (coarse to fine).
        """
        if not isinstance(image, Tensor):
            image = Tensor(image)
        n, c, h, w = image.data.shape
        r = self.config.resolution
        if c != 3 or h != r or w != r:
            raise ShapeError(f"expected (N,3,{r},{r}) input, got {image.data.shape}")
        camera = camera or default_camera(r)
        bbox = DEFAULT_BBOX if bbox is None else bbox
        if masks is not None and len(masks) < 4:
            raise ShapeError("need a mask for each of the four warped levels")

        named = {}
        enc = []
        x = image
        for i in range(1, 6):
            x = self._block(f"enc{i}", x, training, stride=2)
            enc.append(x)
            named[f"E{i}"] = x

        trunk = self._block("dec4", upsample2x(enc[4]), training)
        named["D4"] = trunk
        uv = [sigmoid(self._conv("head4", trunk))]
        named["I4"] = uv[0]
        for i in (3, 2, 1, 0):
            level = 3 - i                   # 0..3 as the maps go finer
            mask = None if masks is None else masks[level]
            warped = affine_connect(uv[-1], enc[i], camera, bbox, mask=mask)
            named[f"A{i}"] = warped
            trunk = self._block(f"dec{i}", upsample2x(trunk), training)
            named[f"D{i}"] = trunk
            carried = upsample2x(uv[-1])
            named[f"Ihat{i}"] = carried
            refined = self._block(f"ref{i}", concat([warped, trunk, carried]),
                                  training)
            named[f"Dp{i}"] = refined
            uv.append(sigmoid(self._conv(f"head{i}", refined)))
            named[f"I{i}"] = uv[-1]
            trunk = refined
        named["uv"] = uv
        return named


class SRNet(_ParamStore):
    """Three-layer fully convolutional map refiner (9x9, 5x5, 5x5 kernels).

    The conv stack predicts a correction added to the input map, so the
    untrained net is the identity and training only has to model the
    detail the degradation removed.
    """

    FULL_WIDTHS = (64, 32)

    def __init__(self, rng: np.random.Generator, width_multiplier: float = 1.0):
        super().__init__()
        if width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        self.width_multiplier = width_multiplier
        c1 = max(1, int(round(self.FULL_WIDTHS[0] * width_multiplier)))
        c2 = max(1, int(round(self.FULL_WIDTHS[1] * width_multiplier)))
        self.widths = (c1, c2)
        self._add_conv("sr1", 3, c1, 9, rng)
        self._add_conv("sr2", c1, c2, 5, rng)
        self._add_conv("sr3", c2, 3, 5, rng)

    def forward(self, maps) -> Tensor:
        if not isinstance(maps, Tensor):
            maps = Tensor(maps)
        if maps.data.ndim != 4 or maps.data.shape[1] != 3:
            raise ShapeError(f"expected (N,3,H,W) maps, got {maps.data.shape}")
        x = relu(self._conv("sr1", maps, pad=4))
        x = relu(self._conv("sr2", x, pad=2))
        return add(maps, self._conv("sr3", x, pad=2))
