"""Closed-form similarity fitting shared by registration and evaluation."""
from __future__ import annotations

import numpy as np

from .errors import FitError, ShapeError


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares similarity transform mapping src onto dst.

    Returns (R, t, s) such that s * R @ src[i] + t approximates dst[i].
    The reflection guard flips the smallest singular direction when the
    covariance determinant is negative, so R is always a proper rotation.
    Needs rank >= 2 centered covariance; collinear inputs are rejected.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"point sets must both be (N,3), got {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 3:
        raise FitError("need at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    cov = dc.T @ sc / n
    u, svals, vt = np.linalg.svd(cov)
    if svals[0] <= 0 or svals[1] <= 1e-12 * svals[0]:
        raise FitError("degenerate point configuration (collinear or coincident)")
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2] = -1.0
    rot = u @ np.diag(d) @ vt
    if with_scale:
        var_s = (sc ** 2).sum() / n
        scale = float((svals * d).sum() / var_s)
        if scale <= 0:
            raise FitError("non-positive scale estimate")
    else:
        scale = 1.0
    t = mu_d - scale * rot @ mu_s
    return rot, t, scale


def apply_similarity(points: np.ndarray, rot: np.ndarray, t: np.ndarray,
                     scale: float = 1.0) -> np.ndarray:
    return scale * np.asarray(points) @ np.asarray(rot).T + np.asarray(t)


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ValueError("rotation axis must be nonzero")
    x, y, z = a / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
