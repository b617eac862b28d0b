"""Deterministic 3D camera math: raymaps, depth codes, pose deltas.

Conventions used throughout the package:

* World and camera frames are right-handed with x right, y down, z forward
  (computer-vision convention).  "World up" is therefore ``(0, -1, 0)``.
* ``CameraPose.rotation`` maps camera coordinates to world coordinates
  (world-from-camera); ``center`` is the camera position in world units.
* Pixel rays use the pixel-center convention ``(u + 0.5, v + 0.5, 1)``.
* Positive yaw turns the view right, positive pitch tilts it up.

All functions here are pure and operate on immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateRaysError,
    EmptyInputError,
    InvalidCodeError,
    InvalidDepthError,
    InvalidPoseError,
    InvalidRaymapError,
)

ORTHONORMAL_TOL = 1e-9
DIRECTION_TOL = 1e-6
ORIGIN_SPREAD_TOL = 1e-6
EPS_CODE = 1e-4
DEFAULT_LAMBDA = 0.9

WORLD_UP = np.array([0.0, -1.0, 0.0])


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rotation plus camera center, validated on construction."""

    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        ctr = np.asarray(self.center, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise InvalidPoseError(f"rotation must be 3x3, got {rot.shape}")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err >= ORTHONORMAL_TOL:
            raise InvalidPoseError(f"rotation not orthonormal (|R^T R - I| = {err:.3e})")
        if np.linalg.det(rot) < 0:
            raise InvalidPoseError("rotation has determinant -1 (reflection)")
        if not np.all(np.isfinite(ctr)):
            raise InvalidPoseError("center must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", ctr)

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    @property
    def right(self) -> np.ndarray:
        return self.rotation[:, 0]

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidPoseError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidPoseError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "Intrinsics":
        """Intrinsics for a resampled grid (sx = new_width / old_width)."""
        return Intrinsics(
            fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
            width=width, height=height,
        )


@dataclass(frozen=True)
class Raymap:
    """Per-pixel ray origins and unit directions in world coordinates."""

    origins: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        org = np.asarray(self.origins, dtype=np.float64)
        dirs = np.asarray(self.directions, dtype=np.float64)
        if org.ndim != 3 or org.shape[2] != 3 or org.shape != dirs.shape:
            raise InvalidRaymapError(
                f"expected matching HxWx3 arrays, got {org.shape} / {dirs.shape}"
            )
        norms = np.linalg.norm(dirs, axis=-1)
        if np.abs(norms - 1.0).max() >= DIRECTION_TOL:
            raise InvalidRaymapError(
                f"directions must be unit length (max deviation {np.abs(norms - 1.0).max():.3e})"
            )
        mean_origin = org.reshape(-1, 3).mean(axis=0)
        spread = np.abs(org - mean_origin).max()
        scale = max(1.0, float(np.abs(mean_origin).max()))
        if spread >= ORIGIN_SPREAD_TOL * scale:
            raise InvalidRaymapError(f"origins are not a single camera center (spread {spread:.3e})")
        object.__setattr__(self, "origins", org)
        object.__setattr__(self, "directions", dirs)

    @property
    def shape(self) -> tuple:
        return self.origins.shape[:2]

    def as_channels(self) -> np.ndarray:
        """(H, W, 6) array, origins first."""
        return np.concatenate([self.origins, self.directions], axis=-1)


class DepthMode(str, Enum):
    LINEAR_NORM = "linear_norm"
    SQRT_DISPARITY = "sqrt_disparity"


@dataclass(frozen=True)
class SceneScale:
    """Per-window depth normalization record.

    ``d_max`` is the frame-0 extremum in the mode's parameter space: max depth
    for linear_norm, max sqrt-disparity for sqrt_disparity.  ``scale`` is the
    multiplier applied in that space (lam / d_max).
    """

    d_max: float
    lam: float
    mode: DepthMode = DepthMode.LINEAR_NORM

    def __post_init__(self):
        if self.d_max <= 0:
            raise InvalidDepthError("d_max must be positive")
        if not (0.0 < self.lam < 1.0):
            raise InvalidDepthError("lambda must lie in (0, 1)")

    @property
    def scale(self) -> float:
        return self.lam / self.d_max

    @property
    def geom_factor(self) -> float:
        """Factor applied to translations / scene geometry for this window.

        Only linear depth normalization rescales the scene; sqrt-disparity
        codes are invariant to joint scene scaling, so geometry is untouched.
        """
        return self.scale if self.mode == DepthMode.LINEAR_NORM else 1.0


@dataclass(frozen=True)
class MotionDelta:
    """Relative motion between two poses, expressed in the first camera's frame."""

    yaw: float      # rad, positive = turn right
    pitch: float    # rad, positive = look up
    forward: float  # scene units, positive = ahead
    lateral: float  # scene units, positive = right
    vertical: float  # scene units, positive = up


# ---------------------------------------------------------------------------
# rotation helpers


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest proper rotation in Frobenius norm (SVD projection)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def geodesic_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Geodesic distance between two rotations, in radians."""
    cos = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# raymap construction and inversion


def raymap_from_camera(pose: CameraPose, intr: Intrinsics) -> Raymap:
    """Cast one ray per pixel center through the pinhole model."""
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    )
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, d_world.shape).copy()
    return Raymap(origins=origins, directions=d_world)


def _fit_ray_homography(directions: np.ndarray, height: int, width: int) -> np.ndarray:
    """Least-squares fit of H = R K^-1 so that H @ pixel is parallel to each ray.

    Each pixel contributes the cross-product constraint d x (H p) = 0; the
    normal matrix factors as sum_i (I - d d^T) kron (p p^T), so the minimizer
    is the smallest eigenvector of a 9x9 system regardless of pixel count.
    """
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    # Hartley-style normalization keeps the 9x9 system well conditioned.
    su, sv = 2.0 / width, 2.0 / height
    p = np.stack([uu.ravel() * su - 1.0, vv.ravel() * sv - 1.0, np.ones(uu.size)], axis=-1)
    d = directions.reshape(-1, 3)

    dd = np.einsum("ni,nj->nij", d, d)
    proj = np.eye(3)[None] - dd            # I - d d^T  (= skew(d)^T skew(d))
    pp = np.einsum("ni,nj->nij", p, p)
    m = np.einsum("nac,nuv->aucv", proj, pp).reshape(9, 9)

    eigvals, eigvecs = np.linalg.eigh(m)
    h_norm = eigvecs[:, 0].reshape(3, 3)
    if eigvals[1] < 1e-12 * max(eigvals[-1], 1e-300):
        raise DegenerateRaysError("ray bundle is rank deficient; intrinsics unrecoverable")
    # Undo the pixel normalization: H p = H_norm (N p).
    n = np.array([[su, 0.0, -1.0], [0.0, sv, -1.0], [0.0, 0.0, 1.0]])
    h = h_norm @ n
    # Fix the sign so H p points along +d rather than -d.
    rays = p @ h_norm.T
    if float(np.einsum("ni,ni->", rays, d)) < 0:
        h = -h
    return h


def _recover_camera(rm: Raymap, origin_tol: float):
    """Shared recovery core: returns (center, rotation, K-matrix unvalidated)."""
    height, width = rm.shape
    if height < 2 or width < 2:
        raise InvalidRaymapError("raymap must be at least 2x2 to recover intrinsics")
    origins = rm.origins.reshape(-1, 3)
    center = origins.mean(axis=0)
    spread = np.abs(origins - center).max()
    if spread >= origin_tol * max(1.0, float(np.abs(center).max())):
        raise InvalidRaymapError(f"origins disagree (spread {spread:.3e})")

    dirs = rm.directions.reshape(-1, 3)
    singular = np.linalg.svd(dirs - dirs.mean(axis=0), compute_uv=False)
    if singular[1] < 1e-9:
        raise DegenerateRaysError("all ray directions are (nearly) parallel")

    h = _fit_ray_homography(rm.directions, height, width)
    try:
        h_inv = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise DegenerateRaysError("ray homography is singular") from exc

    k, q = scipy.linalg.rq(h_inv)  # h_inv = K R^T with K upper triangular
    signs = np.sign(np.diag(k))
    signs[signs == 0] = 1.0
    k = k * signs[None, :]
    q = q * signs[:, None]
    if np.linalg.det(q) < 0:
        k, q = -k, -q
    k = k / k[2, 2]
    rotation = orthonormalize(q.T)
    if k[0, 0] <= 0 or k[1, 1] <= 0:
        raise DegenerateRaysError("recovered focal lengths are not positive")
    return center, rotation, k


def camera_from_raymap(rm: Raymap, origin_tol: float = ORIGIN_SPREAD_TOL) -> tuple:
    """Recover (CameraPose, Intrinsics) from a raymap.

    The homography H = R K^-1 is fit by least squares over all pixels and
    split by RQ decomposition into an upper-triangular K and a rotation.
    """
    center, rotation, k = _recover_camera(rm, origin_tol)
    height, width = rm.shape
    intr = Intrinsics(
        fx=float(k[0, 0]), fy=float(k[1, 1]), cx=float(k[0, 2]), cy=float(k[1, 2]),
        width=width, height=height,
    )
    return CameraPose(rotation=rotation, center=center), intr


def pose_from_raymap(rm: Raymap, origin_tol: float = ORIGIN_SPREAD_TOL) -> CameraPose:
    """Pose recovery alone; tolerates intrinsics outside the pinhole envelope
    (generated raymaps early in training)."""
    center, rotation, _ = _recover_camera(rm, origin_tol)
    return CameraPose(rotation=rotation, center=center)


# ---------------------------------------------------------------------------
# depth parameterization


def _validate_depth_seq(depth_seq) -> list:
    if len(depth_seq) == 0:
        raise EmptyInputError("depth sequence is empty")
    out = []
    for i, d in enumerate(depth_seq):
        arr = np.asarray(d, dtype=np.float64)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise InvalidDepthError(f"frame {i} has nonpositive or non-finite depth")
        out.append(arr)
    return out


def depth_encode(
    depth_seq,
    lam: float = DEFAULT_LAMBDA,
    mode: DepthMode = DepthMode.LINEAR_NORM,
    eps_code: float = EPS_CODE,
) -> tuple:
    """Normalize a depth sequence into (0, 1] codes anchored on frame 0.

    Frame 0's codes land exactly in (0, lam]; later frames may use the
    reserved headroom (lam, 1] before the clamp engages.
    """
    if not (0.0 < lam < 1.0):
        raise InvalidDepthError("lambda must lie in (0, 1)")
    frames = _validate_depth_seq(depth_seq)
    mode = DepthMode(mode)
    if mode == DepthMode.LINEAR_NORM:
        ref = float(frames[0].max())
        params = frames
    else:
        disparity_root = [np.sqrt(1.0 / f) for f in frames]
        ref = float(disparity_root[0].max())
        params = disparity_root
    # lam * (x / ref) rather than (lam * x) / ref: the frame-0 extremum maps
    # to exactly lam in floating point.
    codes = [np.clip(lam * (p / ref), eps_code, 1.0) for p in params]
    return codes, SceneScale(d_max=ref, lam=lam, mode=mode)


def depth_decode(codes, scale: SceneScale, mode: DepthMode | None = None) -> list:
    """Exact inverse of :func:`depth_encode` on the unclamped range."""
    mode = DepthMode(mode) if mode is not None else scale.mode
    out = []
    for i, c in enumerate(codes):
        arr = np.asarray(c, dtype=np.float64)
        if np.any(arr <= 0) or np.any(arr > 1.0 + 1e-12):
            raise InvalidCodeError(f"frame {i} has codes outside (0, 1]")
        param = arr * (scale.d_max / scale.lam)
        if mode == DepthMode.LINEAR_NORM:
            out.append(param)
        else:
            out.append(1.0 / (param * param))
    return out


# ---------------------------------------------------------------------------
# pose relations


def forward_angle(a: CameraPose, b: CameraPose) -> float:
    """Angle between the two optical axes, in [0, pi]."""
    cos = float(np.dot(a.forward, b.forward))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def pose_delta(a: CameraPose, b: CameraPose) -> MotionDelta:
    """Relative motion a -> b in a's camera frame; roll is discarded."""
    t_cam = a.rotation.T @ (b.center - a.center)
    r_rel = a.rotation.T @ b.rotation
    f = r_rel[:, 2]
    yaw = math.atan2(f[0], f[2])
    pitch = math.asin(float(np.clip(-f[1], -1.0, 1.0)))
    return MotionDelta(
        yaw=yaw,
        pitch=pitch,
        forward=float(t_cam[2]),
        lateral=float(t_cam[0]),
        vertical=float(-t_cam[1]),
    )
