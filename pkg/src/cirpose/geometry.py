"""Rigid transforms, pinhole intrinsics and depth-augmented projection.

Conventions used throughout the package:

* A twist is a length-6 array ``(v, w)``: translational part first, then the
  rotation vector, in metres and radians.
* Pose updates are left-multiplicative, ``G <- exp(xi) @ G``.
* Image-plane coordinates inside the solver are *normalized*
  (``(u - cx) / fx``); :class:`Intrinsics` converts at the boundary.
* An augmented point is ``(x, y, d)`` with ``d`` the inverse depth.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

EPS_Z = 1e-6  # metres; points closer than this are invalid
EPS_D = 1e-8  # inverse metres
SMALL_ANGLE = 1e-4
ORTHO_TOL = 1e-9

FORWARD = "forward"
BACKWARD = "backward"


def hat(w):
    """Skew-symmetric matrix of a 3-vector (broadcasts over leading axes)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3): ``X -> rotation @ X + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, tol=1e-6):
        """Parse a homogeneous 4x4 matrix, rejecting non-rigid input beyond ``tol``."""
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        G = cls(m[:3, :3], m[:3, 3])
        if not G.is_valid(tol) or np.max(np.abs(m[3] - [0.0, 0.0, 0.0, 1.0])) > tol:
            raise ValueError("matrix is not a rigid transform")
        return G

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return RigidTransform(
                self.rotation @ other.rotation,
                self.rotation @ other.translation + self.translation,
            )
        return NotImplemented

    def apply(self, points):
        """Transform points of shape ``(..., 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.matrix(), other.matrix(), rtol=0.0, atol=atol)

    def is_valid(self, tol=ORTHO_TOL):
        R = self.rotation
        return bool(
            np.all(np.isfinite(R))
            and np.all(np.isfinite(self.translation))
            and np.max(np.abs(R.T @ R - np.eye(3))) <= tol
            and abs(np.linalg.det(R) - 1.0) <= tol
        )

    def to_list(self):
        return self.matrix().tolist()

    @classmethod
    def from_list(cls, rows):
        return cls.from_matrix(np.array(rows, dtype=float))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def orthonormalize(R):
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def _exp_coefficients(theta):
    """Return ``sin(t)/t``, ``(1-cos t)/t^2``, ``(t-sin t)/t^3``."""
    t2 = theta * theta
    if theta < SMALL_ANGLE:
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    half = theta / 2.0
    b = 0.5 * (np.sin(half) / half) ** 2  # 1 - cos t = 2 sin^2(t/2), no cancellation
    if theta < 1e-2:
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - np.sin(theta)) / theta**3
    return np.sin(theta) / theta, b, c


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    a, b, _ = _exp_coefficients(theta)
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def so3_left_jacobian(w):
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    _, b, c = _exp_coefficients(theta)
    W = hat(w)
    return np.eye(3) + b * W + c * (W @ W)


def se3_exp(xi):
    """Exponential map from a twist ``(v, w)`` to a :class:`RigidTransform`."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    a, b, c = _exp_coefficients(theta)
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return RigidTransform(R, V @ v)


def so3_log(R, return_branch=False):
    """Rotation vector with angle in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    skew = vee(R - R.T) / 2.0  # = sin(theta) * axis
    s = float(np.linalg.norm(skew))
    c = (np.trace(R) - 1.0) / 2.0
    theta = float(np.arctan2(s, c))
    if theta < SMALL_ANGLE:
        branch = "small"
        w = skew * (1.0 + theta * theta / 6.0)
    elif theta < np.pi - 1e-2:
        branch = "regular"
        w = skew * (theta / s)
    else:
        # sin(theta) is tiny here; recover the axis from the symmetric part.
        branch = "near_pi"
        S = (R + R.T) / 2.0 - c * np.eye(3)
        S /= 1.0 - c
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / np.sqrt(max(S[k, k], 0.0))
        if axis @ skew < 0.0:
            axis = -axis
        w = theta * axis / np.linalg.norm(axis)
    logger.debug("so3_log branch=%s theta=%.17g", branch, theta)
    if return_branch:
        return w, branch
    return w


def se3_log(G, return_branch=False):
    """Inverse of :func:`se3_exp` for rotation angles in ``[0, pi]``."""
    w, branch = so3_log(G.rotation, return_branch=True)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        k = 1.0 / 12.0 + theta * theta / 720.0
    else:
        half = theta / 2.0
        k = (1.0 - half * np.cos(half) / np.sin(half)) / theta**2
    V_inv = np.eye(3) - 0.5 * W + k * (W @ W)
    xi = np.concatenate([V_inv @ G.translation, w])
    if return_branch:
        return xi, branch
    return xi


def retract(G, dxi):
    """Left-multiplicative update ``exp(dxi) @ G``."""
    out = se3_exp(dxi) @ G
    R = out.rotation
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
        out = RigidTransform(orthonormalize(R), out.translation)
    return out


def adjoint(G):
    """6x6 adjoint for ``(v, w)`` twists: ``G exp(xi) G^-1 = exp(Ad(G) xi)``."""
    R, t = G.rotation, G.translation
    out = np.zeros((6, 6))
    out[:3, :3] = R
    out[:3, 3:] = hat(t) @ R
    out[3:, 3:] = R
    return out


def se3_left_jacobian(xi):
    """Left Jacobian: ``exp(xi + d) ~= exp(J d) exp(xi)`` for small ``d``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = float(np.linalg.norm(phi))
    if theta < 1e-2:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta * theta + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    P, Q_ = hat(phi), hat(rho)
    PQ, QP = P @ Q_, Q_ @ P
    PQP = PQ @ P
    PP = P @ P
    Q = (
        0.5 * Q_
        + c1 * (PQ + QP + PQP)
        + c2 * (PP @ Q_ + QP @ P - 3.0 * PQP)
        + c3 * (PQP @ P + P @ PQP)
    )
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[:3, 3:] = Q
    out[3:, 3:] = J
    return out


def rotation_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return so3_exp(axis / np.linalg.norm(axis) * angle)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in radians."""
    return float(np.linalg.norm(so3_log(R)))


def pose_errors(G, G_ref):
    """Rotation (rad) and translation (m) error between two poses."""
    return (
        rotation_angle(G.rotation @ G_ref.rotation.T),
        float(np.linalg.norm(G.translation - G_ref.translation)),
    )


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("width", "height"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, uv):
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, xy):
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1)

    def pixel_grid(self):
        """Normalized coordinates of every pixel centre, shape ``(H, W, 2)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(float)
        return self.normalize(np.stack([u, v], axis=-1))

    def subsampled(self, factor=4):
        """Intrinsics of the image obtained by keeping every ``factor``-th pixel."""
        return Intrinsics(
            self.fx / factor,
            self.fy / factor,
            self.cx / factor,
            self.cy / factor,
            max(1, -(-self.width // factor)),
            max(1, -(-self.height // factor)),
        )

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"fx", "fy", "cx", "cy", "width", "height"}
        if unknown:
            raise ValueError(f"unknown intrinsics keys: {sorted(unknown)}")
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"])
        )

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def project(X, eps_z=EPS_Z):
    """Depth-augmented projection ``(X/Z, Y/Z, 1/Z)``.

    Returns ``(points, valid)``; invalid entries (``Z <= eps_z``) are zero.
    """
    X = np.asarray(X, dtype=float)
    Z = X[..., 2]
    valid = Z > eps_z
    safe = np.where(valid, Z, 1.0)
    out = np.stack([X[..., 0] / safe, X[..., 1] / safe, 1.0 / safe], axis=-1)
    out[~valid] = 0.0
    return out, valid


def backproject(x, eps_d=EPS_D):
    """Inverse of :func:`project`: ``(x/d, y/d, 1/d)``."""
    x = np.asarray(x, dtype=float)
    d = x[..., 2]
    valid = d > eps_d
    safe = np.where(valid, d, 1.0)
    out = np.stack([x[..., 0] / safe, x[..., 1] / safe, 1.0 / safe], axis=-1)
    out[~valid] = 0.0
    return out, valid


def projection_derivative(P):
    """Jacobian of the augmented projection w.r.t. the 3D point, ``(..., 3, 3)``."""
    P = np.asarray(P, dtype=float)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    iz = 1.0 / Z
    iz2 = iz * iz
    D = np.zeros(P.shape[:-1] + (3, 3))
    D[..., 0, 0] = iz
    D[..., 0, 2] = -X * iz2
    D[..., 1, 1] = iz
    D[..., 1, 2] = -Y * iz2
    D[..., 2, 2] = -iz2
    return D


def point_twist_jacobian(P):
    """``d(exp(xi) P)/d xi`` at zero: ``[I | -hat(P)]``, shape ``(..., 3, 6)``."""
    P = np.asarray(P, dtype=float)
    M = np.zeros(P.shape[:-1] + (3, 6))
    M[..., 0, 0] = M[..., 1, 1] = M[..., 2, 2] = 1.0
    M[..., :, 3:] = -hat(P)
    return M


def projection_jacobian(X, direction=FORWARD, transform=None, eps_z=EPS_Z):
    """Jacobian of a projected point w.r.t. a left pose increment.

    ``forward``:  d/dxi of ``project(exp(xi) @ transform @ X)``
    ``backward``: d/dxi of ``project(transform @ exp(-xi) @ X)``

    The backward form is how the image pose enters through its inverse,
    ``G_i (exp(xi) G_0)^-1 = G_i G_0^-1 exp(-xi)``.  Returns ``(J, valid)``
    with ``J`` of shape ``(..., 3, 6)``; rows of invalid points are zero.
    """
    X = np.asarray(X, dtype=float)
    G = RigidTransform.identity() if transform is None else transform
    P = G.apply(X)
    valid = P[..., 2] > eps_z
    Psafe = np.where(valid[..., None], P, np.array([0.0, 0.0, 1.0]))
    D = projection_derivative(Psafe)
    if direction == FORWARD:
        J = D @ point_twist_jacobian(Psafe)
    elif direction == BACKWARD:
        J = -(D @ G.rotation) @ point_twist_jacobian(X)
    else:
        raise ValueError(f"unknown direction {direction!r}")
    J[~valid] = 0.0
    return J, valid


@dataclass(frozen=True, eq=False)
class CorrespondenceField:
    """Per-pixel augmented points ``(x, y, d)`` with a validity mask."""

    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if coords.ndim != 3 or coords.shape[-1] != 3 or coords.shape[:2] != mask.shape:
            raise ValueError(f"inconsistent field shapes {coords.shape} / {mask.shape}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.mask.shape

    @property
    def xy(self):
        return self.coords[..., :2]

    @property
    def inverse_depth(self):
        return self.coords[..., 2]

    def pixels(self, K):
        """Pixel coordinates ``(H, W, 2)`` of the 2D part under ``K``."""
        return K.denormalize(self.xy)

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(tuple(shape) + (3,)), np.zeros(shape, dtype=bool))


def augmented_grid(depth, K):
    """Field of each pixel's own normalized coordinates and inverse depth."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {(K.height, K.width)}")
    mask = depth > EPS_Z
    coords = np.zeros(depth.shape + (3,))
    coords[..., :2] = K.pixel_grid()
    coords[..., 2] = np.where(mask, 1.0 / np.where(mask, depth, 1.0), 0.0)
    return CorrespondenceField(coords, mask)


def induce_correspondence(G_src, G_dst, depth_src, K):
    """Map every pixel of the source view into the destination view.

    ``x' = project(G_dst @ G_src^-1 @ backproject(x))``; pixels without depth
    or landing behind the destination camera are masked out.
    """
    grid = augmented_grid(depth_src, K)
    X, ok = backproject(grid.coords)
    rel = G_dst @ G_src.inverse()
    x, ok2 = project(rel.apply(X))
    mask = grid.mask & ok & ok2
    x[~mask] = 0.0
    return CorrespondenceField(x, mask)


def poses_to_json(poses: Sequence[RigidTransform]):
    return json.dumps([G.to_list() for G in poses])


def poses_from_json(text):
    data = json.loads(text)
    return [RigidTransform.from_list(m) for m in data]
