"""Symmetry-aware pose error metrics, recall and training losses."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import EPS_Z, rotation_angle

logger = logging.getLogger(__name__)

MSSD, MSPD, VSD = "MSSD", "MSPD", "VSD"
VSD_DELTA = 0.015  # metres, visibility tolerance against the sensor depth


def _steps(lo, hi, n=10):
    return lo + (hi - lo) * np.arange(n) / (n - 1)


@dataclass(frozen=True)
class RecallSpec:
    """Error thresholds; VSD additionally sweeps the misalignment tolerance ``taus``."""

    kind: str
    thresholds: tuple
    taus: tuple = field(default=())

    def __post_init__(self):
        th = np.asarray(self.thresholds, dtype=float)
        if th.ndim != 1 or len(th) == 0 or np.any(np.diff(th) <= 0):
            raise ValueError("thresholds must be a non-empty strictly increasing sequence")
        if self.taus and np.any(np.diff(self.taus) <= 0):
            raise ValueError("taus must be strictly increasing")

    @classmethod
    def mssd(cls, diameter):
        return cls(MSSD, tuple(_steps(0.05, 0.5) * diameter))

    @classmethod
    def mspd(cls, image_width=640, reference_width=640):
        """5..50 px, scaled by ``image_width / reference_width``."""
        return cls(MSPD, tuple(_steps(5.0, 50.0) * (image_width / reference_width)))

    @classmethod
    def vsd(cls, diameter):
        return cls(VSD, tuple(_steps(0.05, 0.5)), tuple(_steps(0.05, 0.5) * diameter))


@dataclass(frozen=True)
class PoseError:
    """One metric value of one object and its pass flags against ``RecallSpec.thresholds``."""

    kind: str
    value: float
    object_id: int
    passes: tuple

    def __post_init__(self):
        if self.kind not in (MSSD, MSPD, VSD):
            raise ValueError(f"unknown metric {self.kind!r}")
        if not self.value >= 0:
            raise ValueError("error value must be non-negative")
        if self.kind == VSD and self.value > 1:
            raise ValueError("VSD lies in [0, 1]")

    @classmethod
    def scored(cls, kind, value, object_id, spec):
        return cls(kind, float(value), int(object_id), tuple(bool(value < t) for t in spec.thresholds))


def _transform(G, V):
    return V @ G.rotation.T + G.translation


def mssd(P_hat, P_bar, model):
    """Min over symmetries of the max vertex displacement, in metres."""
    V = model.vertices
    A = _transform(P_hat, V)
    best = np.inf
    for S in model.symmetries:
        B = _transform(P_bar @ S, V)
        best = min(best, float(np.max(np.linalg.norm(A - B, axis=1))))
    return best


def _pixels(P, K):
    if np.any(P[:, 2] <= EPS_Z):
        raise ValueError("vertex behind the camera; MSPD undefined")
    return np.stack([K.fx * P[:, 0] / P[:, 2] + K.cx, K.fy * P[:, 1] / P[:, 2] + K.cy], axis=1)


def mspd(P_hat, P_bar, model, K):
    """Min over symmetries of the max vertex reprojection distance, in pixels."""
    V = model.vertices
    a = _pixels(_transform(P_hat, V), K)
    best = np.inf
    for S in model.symmetries:
        b = _pixels(_transform(P_bar @ S, V), K)
        best = min(best, float(np.max(np.linalg.norm(a - b, axis=1))))
    return best


def visibility_mask(depth, sensor, delta=VSD_DELTA):
    """Rendered pixels not occluded in the sensor depth (missing sensor depth counts as visible)."""
    depth = np.asarray(depth, dtype=float)
    sensor = np.asarray(sensor, dtype=float)
    return (depth > 0) & ((sensor <= 0) | (depth <= sensor + delta))


def vsd(D_hat, D_bar, D_sensor, tau, delta=VSD_DELTA, full_output=False):
    """Fraction of the visible union whose rendered depths disagree by ``>= tau``.

    An empty union scores 0 and, with ``full_output``, returns the flag
    ``(value, empty)``.
    """
    D_hat = np.asarray(D_hat, dtype=float)
    D_bar = np.asarray(D_bar, dtype=float)
    D_sensor = np.asarray(D_sensor, dtype=float)
    if not (D_hat.shape == D_bar.shape == D_sensor.shape):
        raise ValueError(f"depth map shapes differ: {D_hat.shape}, {D_bar.shape}, {D_sensor.shape}")
    V_hat = visibility_mask(D_hat, D_sensor, delta)
    V_bar = visibility_mask(D_bar, D_sensor, delta)
    union = V_hat | V_bar
    n = int(union.sum())
    if n == 0:
        logger.info("VSD: empty visibility union, scoring 0")
        return (0.0, True) if full_output else 0.0
    good = V_hat & V_bar & (np.abs(D_hat - D_bar) < tau)
    value = 1.0 - float(good.sum()) / n
    return (value, False) if full_output else value


def recall(errors, spec):
    """Mean pass rate over every (error, threshold) pair; pass means ``error < threshold``.

    For VSD, ``errors`` is ``(n_objects, len(spec.taus))`` with one VSD value
    per tolerance.
    """
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("recall of an empty error list")
    th = np.asarray(spec.thresholds, dtype=float)
    if spec.taus:
        e = e.reshape(-1, len(spec.taus))
    return float(np.mean(e[..., None] < th))


def pose_loss(G, G_true, symmetries=None, trans_weight=1.0):
    """Min over symmetries of geodesic rotation angle plus weighted L1 translation error."""
    syms = symmetries or [None]
    best = np.inf
    for S in syms:
        ref = G_true if S is None else G_true @ S
        rot = rotation_angle(G.rotation @ ref.rotation.T)
        trans = float(np.sum(np.abs(G.translation - ref.translation)))
        best = min(best, rot + trans_weight * trans)
    return best


def flow_loss(pred, target, mask, full_output=False):
    """Mean L1 endpoint error of the 2D coordinates over ``mask``.

    Fields are ``(H, W, >=2)``; a third channel (inverse depth) is left out of
    the endpoint error and reported separately with ``full_output``.
    """
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("flow loss over an empty mask")
    diff = np.abs(pred - target)[mask]
    epe = float(np.sum(diff[:, :2]) / n)
    if not full_output:
        return epe
    depth = float(np.sum(diff[:, 2]) / n) if diff.shape[1] > 2 else 0.0
    return epe, depth
