"""Coupled inner/outer refinement loop, render-view generation and revision providers.

The learned update operator is replaced by a :class:`RevisionProvider`.  Each
inner iteration the loop hands the provider the same inputs a recurrent
update network would see and turns its ``(revision, confidence)`` output
into a BD-PnP problem.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from .correlation import NUM_LEVELS, RADIUS, bilinear_sample, build_correlation, lookup
from .geometry import (
    BACKWARD,
    FORWARD,
    RigidTransform,
    augmented_grid,
    backproject,
    induce_correspondence,
    pose_errors,
    rotation_about_axis,
    rotation_angle,
)
from .scene import render_depth
from .solver import (
    BOTH,
    BdpnpProblem,
    Observation,
    SolverOptions,
    UnderdeterminedError,
    apply_revisions,
    solve,
    solve_rgb,
)

logger = logging.getLogger(__name__)

RGBD, RGB = "rgbd", "rgb"
VIEW_ANGLE = 22.5  # degrees
OBJECT_FRAME, CAMERA_FRAME = "object", "camera"
TRACE_SCHEMA = "cirpose/refine-trace/v1"


class RefinementError(RuntimeError):
    """Every correspondence of every view was masked; the object is abandoned."""


# ------------------------------------------------------------------ views


def perturbed_view_poses(G, mode=RGBD, angle_deg=VIEW_ANGLE, frame=OBJECT_FRAME):
    """Render poses around ``G``: itself, then +/- ``angle_deg`` about x, y and z.

    ``rgb`` mode appends the same six rotations at twice the angle (13 poses).
    ``frame="object"`` rotates about the axes of the object frame, through
    the object origin; ``"camera"`` uses camera axes through the same point.
    """
    if mode not in (RGBD, RGB):
        raise ValueError(f"unknown mode {mode!r}")
    if frame not in (OBJECT_FRAME, CAMERA_FRAME):
        raise ValueError(f"unknown frame {frame!r}")
    angles = [angle_deg] if mode == RGBD else [angle_deg, 2.0 * angle_deg]
    out = [G]
    for a in angles:
        for axis in np.eye(3):
            for sign in (1.0, -1.0):
                R = rotation_about_axis(axis, sign * np.deg2rad(a))
                if frame == OBJECT_FRAME:
                    out.append(RigidTransform(G.rotation @ R, G.translation))
                else:
                    out.append(RigidTransform(R @ G.rotation, G.translation))
    return out


# ------------------------------------------------------------ residual maps


def _sample_valid(img, valid, x, y):
    # every corner carrying nonzero bilinear weight must be valid
    v = bilinear_sample(valid.astype(float), x, y)
    return bilinear_sample(img, x, y), v > 1.0 - 1e-9


def depth_residuals(target_inv_depth, x, K):
    """Induced inverse depth minus the target's inverse depth sampled at ``x``.

    ``target_inv_depth`` is the ``(H, W)`` inverse depth of the view ``x``
    maps into (0 where empty); ``K`` gives its pixel grid.  Returns
    ``(residual, mask)``; the residual is 0 where ``x`` is masked or the
    sample touches an empty or out-of-bounds pixel.
    """
    z = np.asarray(target_inv_depth, dtype=float)
    uv = x.pixels(K)
    s, ok = _sample_valid(z, z > 0, uv[..., 0], uv[..., 1])
    mask = x.mask & ok
    return np.where(mask, x.inverse_depth - s, 0.0), mask


def solver_residual_features(x_t, x_prev_revised=None):
    """``x_t - x'_{t-1}``: how far the solver left the last revised targets.

    Zero on the first iteration and wherever either field is masked.
    """
    if x_prev_revised is None:
        return np.zeros(x_t.coords.shape)
    if x_prev_revised.shape != x_t.shape:
        raise ValueError(f"field shapes differ: {x_t.shape} vs {x_prev_revised.shape}")
    mask = x_t.mask & x_prev_revised.mask
    return np.where(mask[..., None], x_t.coords - x_prev_revised.coords, 0.0)


def surface_features(depth, G, K, frequencies=3, scale=0.1):
    """Unit-norm sinusoidal encoding of each pixel's object-frame surface point.

    A stand-in for learned appearance features: the same surface point gets
    the same descriptor in every view.  Empty pixels get zero vectors.
    """
    grid = augmented_grid(depth, K)
    X, ok = backproject(grid.coords)
    O = G.inverse().apply(X.reshape(-1, 3)).reshape(X.shape) / scale
    bands = [f(O * np.pi * 2.0**k) for k in range(frequencies) for f in (np.sin, np.cos)]
    feat = np.concatenate(bands, axis=-1)
    feat /= np.linalg.norm(feat, axis=-1, keepdims=True)
    feat[~(grid.mask & ok)] = 0.0
    return feat


# ---------------------------------------------------------------- providers


class PairRevisions(NamedTuple):
    """Provider output for one render/image pair, all shaped ``(H, W, 3)``."""

    forward_revision: np.ndarray
    forward_weight: np.ndarray
    backward_revision: np.ndarray
    backward_weight: np.ndarray


@dataclass(eq=False)
class ProviderInputs:
    """Everything an update operator sees at one inner iteration.

    Per-pair entries are ``(forward, backward)`` tuples in render-pose order.
    ``context`` is an open slot for image context features.
    """

    outer: int
    inner: int
    K: object
    render_poses: list
    render_depths: list
    image_depth: np.ndarray
    fields: list
    correlation: list
    depth_residuals: list
    solver_residuals: list
    context: object = None


class RevisionProvider:
    """Supplies revisions and confidences; subclass and override :meth:`__call__`."""

    def reset(self, outer):
        """Called at the start of every outer loop; stateless providers ignore it."""

    def __call__(self, inputs: ProviderInputs) -> list:
        raise NotImplementedError


def _true_fields(G_true, render_poses, render_depths, image_depth, K):
    out = []
    for Gi, Di in zip(render_poses, render_depths):
        out.append((induce_correspondence(Gi, G_true, Di, K), induce_correspondence(G_true, Gi, image_depth, K)))
    return out


def oracle_revisions(
    G_true,
    G_current,
    render_poses,
    render_depths,
    image_depth,
    K,
    noise=0.0,
    outlier_rate=0.0,
    rng=None,
    outlier_weight=0.0,
    view_noise_growth=0.0,
    fields=None,
):
    """Revisions that move the induced fields onto the ground-truth correspondences.

    ``noise`` is a pixel standard deviation on the field grid ``K``; inverse
    depth receives the same relative noise.  With ``view_noise_growth`` the
    noise of a pair is scaled by ``1 + growth * angle / 22.5deg``, the angle
    being the render's rotation away from ``G_true``, and inlier confidence
    becomes ``1 / scale**2``.  A fraction ``outlier_rate`` of pixels gets a
    uniform random target and confidence ``outlier_weight``.  ``fields``
    overrides the induced ``(forward, backward)`` fields at ``G_current``.
    """
    if not 0.0 <= outlier_rate <= 1.0:
        raise ValueError("outlier_rate must be in [0, 1]")
    if not 0.0 <= outlier_weight <= 1.0:
        raise ValueError("outlier_weight must be in [0, 1]")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(rng)
    if fields is None:
        fields = [
            (induce_correspondence(Gi, G_current, Di, K), induce_correspondence(G_current, Gi, image_depth, K))
            for Gi, Di in zip(render_poses, render_depths)
        ]
    truth = _true_fields(G_true, render_poses, render_depths, image_depth, K)
    sigma = noise / K.fx
    lo = np.array([-K.cx / K.fx, -K.cy / K.fy])
    hi = np.array([(K.width - 1 - K.cx) / K.fx, (K.height - 1 - K.cy) / K.fy])
    out = []
    for Gi, cur_pair, true_pair in zip(render_poses, fields, truth):
        angle = np.rad2deg(rotation_angle(Gi.rotation @ G_true.rotation.T))
        scale = 1.0 + view_noise_growth * angle / VIEW_ANGLE
        pair = []
        for cur, tru in zip(cur_pair, true_pair):
            shape = cur.coords.shape
            eps = rng.normal(size=shape)
            is_out = rng.random(size=shape[:2]) < outlier_rate
            rand_xy = lo + (hi - lo) * rng.random(size=shape[:2] + (2,))
            rand_d = rng.uniform(0.5, 1.5, size=shape[:2])
            target = tru.coords.copy()
            target[..., :2] += scale * sigma * eps[..., :2]
            target[..., 2] *= 1.0 + scale * sigma * eps[..., 2]
            target[..., :2] = np.where(is_out[..., None], rand_xy, target[..., :2])
            target[..., 2] = np.where(is_out, rand_d * tru.coords[..., 2], target[..., 2])
            mask = cur.mask & tru.mask
            r = np.where(mask[..., None], target - cur.coords, 0.0)
            w = np.where(is_out, outlier_weight, 1.0 / scale**2)
            w = np.where(mask, w, 0.0)
            pair += [r, np.repeat(w[..., None], 3, axis=-1)]
        out.append(PairRevisions(*pair))
    return out


class OracleProvider(RevisionProvider):
    """Ground-truth revisions with seeded noise and outliers (see :func:`oracle_revisions`).

    The random stream continues across outer loops; ``reset`` is a no-op.
    """

    def __init__(self, G_true, noise=0.0, outlier_rate=0.0, seed=0, outlier_weight=0.0, view_noise_growth=0.0):
        self.G_true = G_true
        self.noise = float(noise)
        self.outlier_rate = float(outlier_rate)
        self.outlier_weight = float(outlier_weight)
        self.view_noise_growth = float(view_noise_growth)
        self.rng = np.random.default_rng(seed)

    def __call__(self, inputs):
        return oracle_revisions(
            self.G_true,
            None,
            inputs.render_poses,
            inputs.render_depths,
            inputs.image_depth,
            inputs.K,
            self.noise,
            self.outlier_rate,
            self.rng,
            self.outlier_weight,
            self.view_noise_growth,
            fields=inputs.fields,
        )


class ZeroProvider(RevisionProvider):
    """No revisions, unit confidence on valid pixels."""

    def __call__(self, inputs):
        out = []
        for fw, bw in inputs.fields:
            out.append(
                PairRevisions(
                    np.zeros(fw.coords.shape),
                    np.repeat(fw.mask[..., None], 3, -1).astype(float),
                    np.zeros(bw.coords.shape),
                    np.repeat(bw.mask[..., None], 3, -1).astype(float),
                )
            )
        return out


# ------------------------------------------------------------------- config


@dataclass(frozen=True)
class RefinementConfig:
    """Loop sizes and ablation switches.

    ``views=None`` uses every pose of the mode (7 or 13); a smaller number
    keeps the first ``views``.  ``outer=4`` is the slower, more accurate
    setting.
    """

    inner: int = 40
    outer: int = 1
    gn_iters: int = 10
    views: int | None = None
    angle: float = VIEW_ANGLE
    mode: str = RGBD
    frame: str = OBJECT_FRAME
    direction: str = BOTH
    depth_augmented: bool = True
    uniform_confidence: bool = False
    correlation: bool = True
    radius: int = RADIUS
    levels: int = NUM_LEVELS
    downsample: int = 4
    discard_depth_update: bool = True

    def __post_init__(self):
        for name in ("inner", "outer", "gn_iters", "downsample", "levels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.views is not None and not 1 <= self.views <= (7 if self.mode == RGBD else 13):
            raise ValueError(f"views must be in [1, {7 if self.mode == RGBD else 13}] for mode {self.mode!r}")
        if not 0.0 < self.angle < 90.0:
            raise ValueError("angle must be in (0, 90) degrees")
        if self.mode not in (RGBD, RGB):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.frame not in (OBJECT_FRAME, CAMERA_FRAME):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.direction not in (BOTH, FORWARD, BACKWARD):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")

    def solver_options(self):
        return SolverOptions(iters=self.gn_iters, depth_augmented=self.depth_augmented, direction=self.direction)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown refinement keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------- loop


def _inverse_depth(depth):
    return np.where(depth > 0, 1.0 / np.where(depth > 0, depth, 1.0), 0.0)


def _subsample(image, K, factor):
    sub = np.asarray(image, dtype=float)[::factor, ::factor]
    return sub[: K.height, : K.width]


class _Views(NamedTuple):
    poses: list
    depths: list
    inv_depths: list
    features: list


def _render_views(scene, G, cfg, K):
    poses = perturbed_view_poses(G, cfg.mode, cfg.angle, cfg.frame)
    if cfg.views is not None:
        poses = poses[: cfg.views]
    depths = [render_depth(scene.model, Gi, K) for Gi in poses]
    feats = [surface_features(D, Gi, K) for D, Gi in zip(depths, poses)] if cfg.correlation else []
    return _Views(poses, depths, [_inverse_depth(D) for D in depths], feats)


def _correlation_features(views, image_feat, fields, K, cfg):
    out = []
    for k, (fw, bw) in enumerate(fields):
        if not cfg.correlation:
            out.append((None, None))
            continue
        c_fw = lookup(build_correlation(views.features[k], image_feat, cfg.levels), fw.pixels(K), cfg.radius)
        c_bw = lookup(build_correlation(image_feat, views.features[k], cfg.levels), bw.pixels(K), cfg.radius)
        out.append((c_fw, c_bw))
    return out


def _check_revisions(revs, fields):
    if len(revs) != len(fields):
        raise ValueError(f"provider returned {len(revs)} pairs for {len(fields)} views")
    for rv, (fw, bw) in zip(revs, fields):
        for arr, f in ((rv.forward_revision, fw), (rv.forward_weight, fw), (rv.backward_revision, bw), (rv.backward_weight, bw)):
            if np.shape(arr) != f.coords.shape:
                raise ValueError(f"provider output shape {np.shape(arr)} does not match field {f.coords.shape}")


class _Loop:
    """Per-object state shared by every inner step: field grid, sensor and provider."""

    def __init__(self, scene, provider, cfg, G_true):
        self.scene = scene
        self.provider = provider
        self.cfg = cfg
        self.G_true = G_true
        self.K = scene.K.subsampled(cfg.downsample)
        self.sensor = _subsample(scene.depth, self.K, cfg.downsample)
        self.segmentation = self.sensor > 0
        self.opts = cfg.solver_options()
        self.image_feat = surface_features(self.sensor, G_true, self.K) if cfg.correlation else None
        self.inv_depth_state = None  # RGB mode with the depth update kept

    def start_outer(self, G):
        if self.cfg.mode == RGB and not self.cfg.discard_depth_update:
            self.inv_depth_state = _inverse_depth(self.rendered_image_depth(G)).ravel()
        return self.views(G)

    def rendered_image_depth(self, pose):
        return np.where(self.segmentation, render_depth(self.scene.model, pose, self.K), 0.0)

    def views(self, G):
        return _render_views(self.scene, G, self.cfg, self.K)

    def step(self, G, views, outer, inner, prev_revised):
        """One revision + BD-PnP update; returns ``(G, solve_trace, problem, revised_fields)``."""
        cfg, K = self.cfg, self.K
        # RGB mode has no sensor: the image depth is rendered at the estimate
        if cfg.mode == RGBD:
            image_depth = self.sensor
        elif self.inv_depth_state is not None:
            image_depth = _inverse_depth(self.inv_depth_state.reshape(self.sensor.shape))
        else:
            image_depth = self.rendered_image_depth(G)
        image_inv = _inverse_depth(image_depth)
        flds = [
            (induce_correspondence(Gi, G, Di, K), induce_correspondence(G, Gi, image_depth, K))
            for Gi, Di in zip(views.poses, views.depths)
        ]
        if not any(fw.mask.any() or bw.mask.any() for fw, bw in flds):
            raise RefinementError(f"all correspondences masked at outer {outer}, inner {inner}")
        dres, sres = [], []
        for k, (fw, bw) in enumerate(flds):
            dres.append((depth_residuals(image_inv, fw, K)[0], depth_residuals(views.inv_depths[k], bw, K)[0]))
            prev = prev_revised[k] if prev_revised is not None else (None, None)
            sres.append((solver_residual_features(fw, prev[0]), solver_residual_features(bw, prev[1])))
        inputs = ProviderInputs(
            outer, inner, K, views.poses, views.depths, image_depth, flds,
            _correlation_features(views, self.image_feat, flds, K, cfg), dres, sres,
        )
        revs = self.provider(inputs)
        _check_revisions(revs, flds)

        obs, revised = [], []
        image_grid = augmented_grid(image_depth, K)
        for Gi, Di, (fw, bw), rv in zip(views.poses, views.depths, flds, revs):
            rf, rb = apply_revisions(fw, rv.forward_revision), apply_revisions(bw, rv.backward_revision)
            wf, wb = rv.forward_weight, rv.backward_weight
            if cfg.uniform_confidence:
                wf, wb = np.ones_like(wf), np.ones_like(wb)
            obs.append(Observation.from_fields(Gi, FORWARD, augmented_grid(Di, K), rf, wf))
            obs.append(Observation.from_fields(Gi, BACKWARD, image_grid, rb, wb))
            revised.append((rf, rb))
        p = BdpnpProblem(obs, G, self.opts)
        try:
            if cfg.mode == RGB:
                G_new, st = solve_rgb(
                    p, lambda pose: _inverse_depth(self.rendered_image_depth(pose)).ravel(),
                    discard_depth_update=cfg.discard_depth_update,
                    inv_depth=self.inv_depth_state,
                )
                if self.inv_depth_state is not None:
                    self.inv_depth_state = st.inverse_depth
            else:
                G_new, st = solve(p)
        except UnderdeterminedError as exc:
            raise RefinementError(str(exc)) from exc
        return G_new, st, p, revised


def single_solve(scene, G_init, provider, cfg=None, G_true=None):
    """One BD-PnP solve on views rendered around ``G_init``.

    Returns ``(G, solve_trace, problem)``.
    """
    cfg = cfg or RefinementConfig()
    loop = _Loop(scene, provider, cfg, scene.pose if G_true is None else G_true)
    provider.reset(0)
    G, st, p, _ = loop.step(G_init, loop.start_outer(G_init), 0, 0, None)
    return G, st, p


def refine_pose(scene, G_init, provider, cfg=None, G_true=None):
    """Refine the image pose of ``scene``'s object starting from ``G_init``.

    Runs ``cfg.outer`` rounds of: render views around the estimate, then
    ``cfg.inner`` iterations of induce, look up, revise and solve.  Fields
    live at ``1 / cfg.downsample`` resolution.  ``G_true`` defaults to the
    scene pose and only feeds the error columns of the trace.

    Returns ``(G, trace)``, one trace record per inner iteration.
    """
    cfg = cfg or RefinementConfig()
    G_true = scene.pose if G_true is None else G_true
    loop = _Loop(scene, provider, cfg, G_true)
    G = G_init
    trace = []
    for outer in range(cfg.outer):
        provider.reset(outer)
        views = loop.start_outer(G)
        revised = None
        for inner in range(cfg.inner):
            G, st, p, revised = loop.step(G, views, outer, inner, revised)
            rot, trans = pose_errors(G, G_true)
            trace.append(
                {
                    "outer": outer,
                    "inner": inner,
                    "outer_start": inner == 0,
                    "views": len(views.poses),
                    "rows": p.effective_rows(),
                    "objective": st.objectives[-1],
                    "rank_deficient": bool(st.rank_deficient),
                    "clamped": p.clamped,
                    "pose": G.to_list(),
                    "rot_err": rot,
                    "trans_err": trans,
                }
            )
    return G, trace


def trace_to_jsonl(trace, object_id=0):
    """One JSON object per line, each tagged with the schema and ``object_id``."""
    lines = [json.dumps({"schema": TRACE_SCHEMA, "object": object_id, **rec}, sort_keys=True) for rec in trace]
    return "".join(line + "\n" for line in lines)
