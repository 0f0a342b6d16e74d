"""Bidirectional depth-augmented PnP.

The image pose ``G0`` is the only variable.  Each :class:`Observation` is one
direction of one image/render pair:

``forward``  (render -> image): residual ``x' - project(G0 Gi^-1 backproject(x_i))``
``backward`` (image -> render): residual ``x' - project(Gi G0^-1 backproject(x_0))``

All residuals are weighted per channel ``(x, y, inverse depth)`` and stacked
into one 6x6 normal-equation system per Gauss-Newton step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .geometry import (
    BACKWARD,
    EPS_Z,
    FORWARD,
    CorrespondenceField,
    RigidTransform,
    adjoint,
    backproject,
    hat,
    point_twist_jacobian,
    project,
    projection_derivative,
    retract,
    se3_exp,
    se3_left_jacobian,
)

logger = logging.getLogger(__name__)

INFERENCE_ITERS = 10
TRAINING_ITERS = 3
BOTH = "both"


class UnderdeterminedError(ValueError):
    """Fewer than six residuals carry positive weight."""


class TraceError(ValueError):
    """The reverse pass needs a trace recorded by :func:`solve`."""


@dataclass(frozen=True)
class SolverOptions:
    iters: int = INFERENCE_ITERS
    damping: float = 1e-4
    max_escalations: int = 3
    depth_augmented: bool = True
    direction: str = BOTH  # "both", "forward" (render->image) or "backward"
    w_max: float = 1.0
    adaptive: bool = False  # Levenberg-Marquardt accept/reject on the objective
    early_exit: bool = False
    early_exit_tol: float = 1e-10
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.direction not in (BOTH, FORWARD, BACKWARD):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver option(s): {sorted(unknown)}")
        return cls(**d)


def apply_revisions(x, r):
    """Revised correspondences ``x + r``; masks are intersected."""
    if isinstance(r, CorrespondenceField):
        rc, rm = r.coords, r.mask
    else:
        rc, rm = np.asarray(r, dtype=float), np.ones(x.shape, dtype=bool)
    if rc.shape != x.coords.shape:
        raise ValueError(f"revision shape {rc.shape} does not match field {x.coords.shape}")
    mask = x.mask & rm
    coords = x.coords + rc
    return CorrespondenceField(np.where(mask[..., None], coords, 0.0), mask)


@dataclass(frozen=True, eq=False)
class Observation:
    """Residual block for one direction of one image/render pair.

    ``source`` holds the augmented points being mapped (render pixels for
    ``forward``, image pixels for ``backward``), ``target`` the revised
    correspondences and ``weight`` the per-channel confidences, all ``(M, 3)``.
    ``pixel_index`` records which source pixel each row came from.
    """

    render_pose: RigidTransform
    direction: str
    source: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    pixel_index: np.ndarray | None = None

    def __post_init__(self):
        if self.direction not in (FORWARD, BACKWARD):
            raise ValueError(f"unknown direction {self.direction!r}")
        src = np.asarray(self.source, dtype=float).reshape(-1, 3)
        tgt = np.asarray(self.target, dtype=float).reshape(-1, 3)
        w = np.asarray(self.weight, dtype=float).reshape(-1, 3)
        if not (src.shape == tgt.shape == w.shape):
            raise ValueError("source, target and weight must have matching shapes")
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "weight", w)
        if self.pixel_index is not None:
            object.__setattr__(self, "pixel_index", np.asarray(self.pixel_index, dtype=np.intp).reshape(-1))

    def __len__(self):
        return len(self.source)

    @classmethod
    def from_fields(cls, render_pose, direction, source, revised, weight):
        """Build from ``(H, W)`` fields; pixels masked in either field are dropped."""
        weight = np.asarray(weight, dtype=float)
        mask = source.mask & revised.mask
        idx = np.flatnonzero(mask)
        return cls(
            render_pose,
            direction,
            source.coords.reshape(-1, 3)[idx],
            revised.coords.reshape(-1, 3)[idx],
            weight.reshape(-1, 3)[idx],
            idx,
        )

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(eq=False)
class BdpnpProblem:
    """Observations of every pair plus the starting image pose."""

    observations: list
    initial_pose: RigidTransform
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.observations = list(self.observations)
        if not self.observations:
            raise ValueError("problem needs at least one observation")
        self.clamped = 0
        self.clamped_masks = []
        for i, ob in enumerate(self.observations):
            w = ob.weight
            if not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite")
            out = (w < 0) | (w > self.options.w_max)
            self.clamped_masks.append(out)
            if out.any():
                self.clamped += int(out.sum())
                self.observations[i] = ob.with_(weight=np.clip(w, 0.0, self.options.w_max))
        if self.clamped:
            logger.warning("clamped %d confidence weights into [0, %g]", self.clamped, self.options.w_max)

    def with_options(self, **changes):
        return BdpnpProblem(self.observations, self.initial_pose, replace(self.options, **changes))

    def with_initial_pose(self, G):
        return BdpnpProblem(self.observations, G, self.options)

    def active(self, ob):
        d = self.options.direction
        return d == BOTH or d == ob.direction

    def channel_mask(self):
        return np.array([1.0, 1.0, 1.0 if self.options.depth_augmented else 0.0])

    def effective_rows(self):
        cm = self.channel_mask()
        return int(sum(np.count_nonzero(ob.weight * cm > 0) for ob in self.observations if self.active(ob)))


class Linearization(NamedTuple):
    """Per-observation residuals, Jacobians and effective weights at one pose."""

    residuals: list  # (M, 3)
    jacobians: list  # (M, 3, 6), d prediction / d xi
    weights: list  # (M, 3), zero on inactive / invalid rows
    points: list  # transformed 3D points (M, 3)
    sources: list  # backprojected source points (M, 3)
    valid: list


def _relative(ob, G0):
    if ob.direction == FORWARD:
        return G0 @ ob.render_pose.inverse()
    return ob.render_pose @ G0.inverse()


def linearize(p, G0, sources=None):
    """Residuals and pose Jacobians of every observation at ``G0``.

    ``sources`` optionally overrides the source points per observation (the
    RGB variant swaps in rendered depth).
    """
    cm = p.channel_mask()
    out = Linearization([], [], [], [], [], [])
    for k, ob in enumerate(p.observations):
        src = ob.source if sources is None or sources[k] is None else sources[k]
        X, ok = backproject(src)
        T = _relative(ob, G0)
        P = T.apply(X)
        pred, ok2 = project(P)
        valid = ok & ok2
        Psafe = np.where(valid[:, None], P, np.array([0.0, 0.0, 1.0]))
        D = projection_derivative(Psafe)
        if ob.direction == FORWARD:
            J = D @ point_twist_jacobian(Psafe)
        else:
            J = -(D @ T.rotation) @ point_twist_jacobian(X)
        J[~valid] = 0.0
        w = ob.weight * cm * valid[:, None]
        if not p.active(ob):
            w = np.zeros_like(w)
        e = np.where(valid[:, None], ob.target - pred, 0.0)
        out.residuals.append(e)
        out.jacobians.append(J)
        out.weights.append(w)
        out.points.append(Psafe)
        out.sources.append(X)
        out.valid.append(valid)
    return out


def _normal_equations(lin):
    H = np.zeros((6, 6))
    g = np.zeros(6)
    E = 0.0
    for e, J, w in zip(lin.residuals, lin.jacobians, lin.weights):
        H += np.einsum("mca,mc,mcb->ab", J, w, J)
        g += np.einsum("mca,mc,mc->a", J, w, e)
        E += float(np.sum(w * e * e))
    return H, g, E


def objective(p, G0):
    """Weighted squared residuals of both directions at ``G0``."""
    lin = linearize(p, G0)
    return float(sum(np.sum(w * e * e) for e, w in zip(lin.residuals, lin.weights)))


def _damped(H, lam):
    return H + lam * np.diag(np.diag(H))


def _solve_damped(H, g, lam, opts):
    """Solve the damped system, escalating damping if it is singular."""
    for attempt in range(opts.max_escalations + 1):
        Hd = _damped(H, lam)
        d = np.sqrt(np.abs(np.diag(Hd)))
        if np.all(d > 0):
            S = Hd / np.outer(d, d)
            try:
                np.linalg.cholesky(S)
                if np.linalg.cond(S) < opts.cond_limit:
                    return np.linalg.solve(Hd, g), lam, False
            except np.linalg.LinAlgError:
                pass
        if attempt < opts.max_escalations:
            lam = lam * 10.0 if lam > 0 else 1e-4
    logger.warning("rank-deficient normal equations; returning a zero step")
    return np.zeros(6), lam, True


class GNStep(NamedTuple):
    dxi: np.ndarray
    pose: RigidTransform
    damping: float
    rank_deficient: bool
    objective: float  # at the linearization pose


def gauss_newton_step(p, G0, damping=None):
    """One damped Gauss-Newton update of the image pose."""
    if p.effective_rows() < 6:
        raise UnderdeterminedError(f"only {p.effective_rows()} weighted residuals; need at least 6")
    lam = p.options.damping if damping is None else damping
    H, g, E = _normal_equations(linearize(p, G0))
    dxi, lam, singular = _solve_damped(H, g, lam, p.options)
    return GNStep(dxi, retract(G0, dxi), lam, singular, E)


@dataclass
class SolveTrace:
    """Per-iteration record of a solve; the reverse pass replays it."""

    initial_pose: RigidTransform
    initial_objective: float
    poses: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    dampings: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    rank_deficient: bool = False
    inverse_depth: np.ndarray | None = None  # final image depth state of the RGB variant

    def __len__(self):
        return len(self.poses)

    def linearization_pose(self, t):
        return self.initial_pose if t == 0 else self.poses[t - 1]

    def to_dict(self):
        return {
            "initial_pose": self.initial_pose.to_list(),
            "initial_objective": self.initial_objective,
            "iterations": [
                {
                    "iter": t + 1,
                    "pose": self.poses[t].to_list(),
                    "objective": self.objectives[t],
                    "step_norm": self.step_norms[t],
                    "damping": self.dampings[t],
                    "accepted": self.accepted[t],
                }
                for t in range(len(self))
            ],
            "rank_deficient": self.rank_deficient,
        }


def solve(p, iters=None):
    """Run a fixed number of Gauss-Newton updates from ``p.initial_pose``.

    With ``options.adaptive`` a step that raises the objective is rejected and
    the damping multiplied by 10 (divided by 10 after an accepted step).
    """
    opts = p.options
    iters = opts.iters if iters is None else iters
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if p.effective_rows() < 6:
        raise UnderdeterminedError(f"only {p.effective_rows()} weighted residuals; need at least 6")
    G = p.initial_pose
    lam = opts.damping
    H, g, E = _normal_equations(linearize(p, G))
    trace = SolveTrace(G, E)
    for _ in range(iters):
        dxi, lam_used, singular = _solve_damped(H, g, lam, opts)
        trace.rank_deficient |= singular
        G_new = retract(G, dxi)
        H_new, g_new, E_new = _normal_equations(linearize(p, G_new))
        accepted = True
        if opts.adaptive:
            tries = 0
            while E_new > E + 1e-12 and tries < 10:
                lam_used = lam_used * 10.0 if lam_used > 0 else 1e-4
                dxi, lam_used, singular = _solve_damped(H, g, lam_used, opts)
                G_new = retract(G, dxi)
                H_new, g_new, E_new = _normal_equations(linearize(p, G_new))
                tries += 1
            if E_new > E + 1e-12:
                accepted = False
                dxi = np.zeros(6)
                G_new, H_new, g_new, E_new = G, H, g, E
            lam = max(lam_used / 10.0, opts.damping) if accepted else lam_used
        trace.poses.append(G_new)
        trace.objectives.append(E_new)
        trace.step_norms.append(float(np.linalg.norm(dxi)))
        trace.dampings.append(lam_used)
        trace.steps.append(dxi)
        trace.accepted.append(accepted)
        G, H, g, E = G_new, H_new, g_new, E_new
        if opts.early_exit and trace.step_norms[-1] < opts.early_exit_tol:
            break
    return G, trace


# ------------------------------------------------------------------ reverse mode


def _projection_hessian_dir(P, dP):
    """Directional derivative of :func:`projection_derivative` at ``P`` along ``dP``."""
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    dX, dY, dZ = dP[..., 0], dP[..., 1], dP[..., 2]
    iz = 1.0 / Z
    iz2 = iz * iz
    iz3 = iz2 * iz
    out = np.zeros(P.shape[:-1] + (3, 3))
    out[..., 0, 0] = -dZ * iz2
    out[..., 1, 1] = -dZ * iz2
    out[..., 0, 2] = -dX * iz2 + 2.0 * X * dZ * iz3
    out[..., 1, 2] = -dY * iz2 + 2.0 * Y * dZ * iz3
    out[..., 2, 2] = 2.0 * dZ * iz3
    return out


def _jacobian_pose_derivative(ob, G0, X, P):
    """``dJ/d eps_j`` for a left perturbation ``exp(eps) G0``; shape ``(6, M, 3, 6)``."""
    M = len(X)
    basis = np.eye(6)
    out = np.zeros((6, M, 3, 6))
    D = projection_derivative(P)
    if ob.direction == FORWARD:
        MP = point_twist_jacobian(P)
        for j in range(6):
            dP = MP[:, :, j]
            dM = np.zeros((M, 3, 6))
            dM[:, :, 3:] = -hat(dP)
            out[j] = _projection_hessian_dir(P, dP) @ MP + D @ dM
    else:
        R = _relative(ob, G0).rotation
        MX = point_twist_jacobian(X)
        RMX = R @ MX
        for j in range(6):
            dQ = -RMX[:, :, j]
            out[j] = -_projection_hessian_dir(P, dQ) @ RMX + (D @ R) @ hat(basis[j, 3:]) @ MX
    return out


def _step_pose_jacobian(lin, obs, G0, H, Hd, dxi, lam):
    """``d dxi / d eps`` (6x6) for a left perturbation of the linearization pose."""
    A = np.zeros((6, 6))
    rhs = np.zeros((6, 6))
    for ob, e, J, w, X, P in zip(obs, lin.residuals, lin.jacobians, lin.weights, lin.sources, lin.points):
        if not np.any(w):
            continue
        dJ = _jacobian_pose_derivative(ob, G0, X, P)
        dH = np.einsum("jmca,mc,mcb->jab", dJ, w, J)
        dH = dH + dH.transpose(0, 2, 1)
        dHd = dH + lam * np.einsum("jaa->ja", dH)[:, :, None] * np.eye(6)[None]
        dg = np.einsum("jmca,mc,mc->ja", dJ, w, e)
        rhs += (dg - dHd @ dxi).T
    rhs -= H  # de/deps_j = -J[..., j] contributes -H[:, j] to dg_j
    A = np.linalg.solve(Hd, rhs)
    return A


def solver_vjp(p, trace, upstream):
    """Gradients of a scalar loss w.r.t. every revised target and weight.

    ``upstream`` is dL/d eps for a left perturbation ``exp(eps) @ G_final`` of
    the solved pose.  The unrolled Gauss-Newton iterations recorded in
    ``trace`` are replayed backwards, including the retraction's left
    Jacobian.  Returns ``(grad_targets, grad_weights)``, lists of ``(M, 3)``
    arrays aligned with ``p.observations``.  Because ``x' = x + r`` the target
    gradient is also the gradient w.r.t. the revision.
    """
    if trace is None or len(trace) == 0:
        raise TraceError("solver_vjp needs the trace of a recorded solve")
    gbar = np.asarray(upstream, dtype=float).reshape(6).copy()
    obs = p.observations
    gt = [np.zeros_like(ob.target) for ob in obs]
    gw = [np.zeros_like(ob.weight) for ob in obs]
    for t in reversed(range(len(trace))):
        dxi = np.asarray(trace.steps[t])
        if not trace.accepted[t] or not np.any(dxi):
            continue
        G0 = trace.linearization_pose(t)
        lam = trace.dampings[t]
        lin = linearize(p, G0)
        H, g, _ = _normal_equations(lin)
        Hd = _damped(H, lam)
        u = se3_left_jacobian(dxi).T @ gbar
        a = np.linalg.solve(Hd, u)
        for k, (e, J, w) in enumerate(zip(lin.residuals, lin.jacobians, lin.weights)):
            Ja = J @ a
            Jd = J @ dxi
            gt[k] += w * Ja
            # a weight only matters where its row is live in this iteration
            live = (p.channel_mask()[None, :] > 0) & lin.valid[k][:, None] & p.active(obs[k])
            gwk = e * Ja - Ja * Jd - lam * np.einsum("mca,a,a->mc", J * J, a, dxi)
            gw[k] += np.where(live, gwk, 0.0)
        A = _step_pose_jacobian(lin, obs, G0, H, Hd, dxi, lam)
        gbar = A.T @ u + adjoint(se3_exp(dxi)).T @ gbar
    gw = [np.where(m, 0.0, g) for g, m in zip(gw, p.clamped_masks)]
    return gt, gw


# ------------------------------------------------------------------- RGB variant


class RGBSystem(NamedTuple):
    """Joint pose / per-pixel inverse-depth normal equations."""

    H_pp: np.ndarray  # (6, 6)
    H_pd: np.ndarray  # (6, P)
    H_dd: np.ndarray  # (P,) block-diagonal depth block
    g_p: np.ndarray  # (6,)
    g_d: np.ndarray  # (P,)
    pixels: np.ndarray  # image pixel index of each depth variable
    objective: float


def rgb_linearize(p, G0, inv_depth):
    """Linearize the objective jointly in pose and image inverse depth.

    ``inv_depth`` is a flat per-image-pixel array (0 where the render has no
    surface).  Backward observations read their source depth from it through
    ``pixel_index``; rows landing on empty pixels are masked.  Returns the
    pose linearization plus ``(rows, jd)`` per observation, where ``jd`` is
    d prediction / d inverse depth (zero for forward rows).
    """
    inv_depth = np.asarray(inv_depth, dtype=float)
    sources = []
    for ob in p.observations:
        if ob.direction == BACKWARD:
            if ob.pixel_index is None:
                raise ValueError("backward observations need pixel_index for the RGB variant")
            src = ob.source.copy()
            src[:, 2] = inv_depth[ob.pixel_index]
            sources.append(src)
        else:
            sources.append(None)
    lin = linearize(p, G0, sources)
    jds = []
    for ob, X, P, valid in zip(p.observations, lin.sources, lin.points, lin.valid):
        if ob.direction == FORWARD:
            jds.append(np.zeros((len(ob), 3)))
            continue
        T = _relative(ob, G0)
        d = inv_depth[ob.pixel_index]
        dsafe = np.where(valid, d, 1.0)
        dX = -X / dsafe[:, None]  # d backproject / d inverse depth
        jd = np.einsum("mij,jk,mk->mi", projection_derivative(P), T.rotation, dX)
        jds.append(np.where(valid[:, None], jd, 0.0))
    return lin, jds


def rgb_normal_equations(p, G0, inv_depth):
    lin, jds = rgb_linearize(p, G0, inv_depth)
    n = len(inv_depth)
    H_pp = np.zeros((6, 6))
    g_p = np.zeros(6)
    H_pd = np.zeros((6, n))
    H_dd = np.zeros(n)
    g_d = np.zeros(n)
    E = 0.0
    for ob, e, J, w, jd in zip(p.observations, lin.residuals, lin.jacobians, lin.weights, jds):
        H_pp += np.einsum("mca,mc,mcb->ab", J, w, J)
        g_p += np.einsum("mca,mc,mc->a", J, w, e)
        E += float(np.sum(w * e * e))
        if ob.direction == BACKWARD:
            idx = ob.pixel_index
            np.add.at(H_pd.T, idx, np.einsum("mca,mc,mc->ma", J, w, jd))
            np.add.at(H_dd, idx, np.einsum("mc,mc->m", w, jd * jd))
            np.add.at(g_d, idx, np.einsum("mc,mc->m", w, jd * e))
    # pixels whose depth is not observable stay fixed
    keep = H_dd > 1e-12 * max(float(H_dd.max(initial=0.0)), 1e-300)
    pix = np.flatnonzero(keep)
    return RGBSystem(H_pp, H_pd[:, pix], H_dd[pix], g_p, g_d[pix], pix, E)


def rgb_joint_step(p, G0, inv_depth, damping=None):
    """Joint damped Gauss-Newton step; depth eliminated by the Schur complement.

    Returns ``(dxi, depth_update, system)``; ``depth_update`` is a full-size
    array over image pixels (zero for fixed pixels).
    """
    lam = p.options.damping if damping is None else damping
    sys = rgb_normal_equations(p, G0, inv_depth)
    Hdd = sys.H_dd * (1.0 + lam)
    Hpp = _damped(sys.H_pp, lam)
    W = sys.H_pd / Hdd  # (6, P)
    S = Hpp - W @ sys.H_pd.T
    r = sys.g_p - W @ sys.g_d
    dxi, _, singular = _solve_damped(S, r, 0.0, replace(p.options, max_escalations=0))
    dd = np.zeros(len(inv_depth))
    if not singular:
        dd[sys.pixels] = (sys.g_d - sys.H_pd.T @ dxi) / Hdd
    return dxi, dd, sys


def solve_rgb(p, rendered_depth_fn, iters=None, discard_depth_update=True, inv_depth=None):
    """RGB-only pose solve with image depth as an auxiliary variable.

    ``rendered_depth_fn(G0)`` returns the flat per-image-pixel inverse depth
    rendered at ``G0``.  Each step solves jointly for pose and depth; by
    default the depth update is thrown away and depth re-rendered from the
    new pose.  ``discard_depth_update=False`` adds the update to the current
    depth instead, starting from ``inv_depth`` when given.  The final depth
    state is left in ``trace.inverse_depth``.
    """
    iters = p.options.iters if iters is None else iters
    if iters < 1:
        raise ValueError("iters must be >= 1")
    G = p.initial_pose
    if inv_depth is None or discard_depth_update:
        inv_depth = rendered_depth_fn(G)
    inv_depth = np.asarray(inv_depth, dtype=float)
    E0 = rgb_normal_equations(p, G, inv_depth).objective
    trace = SolveTrace(G, E0)
    for _ in range(iters):
        dxi, dd, sys = rgb_joint_step(p, G, inv_depth)
        # a singular Schur system yields an exact zero step
        trace.rank_deficient |= not np.any(dxi) and sys.objective > 0
        G = retract(G, dxi)
        if discard_depth_update:
            inv_depth = np.asarray(rendered_depth_fn(G), dtype=float)
        else:
            inv_depth = np.where(inv_depth > 0, np.maximum(inv_depth + dd, 0.0), 0.0)
        trace.poses.append(G)
        trace.objectives.append(rgb_normal_equations(p, G, inv_depth).objective)
        trace.step_norms.append(float(np.linalg.norm(dxi)))
        trace.dampings.append(p.options.damping)
        trace.steps.append(dxi)
        trace.accepted.append(True)
    trace.inverse_depth = inv_depth
    return G, trace
