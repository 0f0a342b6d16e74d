"""Finite-difference checks of the solver's reverse pass on small random problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BACKWARD, FORWARD, RigidTransform, project, rotation_about_axis, se3_log
from .scene import perturb_pose, random_object_pose
from .solver import BdpnpProblem, Observation, SolverOptions, solve, solver_vjp


def random_problem(rng, n_pixels=5, n_views=1, gn_iters=1, noise=0.01, damping=1e-4):
    """Small well-posed problem with noisy targets and weights in ``[0.2, 0.9]``."""
    rng = np.random.default_rng(rng)
    G_true = random_object_pose(rng, distance=(0.4, 0.7))
    obs = []
    for _ in range(n_views):
        axis = rng.normal(size=3)
        Gi = RigidTransform(rotation_about_axis(axis, np.deg2rad(rng.uniform(5, 20))) @ G_true.rotation, G_true.translation)
        for direction in (FORWARD, BACKWARD):
            O = rng.uniform(-0.06, 0.06, size=(n_pixels, 3))
            src_pose, dst_pose = (Gi, G_true) if direction == FORWARD else (G_true, Gi)
            source, _ = project(src_pose.apply(O))
            target, _ = project(dst_pose.apply(O))
            target = target + rng.normal(scale=noise, size=target.shape) * np.array([1.0, 1.0, 0.5])
            weight = rng.uniform(0.2, 0.9, size=target.shape)
            obs.append(Observation(Gi, direction, source, target, weight, np.arange(n_pixels)))
    G_init = perturb_pose(G_true, 5.0, 0.02, rng)
    return BdpnpProblem(obs, G_init, SolverOptions(iters=gn_iters, damping=damping))


def _with_params(p, targets, weights):
    obs = [ob.with_(target=t, weight=w) for ob, t, w in zip(p.observations, targets, weights)]
    return BdpnpProblem(obs, p.initial_pose, p.options)


def finite_difference_gradients(p, upstream, h=1e-5):
    """Central differences of ``upstream . log(G(theta) G(theta0)^-1)``."""
    G_ref, _ = solve(p)
    G_ref_inv = G_ref.inverse()
    targets = [ob.target.copy() for ob in p.observations]
    weights = [ob.weight.copy() for ob in p.observations]

    def loss(ts, ws):
        G, _ = solve(_with_params(p, ts, ws))
        return float(upstream @ se3_log(G @ G_ref_inv))

    out = []
    for params in (targets, weights):
        grads = []
        for k, arr in enumerate(params):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                fp = loss(targets, weights)
                arr[idx] = orig - h
                fm = loss(targets, weights)
                arr[idx] = orig
                g[idx] = (fp - fm) / (2.0 * h)
            grads.append(g)
        out.append(grads)
    return out[0], out[1]


def relative_error(analytic, numeric):
    """``max|a - b| / max|b|`` over all entries of a parameter class."""
    a = np.concatenate([x.ravel() for x in analytic])
    b = np.concatenate([x.ravel() for x in numeric])
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


@dataclass
class GradcheckResult:
    problems: int
    pixels: int
    gn_iters: int
    max_rel_error_revisions: float
    max_rel_error_weights: float

    @property
    def max_rel_error(self):
        return max(self.max_rel_error_revisions, self.max_rel_error_weights)

    def to_dict(self):
        return {
            "problems": self.problems,
            "pixels": self.pixels,
            "gn_iters": self.gn_iters,
            "max_rel_error_revisions": self.max_rel_error_revisions,
            "max_rel_error_weights": self.max_rel_error_weights,
        }


def run_gradcheck(n_problems=10, n_pixels=5, gn_iters=1, seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    err_r = err_w = 0.0
    for _ in range(n_problems):
        p = random_problem(rng, n_pixels=n_pixels, gn_iters=gn_iters)
        upstream = rng.normal(size=6)
        _, trace = solve(p)
        gt, gw = solver_vjp(p, trace, upstream)
        nt, nw = finite_difference_gradients(p, upstream, h)
        err_r = max(err_r, relative_error(gt, nt))
        err_w = max(err_w, relative_error(gw, nw))
    return GradcheckResult(n_problems, n_pixels, gn_iters, err_r, err_w)
