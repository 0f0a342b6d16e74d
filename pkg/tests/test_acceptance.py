"""Acceptance suite: one test and one PASS/FAIL line per primary criterion.

Run ``pytest tests/test_acceptance.py -v`` (the lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``.
"""

import os
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cirpose.cli import main as cli_main  # noqa: E402
from cirpose.correlation import build_correlation, lookup  # noqa: E402
from cirpose.geometry import (  # noqa: E402
    BACKWARD,
    FORWARD,
    RigidTransform,
    backproject,
    pose_errors,
    project,
    projection_jacobian,
    retract,
    se3_exp,
    se3_log,
)
from cirpose.gradcheck import run_gradcheck  # noqa: E402
from cirpose.metrics import RecallSpec, mspd, mssd, recall, vsd  # noqa: E402
from cirpose.refine import RGB, OracleProvider, RefinementConfig, refine_pose, single_solve  # noqa: E402
from cirpose.scene import default_camera, make_blob, make_box, perturb_pose, random_object_pose, synthetic_scene  # noqa: E402
from cirpose.solver import rgb_joint_step  # noqa: E402
from oracles import (  # noqa: E402
    correlation_loops,
    lookup_scalar,
    mspd_loops,
    mssd_loops,
    recall_count,
    vsd_loops,
)

RESULTS = []


def report(name, ok, detail, elapsed, limit):
    within = elapsed < limit
    line = f"{'PASS' if ok and within else 'FAIL'}  {name}: {detail}; {elapsed:.1f} s (limit {limit:.0f} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line
    assert within, line


def _twist(rng, max_angle=np.pi - 1e-3, trans=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([rng.uniform(-trans, trans, 3), axis * rng.uniform(0, max_angle)])


# --------------------------------------------------------------------- SE3


def test_se3_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        xi = _twist(rng)
        G = se3_exp(xi)
        worst = max(worst, np.max(np.abs(se3_log(G) - xi)), np.max(np.abs(se3_exp(se3_log(G)).matrix() - G.matrix())))
    group = True
    for _ in range(200):
        A, B, C = (se3_exp(_twist(rng)) for _ in range(3))
        group &= ((A @ B) @ C).allclose(A @ (B @ C), atol=1e-12)
        group &= (A @ A.inverse()).allclose(RigidTransform.identity(), atol=1e-12)
        group &= (A @ RigidTransform.identity()).allclose(A, atol=0)
        group &= retract(A, np.zeros(6)).allclose(A, atol=0)
        xi = _twist(rng, 1.0)
        group &= (se3_exp(xi) @ se3_exp(-xi)).allclose(RigidTransform.identity(), atol=1e-12)
        group &= A.is_valid(1e-12)
    ok = worst < 1e-9 and group
    report("SE3 suite", ok, f"max round-trip error {worst:.2e} (< 1e-9), group checks {'ok' if group else 'failed'}", time.perf_counter() - t0, 5)


# -------------------------------------------------------------- projection


def test_projection_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.uniform(-5, 5, 10_000), rng.uniform(-5, 5, 10_000), rng.uniform(0.1, 10.0, 10_000)])
    x, ok1 = project(X)
    Y, ok2 = backproject(x)
    inv_err = float(np.max(np.abs(Y - X) / np.maximum(1.0, np.abs(X))))
    again, _ = project(Y)
    inv_err = max(inv_err, float(np.max(np.abs(again - x))))
    worst = 0.0
    h = 1e-6
    for k in range(1000):
        direction = FORWARD if k % 2 == 0 else BACKWARD
        T = se3_exp(_twist(rng, 0.4, 0.05))
        P = T.inverse().apply(rng.uniform([-0.3, -0.3, 0.5], [0.3, 0.3, 3.0]))
        J, _ = projection_jacobian(P, direction, T)
        Jn = np.zeros((3, 6))
        for j in range(6):
            e = np.zeros(6)
            e[j] = h
            if direction == FORWARD:
                f = lambda d: project((se3_exp(d) @ T).apply(P))[0]
            else:
                f = lambda d: project((T @ se3_exp(-d)).apply(P))[0]
            Jn[:, j] = (f(e) - f(-e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(J - Jn)) / np.max(np.abs(Jn))))
    ok = ok1.all() and ok2.all() and inv_err < 1e-10 and worst < 1e-5
    report(
        "Projection suite", ok,
        f"inverse-pair error {inv_err:.2e} (< 1e-10), Jacobian rel. error {worst:.2e} (< 1e-5)",
        time.perf_counter() - t0, 5,
    )


# ------------------------------------------------------------- correlation


def test_correlation_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_vol = worst_look = 0.0
    for _ in range(20):
        H1, W1, H2, W2 = rng.integers(3, 9, 4)
        D = int(rng.integers(1, 6))
        f1, f2 = rng.normal(size=(H1, W1, D)), rng.normal(size=(H2, W2, D))
        pyr = build_correlation(f1, f2)
        worst_vol = max(worst_vol, float(np.max(np.abs(pyr[0] - correlation_loops(f1, f2)))))
        coords = rng.uniform(-2, max(H2, W2) + 2, size=(H1, W1, 2))
        r = int(rng.integers(0, 4))
        worst_look = max(worst_look, float(np.max(np.abs(lookup(pyr, coords, r) - lookup_scalar(pyr.levels, coords, r)))))
    ok = worst_vol < 1e-10 and worst_look < 1e-10
    report(
        "Correlation oracle equivalence", ok,
        f"volume error {worst_vol:.2e}, lookup error {worst_look:.2e} (< 1e-10) on 20 instances",
        time.perf_counter() - t0, 10,
    )


# ----------------------------------------------------------------- BD-PnP


def test_bdpnp_convergence():
    t0 = time.perf_counter()
    cfg = RefinementConfig(correlation=False)
    n_ok, worst_rot, worst_trans, min_pixels, views = 0, 0.0, 0.0, 10**9, set()
    for s in range(100):
        scene = synthetic_scene(s)
        G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(10_000 + s))
        G, trace, p = single_solve(scene, G0, OracleProvider(scene.pose), cfg)
        rot, trans = pose_errors(G, scene.pose)
        pixels = int((scene.depth[::4, ::4] > 0).sum())
        min_pixels = min(min_pixels, pixels)
        views.add(len(p.observations) // 2)
        n_ok += rot < 1e-4 and trans < 1e-6 and len(trace) == 10
        worst_rot, worst_trans = max(worst_rot, rot), max(worst_trans, trans)
    ok = n_ok == 100 and min_pixels >= 200 and views == {7}
    report(
        "BD-PnP convergence", ok,
        f"{n_ok}/100 scenes converged, worst {worst_rot:.1e} rad / {worst_trans:.1e} m, "
        f">= {min_pixels} valid pixels, {sorted(views)} views",
        time.perf_counter() - t0, 60,
    )


# ---------------------------------------------------------- robust weights


def test_robust_weighting():
    t0 = time.perf_counter()
    cfg = RefinementConfig(correlation=False)
    worst_gap, clean_err, heavy_err = 0.0, [], []
    for s in range(20):
        scene = synthetic_scene(500 + s)
        G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(s))
        clean, _, _ = single_solve(scene, G0, OracleProvider(scene.pose), cfg)
        zero, _, _ = single_solve(scene, G0, OracleProvider(scene.pose, outlier_rate=0.2, seed=s, outlier_weight=0.0), cfg)
        heavy, _, _ = single_solve(scene, G0, OracleProvider(scene.pose, outlier_rate=0.2, seed=s, outlier_weight=1.0), cfg)
        worst_gap = max(worst_gap, *pose_errors(zero, clean))
        clean_err.append(pose_errors(clean, scene.pose)[0])
        heavy_err.append(pose_errors(heavy, scene.pose)[0])
    ok = worst_gap < 1e-9 and np.median(heavy_err) > np.median(clean_err)
    report(
        "Robust weighting", ok,
        f"zero-weight gap {worst_gap:.1e} (< 1e-9); median rot. error clean {np.median(clean_err):.1e} "
        f"vs unit-weight outliers {np.median(heavy_err):.1e}",
        time.perf_counter() - t0, 60,
    )


# ---------------------------------------------------------------- ablation


def _suite_errors(cfg, n=20):
    rot, ms = [], []
    for s in range(n):
        scene = synthetic_scene(1000 + s)
        G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(s))
        provider = OracleProvider(scene.pose, 2.0, 0.2, seed=s, outlier_weight=0.05, view_noise_growth=1.0)
        G, _ = refine_pose(scene, G0, provider, cfg)
        rot.append(pose_errors(G, scene.pose)[0])
        ms.append(mssd(G, scene.pose, scene.model))
    return float(np.median(rot)), float(np.median(ms))


def test_ablation_directionality():
    t0 = time.perf_counter()
    base = RefinementConfig(inner=5, correlation=False)
    from dataclasses import replace

    runs = {
        "bi": base,
        "fwd": replace(base, direction=FORWARD),
        "bwd": replace(base, direction=BACKWARD),
        "1view": replace(base, views=1),
        "noaug": replace(base, depth_augmented=False),
        "outer4": replace(base, outer=4),
    }
    m = {k: _suite_errors(cfg) for k, cfg in runs.items()}
    checks = {
        "bi<=fwd": m["bi"][0] <= m["fwd"][0],
        "bi<=bwd": m["bi"][0] <= m["bwd"][0],
        "7view<=1view": m["bi"][0] <= m["1view"][0],
        "aug<=noaug": m["bi"][0] <= m["noaug"][0],
        "outer4<=outer1 (MSSD)": m["outer4"][1] <= m["bi"][1],
    }
    detail = ", ".join(f"{k} {'ok' if v else 'VIOLATED'}" for k, v in checks.items())
    detail += "; median rot. " + " ".join(f"{k}={v[0]:.4f}" for k, v in m.items())
    report("Ablation directionality", all(checks.values()), detail, time.perf_counter() - t0, 600)


# ----------------------------------------------------------------- RGB-only


def _dense_joint_step(sys_, lam):
    n = len(sys_.pixels)
    Hf = np.zeros((6 + n, 6 + n))
    Hf[:6, :6] = sys_.H_pp
    Hf[:6, 6:] = sys_.H_pd
    Hf[6:, :6] = sys_.H_pd.T
    Hf[6:, 6:] = np.diag(sys_.H_dd)
    Hf += lam * np.diag(np.diag(Hf))
    return np.linalg.solve(Hf, np.concatenate([sys_.g_p, sys_.g_d]))


def test_rgb_variant():
    t0 = time.perf_counter()
    from dataclasses import replace

    # Schur vs dense on the problems the loop itself builds
    worst = 0.0
    for s in range(3):
        scene = synthetic_scene(3000 + s)
        G0 = perturb_pose(scene.pose, 10.0, 0.03, np.random.default_rng(s))
        provider = OracleProvider(scene.pose, 1.0, 0.1, seed=s, outlier_weight=0.05)
        _, _, p = single_solve(scene, G0, provider, RefinementConfig(mode=RGB, correlation=False, gn_iters=1))
        n_pix = 1 + max(int(ob.pixel_index.max()) for ob in p.observations if ob.direction == BACKWARD)
        inv = np.zeros(n_pix)
        for ob in p.observations:
            if ob.direction == BACKWARD:
                inv[ob.pixel_index] = ob.source[:, 2]
        dxi, dd, sys_ = rgb_joint_step(p, G0, inv)
        x = _dense_joint_step(sys_, p.options.damping)
        worst = max(worst, float(np.max(np.abs(dxi - x[:6]))), float(np.max(np.abs(dd[sys_.pixels] - x[6:]))))

    base = RefinementConfig(mode=RGB, inner=5, correlation=False)
    errs = {True: [], False: []}
    for s in range(20):
        scene = synthetic_scene(2000 + s)
        G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(s))
        for discard in (True, False):
            provider = OracleProvider(scene.pose, 2.0, 0.2, seed=s, outlier_weight=0.05, view_noise_growth=1.0)
            G, _ = refine_pose(scene, G0, provider, replace(base, discard_depth_update=discard))
            errs[discard].append(pose_errors(G, scene.pose)[0])
    med_d, med_a = float(np.median(errs[True])), float(np.median(errs[False]))
    ok = worst < 1e-8 and med_d <= med_a
    report(
        "RGB-only variant", ok,
        f"Schur vs dense {worst:.1e} (< 1e-8); median rot. error discard {med_d:.4f} vs apply {med_a:.4f}",
        time.perf_counter() - t0, 300,
    )


# --------------------------------------------------------------------- VJP


def test_solver_vjp():
    t0 = time.perf_counter()
    one = run_gradcheck(n_problems=100, n_pixels=5, gn_iters=1, seed=0)
    three = run_gradcheck(n_problems=100, n_pixels=5, gn_iters=3, seed=1)
    ok = one.max_rel_error < 1e-4 and three.max_rel_error < 1e-3
    report(
        "Solver VJP", ok,
        f"1 iteration {one.max_rel_error:.1e} (< 1e-4), 3 iterations {three.max_rel_error:.1e} (< 1e-3) on 100 problems each",
        time.perf_counter() - t0, 120,
    )


# ----------------------------------------------------------------- metrics


def test_metrics_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    K = default_camera()
    models = [make_blob(rng), make_box(with_symmetries=True)]
    rel = 0.0
    vsd_exact = True
    for k in range(50):
        model = models[k % 2]
        syms = [S.matrix() for S in model.symmetries]
        P = random_object_pose(rng)
        Q = perturb_pose(P, rng.uniform(0, 40), rng.uniform(0, 0.05), rng)
        a, b = mssd(Q, P, model), mssd_loops(Q.matrix(), P.matrix(), model.vertices, syms)
        c, d = mspd(Q, P, model, K), mspd_loops(Q.matrix(), P.matrix(), model.vertices, syms, K.fx, K.fy, K.cx, K.cy)
        rel = max(rel, abs(a - b) / max(b, 1e-300), abs(c - d) / max(d, 1e-300))
        D_hat = np.where(rng.random((12, 16)) < 0.7, rng.uniform(0.4, 0.6, (12, 16)), 0.0)
        D_bar = np.where(rng.random((12, 16)) < 0.7, np.abs(D_hat + rng.normal(0, 0.02, (12, 16))), 0.0)
        S = np.where(rng.random((12, 16)) < 0.8, rng.uniform(0.35, 0.65, (12, 16)), 0.0)
        tau = rng.uniform(0.005, 0.05)
        vsd_exact &= vsd(D_hat, D_bar, S, tau) == vsd_loops(D_hat, D_bar, S, tau, 0.015)
    trans_err = 0.0
    blob = models[0]
    for _ in range(50):
        P = random_object_pose(rng)
        t = rng.normal(size=3) * 0.05
        trans_err = max(trans_err, abs(mssd(RigidTransform(P.rotation, P.translation + t), P, blob) - np.linalg.norm(t)))
    grid_ok = True
    rec_gap = 0.0
    for _ in range(50):
        d = rng.uniform(0.05, 0.3)
        spec = RecallSpec.mssd(d)
        grid_ok &= len(spec.thresholds) == 10 and np.allclose(spec.thresholds, d * np.linspace(0.05, 0.5, 10), rtol=1e-14)
        errs = rng.uniform(0, 0.6 * d, size=int(rng.integers(1, 30)))
        rec_gap = max(rec_gap, abs(recall(errs, spec) - recall_count(errs, spec.thresholds)))
    ok = rel < 1e-12 and vsd_exact and trans_err < 1e-15 and grid_ok and rec_gap == 0.0
    report(
        "Metrics", ok,
        f"MSSD/MSPD rel. gap {rel:.1e} (round-off), VSD {'exact' if vsd_exact else 'MISMATCH'}, "
        f"translation MSSD gap {trans_err:.1e}, recall grid {'ok' if grid_ok else 'wrong'}, recall gap {rec_gap:.1e}",
        time.perf_counter() - t0, 30,
    )


# ------------------------------------------------------------- determinism


def _tree(d):
    out = {}
    for root, _, names in os.walk(d):
        for n in names:
            if n != "timing.json":  # wall-clock times only
                p = os.path.join(root, n)
                with open(p, "rb") as f:
                    out[os.path.relpath(p, d)] = f.read()
    return out


def test_cli_determinism():
    t0 = time.perf_counter()
    small = ["--width", "80", "--height", "60", "--correlation", "false"]
    with tempfile.TemporaryDirectory() as tmp:
        cli_main(["make-scene", "--objects", "1", "--seed", "2", "--width", "80", "--height", "60", "--out", os.path.join(tmp, "s")])
        scene = os.path.join(tmp, "s", "scene_000")
        runs = {
            "make-scene": ["make-scene", "--objects", "2", "--seed", "3", "--width", "80", "--height", "60"],
            "solve": ["solve", "--scene", scene, "--seed", "4", "--noise", "1", "--outliers", "0.1", "--trace"] + small,
            "refine": ["refine", "--objects", "2", "--seed", "5", "--inner", "2", "--gn-iters", "2", "--noise", "1", "--sweep-angles", "5,10"] + small,
            "eval": ["eval", "--scene", scene, "--pred", os.path.join(scene, "gt_poses.json")],
            "gradcheck": ["gradcheck", "--problems", "2", "--seed", "6"],
            "bench": ["bench", "--objects", "1", "--seed", "7", "--inner-grid", "1,2", "--outer-grid", "1", "--gn-iters", "2"] + small,
        }
        same = {}
        for name, args in runs.items():
            outs = [os.path.join(tmp, f"{name}_{i}") for i in range(2)]
            codes = [cli_main(args + ["--out", o]) for o in outs]
            a, b = _tree(outs[0]), _tree(outs[1])
            same[name] = codes == [0, 0] and bool(a) and a == b
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items())
    report("Determinism", all(same.values()), detail, time.perf_counter() - t0, 120)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
