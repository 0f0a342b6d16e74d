import json

import numpy as np
import pytest

from cirpose.geometry import CorrespondenceField, Intrinsics, induce_correspondence, pose_errors, rotation_angle
from cirpose.refine import (
    CAMERA_FRAME,
    RGB,
    RGBD,
    TRACE_SCHEMA,
    OracleProvider,
    PairRevisions,
    RefinementConfig,
    RefinementError,
    RevisionProvider,
    ZeroProvider,
    depth_residuals,
    oracle_revisions,
    perturbed_view_poses,
    refine_pose,
    solver_residual_features,
    surface_features,
    trace_to_jsonl,
)
from cirpose.scene import perturb_pose, random_object_pose, render_depth, synthetic_scene
from cirpose.solver import apply_revisions
from oracles import bilinear_scalar

FAST = RefinementConfig(inner=3, correlation=False)


# ---------------------------------------------------------------- views


def test_rgbd_views():
    G = random_object_pose(np.random.default_rng(0))
    poses = perturbed_view_poses(G)
    assert len(poses) == 7
    assert poses[0] is G
    for Gi in poses[1:]:
        assert np.rad2deg(rotation_angle(Gi.rotation @ G.rotation.T)) == pytest.approx(22.5, abs=1e-10)
        assert np.array_equal(Gi.translation, G.translation)


@pytest.mark.parametrize("frame", ["object", CAMERA_FRAME])
def test_rgb_views(frame):
    G = random_object_pose(np.random.default_rng(1))
    poses = perturbed_view_poses(G, RGB, frame=frame)
    assert len(poses) == 13
    angles = [np.rad2deg(rotation_angle(Gi.rotation @ G.rotation.T)) for Gi in poses[1:]]
    assert np.allclose(angles, [22.5] * 6 + [45.0] * 6, atol=1e-10)
    with pytest.raises(ValueError):
        perturbed_view_poses(G, "rgbdx")


# --------------------------------------------------------- residual maps


def test_depth_residuals_identical_views_are_zero():
    scene = synthetic_scene(3)
    K = scene.K.subsampled(4)
    D = render_depth(scene.model, scene.pose, K)
    x = induce_correspondence(scene.pose, scene.pose, D, K)
    inv = np.where(D > 0, 1.0 / np.where(D > 0, D, 1.0), 0.0)
    res, mask = depth_residuals(inv, x, K)
    assert mask.sum() > 100
    assert np.max(np.abs(res)) < 1e-12


def test_depth_residuals_uniform_offset(rng):
    K = Intrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
    inv = rng.uniform(0.5, 2.0, size=(6, 8))
    uv = np.stack(np.meshgrid(np.arange(8.0), np.arange(6.0)), -1)
    xy = K.normalize(uv)
    x = CorrespondenceField(np.concatenate([xy, inv[..., None]], -1), np.ones((6, 8), bool))
    res, mask = depth_residuals(inv + 0.25, x, K)
    assert mask.all()
    assert np.allclose(res, -0.25, rtol=0, atol=1e-15)


def test_depth_residuals_match_scalar_oracle(rng):
    K = Intrinsics(12.0, 11.0, 5.0, 4.0, 10, 8)
    target = rng.uniform(0.5, 2.0, size=(8, 10))
    target[rng.random((8, 10)) < 0.1] = 0.0
    uv = rng.uniform(-1.0, 10.0, size=(6, 7, 2))
    d = rng.uniform(0.5, 2.0, size=(6, 7, 1))
    x = CorrespondenceField(np.concatenate([K.normalize(uv), d], -1), rng.random((6, 7)) > 0.1)
    res, mask = depth_residuals(target, x, K)
    valid = target > 0
    for i in range(6):
        for j in range(7):
            u, v = uv[i, j]
            ok = x.mask[i, j] and bilinear_scalar(valid.astype(float), u, v) > 1 - 1e-9
            assert mask[i, j] == ok
            if ok:
                assert abs(res[i, j] - (d[i, j, 0] - bilinear_scalar(target, u, v))) < 1e-10
            else:
                assert res[i, j] == 0.0


def test_solver_residual_features(rng):
    mask = rng.random((4, 5)) > 0.2
    a = CorrespondenceField(np.where(mask[..., None], rng.normal(size=(4, 5, 3)), 0), mask)
    b = CorrespondenceField(rng.normal(size=(4, 5, 3)), np.ones((4, 5), bool))
    assert not np.any(solver_residual_features(a))
    assert not np.any(solver_residual_features(a, a))
    out = solver_residual_features(a, b)
    assert np.array_equal(out[mask], (a.coords - b.coords)[mask])
    assert not np.any(out[~mask])
    with pytest.raises(ValueError):
        solver_residual_features(a, CorrespondenceField(np.zeros((2, 2, 3)), np.ones((2, 2), bool)))


def test_surface_features_are_view_invariant():
    scene = synthetic_scene(4)
    K = scene.K.subsampled(4)
    D = render_depth(scene.model, scene.pose, K)
    f = surface_features(D, scene.pose, K)
    assert f.shape == D.shape + (18,)
    assert np.allclose(np.linalg.norm(f[D > 0], axis=-1), 1.0)
    assert not np.any(f[D <= 0])


# ------------------------------------------------------------- providers


def _oracle_setup(seed=5):
    scene = synthetic_scene(seed)
    K = scene.K.subsampled(4)
    views = perturbed_view_poses(scene.pose)
    depths = [render_depth(scene.model, Gi, K) for Gi in views]
    sensor = scene.depth[::4, ::4][: K.height, : K.width]
    return scene, K, views, depths, sensor


def test_oracle_zero_revisions_at_truth():
    scene, K, views, depths, sensor = _oracle_setup()
    out = oracle_revisions(scene.pose, scene.pose, views, depths, sensor, K)
    assert len(out) == 7
    for rv in out:
        assert isinstance(rv, PairRevisions)
        assert not np.any(rv.forward_revision) and not np.any(rv.backward_revision)
        assert set(np.unique(rv.forward_weight)) <= {0.0, 1.0}


def test_oracle_revisions_reproduce_true_field():
    scene, K, views, depths, sensor = _oracle_setup()
    G_cur = perturb_pose(scene.pose, 10, 0.03, np.random.default_rng(0))
    out = oracle_revisions(scene.pose, G_cur, views, depths, sensor, K)
    for Gi, Di, rv in zip(views, depths, out):
        cur = induce_correspondence(Gi, G_cur, Di, K)
        tru = induce_correspondence(Gi, scene.pose, Di, K)
        rev = apply_revisions(cur, rv.forward_revision)
        m = rev.mask
        assert np.array_equal(m, cur.mask & tru.mask)
        assert np.max(np.abs(rev.coords[m] - tru.coords[m])) < 1e-14


def test_oracle_is_seed_deterministic():
    scene, K, views, depths, sensor = _oracle_setup()
    G_cur = perturb_pose(scene.pose, 10, 0.03, np.random.default_rng(0))
    run = lambda: oracle_revisions(scene.pose, G_cur, views, depths, sensor, K, 2.0, 0.2, 9, 0.05, 1.0)
    a, b = run(), run()
    for x, y in zip(a, b):
        for u, v in zip(x, y):
            assert np.array_equal(u, v)
    w = np.concatenate([rv.forward_weight.ravel() for rv in a])
    assert np.any(w == 0.05) and w.max() <= 1.0


def test_oracle_argument_checks():
    scene, K, views, depths, sensor = _oracle_setup()
    for kw in ({"noise": -1}, {"outlier_rate": 1.5}, {"outlier_weight": 2.0}):
        with pytest.raises(ValueError):
            oracle_revisions(scene.pose, scene.pose, views, depths, sensor, K, **kw)


# ------------------------------------------------------------------ loop


def test_refine_oracle_converges_from_fifteen_degrees():
    scene = synthetic_scene(21)
    G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(8))
    G, trace = refine_pose(scene, G0, OracleProvider(scene.pose), FAST)
    rot, trans = pose_errors(G, scene.pose)
    assert rot < 1e-5 and trans < 1e-6
    assert len(trace) == 3
    assert trace[0]["outer_start"] and not trace[1]["outer_start"]


def test_refine_no_change_at_truth():
    scene = synthetic_scene(22)
    G, _ = refine_pose(scene, scene.pose, ZeroProvider(), RefinementConfig(inner=2, gn_iters=3))
    assert G.allclose(scene.pose, atol=1e-10)


def test_refine_error_non_increasing_across_inner_iterations():
    good = 0
    n = 10
    for s in range(n):
        scene = synthetic_scene(300 + s)
        G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(s))
        _, trace = refine_pose(scene, G0, OracleProvider(scene.pose), RefinementConfig(inner=3, gn_iters=3, correlation=False))
        errs = [rec["rot_err"] for rec in trace]
        good += all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert good >= 0.95 * n


def test_refine_is_deterministic():
    scene = synthetic_scene(23)
    G0 = perturb_pose(scene.pose, 15.0, 0.05, np.random.default_rng(1))
    cfg = RefinementConfig(inner=2, gn_iters=3)
    run = lambda: refine_pose(scene, G0, OracleProvider(scene.pose, 2.0, 0.2, seed=4, outlier_weight=0.05), cfg)[1]
    assert trace_to_jsonl(run(), 3) == trace_to_jsonl(run(), 3)


def test_provider_sees_documented_inputs():
    seen = []

    class Spy(ZeroProvider):
        def reset(self, outer):
            seen.append(("reset", outer))

        def __call__(self, inputs):
            seen.append((inputs.outer, inputs.inner, len(inputs.fields), inputs.correlation[0][0].shape))
            return super().__call__(inputs)

    scene = synthetic_scene(24)
    refine_pose(scene, scene.pose, Spy(), RefinementConfig(inner=2, outer=2, gn_iters=1, views=3, radius=1, levels=2))
    assert seen[0] == ("reset", 0) and seen[3] == ("reset", 1)
    assert seen[1][:3] == (0, 0, 3) and seen[5][:3] == (1, 1, 3)
    assert seen[1][3] == (30, 40, 2 * 9)


def test_bad_provider_output_is_rejected():
    class Bad(RevisionProvider):
        def __call__(self, inputs):
            return []

    scene = synthetic_scene(25)
    with pytest.raises(ValueError):
        refine_pose(scene, scene.pose, Bad(), FAST)


def test_total_mask_collapse_aborts():
    import dataclasses

    scene = synthetic_scene(26)
    blank = dataclasses.replace(scene, depth=np.zeros_like(scene.depth), empty=True)
    G_far = type(scene.pose)(scene.pose.rotation, scene.pose.translation + [5.0, 0.0, 0.0])
    with pytest.raises(RefinementError):
        refine_pose(blank, G_far, ZeroProvider(), FAST)


def test_config_validation_and_round_trip():
    cfg = RefinementConfig()
    assert (cfg.inner, cfg.outer, cfg.gn_iters) == (40, 1, 10)
    assert RefinementConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for kw in ({"inner": 0}, {"outer": 0}, {"angle": 0.0}, {"angle": 90.0}, {"views": 8}, {"mode": "ir"}, {"frame": "world"}):
        with pytest.raises(ValueError):
            RefinementConfig(**kw)
    assert RefinementConfig(mode=RGB, views=13).views == 13
    with pytest.raises(ValueError):
        RefinementConfig.from_dict({"inner_iters": 4})


def test_trace_jsonl():
    scene = synthetic_scene(27)
    _, trace = refine_pose(scene, scene.pose, OracleProvider(scene.pose), RefinementConfig(inner=2, gn_iters=2, correlation=False))
    lines = trace_to_jsonl(trace, 5).splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[1])
    assert rec["schema"] == TRACE_SCHEMA and rec["object"] == 5 and rec["inner"] == 1
    assert {"pose", "rot_err", "trans_err", "objective", "rows", "views"} <= set(rec)
