"""Command-line entry points: make-scene, solve, refine, eval, gradcheck, bench.

Settings come from defaults, then a JSON or TOML ``--config`` file, then
flags; flags win.  Object ``k`` of a run uses seed ``seed + k`` for its
scene, initial perturbation and revision noise.  Every JSON artifact
carries a ``schema`` field.  Exit codes: 0 success, 1 invalid input,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .geometry import RigidTransform, pose_errors
from .gradcheck import run_gradcheck
from .metrics import RecallSpec, mspd, mssd, recall, vsd
from .refine import (
    OracleProvider,
    PairRevisions,
    RefinementConfig,
    RefinementError,
    RevisionProvider,
    refine_pose,
    single_solve,
    trace_to_jsonl,
)
from .scene import PlyError, load_model, load_scene, make_scene, perturb_pose, render_depth, save_scene, synthetic_scene, default_camera
from .solver import UnderdeterminedError

logger = logging.getLogger("cirpose")

SUBCOMMANDS = ("make-scene", "solve", "refine", "eval", "gradcheck", "bench")
GRADCHECK_LIMIT = 1e-3


class InputError(ValueError):
    """Invalid configuration or input files (exit code 1)."""


class NumericalFailure(RuntimeError):
    """Solver or check failed numerically (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    """Validated settings of one CLI run; unknown keys are rejected."""

    subcommand: str
    seed: int = 0
    out: str | None = None
    workers: int = 1
    verbose: bool = False
    # scenes
    scene: tuple = ()
    objects: int = 1
    width: int = 160
    height: int = 120
    # initial pose
    init: str | None = None
    init_angle: float = 15.0
    init_trans: float = 0.05
    # revisions
    noise: float = 0.0
    outliers: float = 0.0
    outlier_weight: float = 0.0
    view_noise_growth: float = 0.0
    revisions: str | None = None
    trace: bool = False
    # refinement loop
    inner: int = 40
    outer: int = 1
    gn_iters: int = 10
    views: int | None = None
    angle: float = 22.5
    mode: str = "rgbd"
    frame: str = "object"
    direction: str = "both"
    depth_augmented: bool = True
    uniform_confidence: bool = False
    correlation: bool = True
    discard_depth_update: bool = True
    sweep_angles: tuple = ()
    # eval
    pred: str | None = None
    gt: str | None = None
    model: str | None = None
    camera: str | None = None
    depth: str | None = None
    symmetries: str | None = None
    # gradcheck
    problems: int = 10
    pixels: int = 5
    fd_step: float = 1e-5
    # bench
    inner_grid: tuple = (10, 40)
    outer_grid: tuple = (1, 2)

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise InputError(f"unknown subcommand {self.subcommand!r}")
        for name in ("objects", "workers", "problems", "pixels", "width", "height"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.noise < 0 or not 0 <= self.outliers <= 1 or not 0 <= self.outlier_weight <= 1:
            raise InputError("noise must be >= 0; outliers and outlier_weight in [0, 1]")
        if any(int(v) < 1 for v in tuple(self.inner_grid) + tuple(self.outer_grid)):
            raise InputError("grid entries must be >= 1")
        if any(not 0 <= a < 180 for a in self.sweep_angles):
            raise InputError("sweep angles must be in [0, 180) degrees")
        try:
            self.refinement()
        except ValueError as exc:
            raise InputError(str(exc)) from exc

    def refinement(self):
        return RefinementConfig(
            inner=self.inner,
            outer=self.outer,
            gn_iters=self.gn_iters,
            views=self.views,
            angle=self.angle,
            mode=self.mode,
            frame=self.frame,
            direction=self.direction,
            depth_augmented=self.depth_augmented,
            uniform_confidence=self.uniform_confidence,
            correlation=self.correlation,
            discard_depth_update=self.discard_depth_update,
        )

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def load_config_file(path):
    """Flat mapping from a ``.toml`` or ``.json`` file; dashes in keys become underscores."""
    try:
        if path.endswith(".toml"):
            import tomli

            with open(path, "rb") as f:
                data = tomli.load(f)
        else:
            with open(path) as f:
                data = json.load(f)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError("config file must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


# ------------------------------------------------------------------ parsing


def _csv_ints(text):
    return tuple(int(v) for v in text.split(","))


def _csv_floats(text):
    return tuple(float(v) for v in text.split(","))


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(prog="cirpose", description="Pose refinement with a bidirectional PnP solver.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML file of settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="objects processed concurrently")
    common.add_argument("-v", "--verbose", action="store_const", const=True)

    scenes = argparse.ArgumentParser(add_help=False)
    scenes.add_argument("--scene", action="append", help="scene bundle directory (repeatable)")
    scenes.add_argument("--objects", type=int, help="number of synthetic objects when no --scene is given")
    scenes.add_argument("--width", type=int, help="synthetic image width in pixels")
    scenes.add_argument("--height", type=int, help="synthetic image height in pixels")
    scenes.add_argument("--init", help="JSON list of initial 4x4 poses, one per object")
    scenes.add_argument("--init-angle", type=float, help="initial rotation error in degrees")
    scenes.add_argument("--init-trans", type=float, help="initial translation error in metres")
    scenes.add_argument("--noise", type=float, help="revision noise in field-grid pixels")
    scenes.add_argument("--outliers", type=float, help="fraction of pixels with random targets")
    scenes.add_argument("--outlier-weight", type=float, help="confidence given to outlier pixels")
    scenes.add_argument("--view-noise-growth", type=float, help="noise growth with render-pose distance")
    scenes.add_argument("--gn-iters", "--iters", dest="gn_iters", type=int, help="Gauss-Newton iterations per solve")
    scenes.add_argument("--views", type=int, help="render views per outer loop")
    scenes.add_argument("--angle", type=float, help="render-view perturbation in degrees")
    scenes.add_argument("--mode", choices=("rgbd", "rgb"))
    scenes.add_argument("--frame", choices=("object", "camera"))
    scenes.add_argument("--direction", choices=("both", "forward", "backward"))
    scenes.add_argument("--depth-augmented", type=_bool)
    scenes.add_argument("--uniform-confidence", type=_bool)
    scenes.add_argument("--correlation", type=_bool, help="compute correlation features for the provider")
    scenes.add_argument("--discard-depth-update", type=_bool)

    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("make-scene", parents=[common], help="write synthetic scene bundles")
    p.add_argument("--objects", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--model", help="PLY model to use instead of a random blob")

    p = sub.add_parser("solve", parents=[common, scenes], help="one BD-PnP solve per object")
    p.add_argument("--revisions", help=".npz of forward/backward revisions and weights")
    p.add_argument("--trace", action="store_const", const=True, help="write the per-iteration solver trace")

    p = sub.add_parser("refine", parents=[common, scenes], help="coupled inner/outer refinement")
    p.add_argument("--inner", type=int)
    p.add_argument("--outer", type=int)
    p.add_argument("--sweep-angles", type=_csv_floats, help="comma-separated initial rotation errors to sweep")

    p = sub.add_parser("eval", parents=[common], help="MSSD / MSPD / VSD recall of predicted poses")
    p.add_argument("--pred", help="JSON predicted poses")
    p.add_argument("--gt", help="JSON ground-truth poses")
    p.add_argument("--scene", action="append", help="scene bundle supplying model, camera, depth and ground truth")
    p.add_argument("--model", help="PLY model")
    p.add_argument("--camera", help="camera JSON")
    p.add_argument("--depth", help="float32 sensor depth; ground-truth render when absent")
    p.add_argument("--symmetries", help="JSON list of 4x4 symmetry transforms")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the solver gradients")
    p.add_argument("--problems", type=int)
    p.add_argument("--pixels", type=int)
    p.add_argument("--gn-iters", "--iters", dest="gn_iters", type=int)
    p.add_argument("--fd-step", type=float)

    p = sub.add_parser("bench", parents=[common, scenes], help="accuracy and runtime over inner/outer grids")
    p.add_argument("--inner-grid", type=_csv_ints)
    p.add_argument("--outer-grid", type=_csv_ints)
    return parser


def resolve_config(argv):
    """Parse flags, merge them over the config file, validate; raises :class:`InputError`."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            raise
        raise InputError("invalid command line") from exc
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    for k, v in vars(args).items():
        if k in ("config", "subcommand") or v is None:
            continue
        values[k] = v
    values["subcommand"] = args.subcommand
    if "scene" in values and isinstance(values["scene"], str):
        values["scene"] = [values["scene"]]
    if "gn_iters" in values and int(values["gn_iters"]) < 1:
        raise InputError("--iters / --gn-iters must be >= 1")
    try:
        return RunConfig.from_dict(values)
    except TypeError as exc:
        raise InputError(str(exc)) from exc


# ------------------------------------------------------------------ helpers


def _out_dir(cfg):
    out = cfg.out or os.path.join("runs", cfg.subcommand)
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_poses(path):
    try:
        with open(path) as f:
            data = json.load(f)
        if isinstance(data, dict):
            # refine writes "poses"; solve writes per-object records
            data = data["poses"] if "poses" in data else [o["pose"] for o in data["objects"]]
        return [RigidTransform.from_list(m) for m in data]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot read poses from {path}: {exc}") from exc


def object_seed(root, k):
    return root + k


def _load_objects(cfg):
    """``(scene, G_init, seed)`` per object."""
    if cfg.scene:
        try:
            scenes = [load_scene(d) for d in cfg.scene]
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot load scene: {exc}") from exc
    else:
        K = default_camera(cfg.width, cfg.height)
        scenes = [synthetic_scene(object_seed(cfg.seed, k), K) for k in range(cfg.objects)]
    inits = _read_poses(cfg.init) if cfg.init else None
    if inits is not None and len(inits) != len(scenes):
        raise InputError(f"{len(inits)} initial poses for {len(scenes)} objects")
    out = []
    for k, sc in enumerate(scenes):
        s = object_seed(cfg.seed, k)
        if sc.empty:
            raise InputError(f"object {k}: scene depth is empty")
        G0 = inits[k] if inits else perturb_pose(sc.pose, cfg.init_angle, cfg.init_trans, np.random.default_rng([s, 1]))
        out.append((sc, G0, s))
    return out


def _provider(cfg, scene, seed):
    if cfg.revisions:
        return FileProvider(cfg.revisions)
    return OracleProvider(
        scene.pose, cfg.noise, cfg.outliers, np.random.default_rng([seed, 2]), cfg.outlier_weight, cfg.view_noise_growth
    )


class FileProvider(RevisionProvider):
    """Fixed revisions read from an ``.npz`` with ``(views, H, W, 3)`` arrays.

    Keys: ``forward_revision``, ``forward_weight``, ``backward_revision``,
    ``backward_weight``.
    """

    KEYS = ("forward_revision", "forward_weight", "backward_revision", "backward_weight")

    def __init__(self, path):
        try:
            with np.load(path) as data:
                self.arrays = [np.asarray(data[k], dtype=float) for k in self.KEYS]
        except (OSError, KeyError, ValueError) as exc:
            raise InputError(f"cannot read revisions from {path}: {exc}") from exc

    def __call__(self, inputs):
        n = len(inputs.fields)
        if any(len(a) != n for a in self.arrays):
            raise InputError(f"revision file holds {len(self.arrays[0])} views, run uses {n}")
        return [PairRevisions(*(a[k] for a in self.arrays)) for k in range(n)]


def _map(cfg, fn, items):
    # results come back in input order; the caller writes them serially
    if cfg.workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, items))


# -------------------------------------------------------------- subcommands


def cmd_make_scene(cfg):
    out = _out_dir(cfg)
    K = default_camera(cfg.width, cfg.height)
    model = None
    if cfg.model:
        try:
            model = load_model(cfg.model, symmetries=cfg.symmetries)
        except (OSError, PlyError, ValueError) as exc:
            raise InputError(str(exc)) from exc
    dirs = []
    for k in range(cfg.objects):
        sc = synthetic_scene(object_seed(cfg.seed, k), K, model)
        d = os.path.join(out, f"scene_{k:03d}")
        save_scene(sc, d)
        dirs.append(d)
    names = [os.path.basename(d) for d in dirs]
    _write_json(os.path.join(out, "scenes.json"), {"schema": "cirpose/scenes/v1", "seed": cfg.seed, "scenes": names})
    print("\n".join(dirs))
    return 0


def cmd_solve(cfg):
    out = _out_dir(cfg)
    rcfg = replace(cfg.refinement(), inner=1, outer=1)
    objects = _load_objects(cfg)

    def job(item):
        sc, G0, s = item
        G, st, p = single_solve(sc, G0, _provider(cfg, sc, s), rcfg)
        return G, st, p

    results = _map(cfg, job, objects)
    records, failed = [], False
    for k, ((sc, G0, _), (G, st, p)) in enumerate(zip(objects, results)):
        rot, trans = pose_errors(G, sc.pose)
        failed |= st.rank_deficient
        records.append(
            {
                "object": k,
                "pose": G.to_list(),
                "initial_pose": G0.to_list(),
                "rot_err": rot,
                "trans_err": trans,
                "objective": st.objectives[-1],
                "rows": p.effective_rows(),
                "rank_deficient": st.rank_deficient,
                "clamped_weights": p.clamped,
            }
        )
        print(f"object {k}: rotation error {rot:.3e} rad, translation error {trans:.3e} m")
    _write_json(
        os.path.join(out, "poses.json"),
        {"schema": "cirpose/solve/v1", "solver": rcfg.solver_options().to_dict(), "objects": records},
    )
    if cfg.trace:
        _write_json(
            os.path.join(out, "trace.json"),
            {"schema": "cirpose/solve-trace/v1", "objects": [st.to_dict() for _, st, _ in results]},
        )
    if failed:
        logger.error("rank-deficient normal equations without recovery")
        return 2
    return 0


def _refine_all(cfg, rcfg, objects):
    def job(item):
        sc, G0, s = item
        return refine_pose(sc, G0, _provider(cfg, sc, s), rcfg)

    return _map(cfg, job, objects)


def _final_summary(objects, results):
    rot = [pose_errors(G, sc.pose)[0] for (sc, _, _), (G, _) in zip(objects, results)]
    trans = [pose_errors(G, sc.pose)[1] for (sc, _, _), (G, _) in zip(objects, results)]
    errs = [mssd(G, sc.pose, sc.model) for (sc, _, _), (G, _) in zip(objects, results)]
    diam = [sc.model.diameter for sc, _, _ in objects]
    rec = float(np.mean([recall([e], RecallSpec.mssd(d)) for e, d in zip(errs, diam)]))
    return {
        "median_rot_err": float(np.median(rot)),
        "median_trans_err": float(np.median(trans)),
        "median_mssd": float(np.median(errs)),
        "mssd_recall": rec,
    }


def cmd_refine(cfg):
    out = _out_dir(cfg)
    rcfg = cfg.refinement()
    objects = _load_objects(cfg)
    results = _refine_all(cfg, rcfg, objects)
    with open(os.path.join(out, "trace.jsonl"), "w") as f:
        for k, (_, tr) in enumerate(results):
            f.write(trace_to_jsonl(tr, k))
    summary = _final_summary(objects, results)
    _write_json(
        os.path.join(out, "poses.json"),
        {
            "schema": "cirpose/refine/v1",
            "config": rcfg.to_dict(),
            "poses": [G.to_list() for G, _ in results],
            "summary": summary,
        },
    )
    print(f"{len(objects)} objects: median rotation error {summary['median_rot_err']:.3e} rad")
    if cfg.sweep_angles:
        rows = []
        for a in cfg.sweep_angles:
            objs = [(sc, perturb_pose(sc.pose, a, cfg.init_trans, np.random.default_rng([s, 3])), s) for sc, _, s in objects]
            row = {"init_angle": a, **_final_summary(objs, _refine_all(cfg, rcfg, objs))}
            rows.append(row)
            print(f"sweep {a:6.2f} deg: median rotation error {row['median_rot_err']:.3e} rad")
        _write_json(os.path.join(out, "sweep.json"), {"schema": "cirpose/sweep/v1", "rows": rows})
    return 0


def _eval_inputs(cfg):
    if cfg.scene:
        if len(cfg.scene) != 1:
            raise InputError("eval takes a single --scene")
        try:
            sc = load_scene(cfg.scene[0])
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot load scene: {exc}") from exc
        gt = _read_poses(cfg.gt) if cfg.gt else [sc.pose]
        return sc.model, sc.K, sc.depth, gt
    if not (cfg.model and cfg.camera and cfg.gt):
        raise InputError("eval needs --scene or all of --model, --camera and --gt")
    from .geometry import Intrinsics

    try:
        if cfg.symmetries is None and not os.path.exists(os.path.join(os.path.dirname(cfg.model) or ".", "symmetries.json")):
            logger.warning("no symmetry file; assuming the object has no symmetries")
        model = load_model(cfg.model, symmetries=cfg.symmetries)
        with open(cfg.camera) as f:
            K = Intrinsics.from_dict(json.load(f))
        depth = None
        if cfg.depth:
            raw = np.fromfile(cfg.depth, dtype="<f4")
            if raw.size != K.width * K.height:
                raise InputError(f"depth file has {raw.size} values, expected {K.width * K.height}")
            depth = raw.reshape(K.height, K.width).astype(float)
    except (OSError, PlyError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from exc
    return model, K, depth, _read_poses(cfg.gt)


def evaluate_poses(pred, gt, model, K, sensor=None):
    """Per-object errors and the recall summary.

    ``sensor`` is the observed depth for VSD; without it each ground-truth
    render stands in for the sensor.
    """
    if len(pred) != len(gt):
        raise InputError(f"{len(pred)} predictions for {len(gt)} ground-truth poses")
    spec_mssd = RecallSpec.mssd(model.diameter)
    spec_mspd = RecallSpec.mspd(K.width)
    spec_vsd = RecallSpec.vsd(model.diameter)
    rows, e_mssd, e_mspd, e_vsd = [], [], [], []
    for k, (P, Q) in enumerate(zip(pred, gt)):
        D_hat = render_depth(model, P, K)
        D_bar = render_depth(model, Q, K)
        D_sensor = D_bar if sensor is None else sensor
        v = [vsd(D_hat, D_bar, D_sensor, tau) for tau in spec_vsd.taus]
        try:
            p_err = mspd(P, Q, model, K)
        except ValueError:
            p_err = float("inf")
        rows.append({"object": k, "mssd": mssd(P, Q, model), "mspd": p_err, "vsd": v})
        e_mssd.append(rows[-1]["mssd"])
        e_mspd.append(p_err)
        e_vsd.append(v)
    r = {"MSSD": recall(e_mssd, spec_mssd), "MSPD": recall(e_mspd, spec_mspd), "VSD": recall(e_vsd, spec_vsd)}
    r["Avg"] = (r["MSSD"] + r["MSPD"] + r["VSD"]) / 3.0
    return rows, r, spec_vsd.taus


def cmd_eval(cfg):
    if not cfg.pred:
        raise InputError("eval needs --pred")
    out = _out_dir(cfg)
    model, K, sensor, gt = _eval_inputs(cfg)
    pred = _read_poses(cfg.pred)
    rows, r, taus = evaluate_poses(pred, gt, model, K, sensor)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["object", "mssd_m", "mspd_px"] + [f"vsd_tau_{t * 1000:.1f}mm" for t in taus])
    for row in rows:
        w.writerow([row["object"], repr(row["mssd"]), repr(row["mspd"])] + [repr(v) for v in row["vsd"]])
    with open(os.path.join(out, "metrics.csv"), "w") as f:
        f.write(buf.getvalue())
    _write_json(os.path.join(out, "summary.json"), {"schema": "cirpose/eval/v1", "objects": len(rows), **r})
    print("Avg    MSPD   VSD    MSSD")
    print(f"{r['Avg']:.3f}  {r['MSPD']:.3f}  {r['VSD']:.3f}  {r['MSSD']:.3f}")
    return 0


def cmd_gradcheck(cfg):
    out = _out_dir(cfg)
    res = run_gradcheck(cfg.problems, cfg.pixels, cfg.gn_iters, cfg.seed, cfg.fd_step)
    passed = res.max_rel_error < GRADCHECK_LIMIT
    report = {"schema": "cirpose/gradcheck/v1", "seed": cfg.seed, "limit": GRADCHECK_LIMIT, "passed": passed, **res.to_dict()}
    _write_json(os.path.join(out, "gradcheck.json"), report)
    print(f"problems={res.problems} pixels={res.pixels} gn_iters={res.gn_iters}")
    print(f"max relative error, revisions: {res.max_rel_error_revisions:.3e}")
    print(f"max relative error, weights:   {res.max_rel_error_weights:.3e}")
    print("PASS" if passed else "FAIL")
    return 0 if passed else 2


def cmd_bench(cfg):
    out = _out_dir(cfg)
    objects = _load_objects(cfg)
    rows, timing = [], []
    for outer in cfg.outer_grid:
        for inner in cfg.inner_grid:
            rcfg = replace(cfg.refinement(), inner=int(inner), outer=int(outer))
            walls, results = [], []
            for item in objects:
                t0 = time.perf_counter()
                results.extend(_refine_all(replace(cfg, workers=1), rcfg, [item]))
                walls.append(time.perf_counter() - t0)
            rows.append({"inner": int(inner), "outer": int(outer), **_final_summary(objects, results)})
            timing.append({"inner": int(inner), "outer": int(outer), "median_wall_s": float(np.median(walls))})
            print(
                f"outer={outer} inner={inner:3d}  median rot err {rows[-1]['median_rot_err']:.3e} rad"
                f"  median wall {timing[-1]['median_wall_s']:.2f} s/object"
            )
    # wall times go to their own file so bench.json stays reproducible
    _write_json(os.path.join(out, "bench.json"), {"schema": "cirpose/bench/v1", "objects": len(objects), "rows": rows})
    _write_json(os.path.join(out, "timing.json"), {"schema": "cirpose/bench-timing/v1", "rows": timing})
    return 0


COMMANDS = {
    "make-scene": cmd_make_scene,
    "solve": cmd_solve,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = resolve_config(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if cfg.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[cfg.subcommand](cfg)
    except (RefinementError, UnderdeterminedError, NumericalFailure, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (InputError, PlyError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
