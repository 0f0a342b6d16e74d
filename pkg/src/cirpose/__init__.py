"""Object pose refinement with a bidirectional, depth-augmented PnP solver.

Submodules:

- ``geometry``: SE3 maps, depth-augmented projection, correspondence fields
- ``correlation``: all-pairs correlation pyramids and windowed lookup
- ``solver``: weighted Gauss-Newton pose solve and its reverse pass
- ``refine``: render views, revision providers and the inner/outer loop
- ``scene``: PLY models, depth rendering, synthetic scenes
- ``metrics``: MSSD, MSPD, VSD, recall and training losses
"""

from .correlation import CorrelationPyramid, build_correlation, lookup
from .geometry import (
    CorrespondenceField,
    Intrinsics,
    RigidTransform,
    backproject,
    induce_correspondence,
    pose_errors,
    project,
    retract,
    rotation_about_axis,
    se3_exp,
    se3_log,
)
from .metrics import RecallSpec, flow_loss, mspd, mssd, pose_loss, recall, vsd
from .refine import (
    OracleProvider,
    RefinementConfig,
    RevisionProvider,
    depth_residuals,
    oracle_revisions,
    perturbed_view_poses,
    refine_pose,
    single_solve,
    solver_residual_features,
)
from .scene import (
    ObjectModel,
    Scene,
    load_model,
    load_scene,
    make_scene,
    perturb_pose,
    render_depth,
    save_scene,
    synthetic_scene,
)
from .solver import BdpnpProblem, Observation, SolverOptions, solve, solve_rgb, solver_vjp

__version__ = "0.1.0"
