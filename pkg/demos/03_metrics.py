# %% [markdown]
# # Scoring poses
#
# A box with three 180 degree symmetries: flipping the prediction about one
# of them costs nothing, a small translation costs exactly its length.

# %%
import numpy as np

from cirpose import RecallSpec, RigidTransform, mspd, mssd, recall, render_depth, rotation_about_axis, vsd
from cirpose.scene import default_camera, make_box, random_object_pose

box = make_box(with_symmetries=True)
K = default_camera()
G = random_object_pose(0)
flip = G @ RigidTransform(rotation_about_axis([0, 0, 1], np.pi), np.zeros(3))
shift = RigidTransform(G.rotation, G.translation + [0.004, 0.0, 0.003])

for name, P in [("flipped", flip), ("shifted 5 mm", shift)]:
    print(f"{name:13s} MSSD {mssd(P, G, box) * 1000:.3f} mm   MSPD {mspd(P, G, box, K):.3f} px")

# %% [markdown]
# VSD compares the two renders on their visible pixels; recall counts how
# many of the ten thresholds each error clears.

# %%
D_gt = render_depth(box, G, K)
D_shift = render_depth(box, shift, K)
spec = RecallSpec.vsd(box.diameter)
errors = [vsd(D_shift, D_gt, D_gt, tau) for tau in spec.taus]
print("VSD per tolerance:", np.round(errors, 3))
print("VSD recall:", recall([errors], spec))
print("MSSD recall:", recall([mssd(shift, G, box)], RecallSpec.mssd(box.diameter)))
