"""
Rendering a face and fitting it back
====================================

Draw a random face, render it, then recover its pose from pixels alone.
"""

import numpy as np

from rigface_lab import face3d, synthgen
from rigface_lab.imageio import save_png

rng = synthgen.pair_rng(0, 3)
shape, albedo = synthgen.sample_identity(rng)
expr, pose, light = synthgen.sample_attributes(rng)
params = face3d.FaceParams(shape, albedo, expr, pose, light)

out = face3d.render(params, (64, 64))
print("foreground pixels:", int(out.mask.sum()))
save_png("face.png", out.image)

# The fit starts from a frontal pose and only moves the pose group.
fit = face3d.fit_params(out.image, params.replace(pose=np.zeros(3)), {"pose"}, budget=1500)
print("true pose:  ", np.round(pose, 3))
print("fitted pose:", np.round(fit.pose, 3))

# With only the band-0 light on, every face pixel has the same value.
flat = face3d.render(params.replace(light=np.eye(9)[0], albedo=np.full(3, 0.5)), (64, 64))
print("flat shading value:", flat.image[flat.mask].max(), "expected", 0.5 / (2 * np.sqrt(np.pi)))
