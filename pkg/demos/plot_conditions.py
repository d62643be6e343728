"""
The three conditions of an edit
===============================

A training pair, and the rendering, background and expression conditions
built from it.  Lighting and expression edits touch disjoint conditions.
"""

import numpy as np

from rigface_lab import attribprov, synthgen
from rigface_lab.ablation import contact_sheet
from rigface_lab.imageio import save_png

pair = synthgen.generate_pair(seed=1, index=0, size=(64, 64))
conds = attribprov.build_conditions(pair)
print("expression condition:", np.round(conds.expr, 2))
print("filled pixels:", int(conds.fill_mask.sum()))

save_png("conditions.png", contact_sheet([[pair.source_image, pair.target_image,
                                           conds.rendering, conds.background]]))

# Relighting: new light, same background and expression.
_, _, new_light = synthgen.sample_attributes(np.random.default_rng(5))
req = attribprov.EditRequest("lighting", pair.source_params, {"light": new_light})
relit = attribprov.build_conditions(req, "lighting", pair.source_image)
same = attribprov.build_conditions(
    attribprov.EditRequest("lighting", pair.source_params, {"light": pair.source_params.light}),
    "lighting", pair.source_image)
print("background unchanged:", relit.background.tobytes() == same.background.tobytes())
print("expression unchanged:", relit.expr.tobytes() == same.expr.tobytes())
