"""
A few training steps on a tiny model
====================================

Train a very small denoiser on four pairs, then sample a pose edit.  The
model is far too small and short-trained to edit well; this only shows the
moving parts.
"""

import numpy as np

from rigface_lab import attribprov, cli, diffusion, synthgen, trainloop
from rigface_lab.imageio import save_png

pairs = [synthgen.generate_pair(2, i, (32, 32)) for i in range(4)]
tiny = dict(base_channels=8, channel_multipliers=(1, 2), attention_levels=(1,), time_embed_dim=16,
            heads=2, context_dim=8, norm_groups=4)
config = trainloop.TrainConfig(steps=40, batch_size=2, learning_rate=1e-3, unet=tiny, checkpoint_every=0)

final, log = trainloop.run_training(config, "tiny_run", pairs=pairs)
losses = trainloop.read_losses(log)
print("loss, first 5 steps:", np.round(losses[:5], 3))
print("loss, last 5 steps: ", np.round(losses[-5:], 3))

model, _ = diffusion.load_checkpoint(final)
source = pairs[0]
request = attribprov.EditRequest("pose", source.source_params, {"pose": np.array([0.4, 0.0, 0.0])})
edited, conds = cli.run_edit(model, request, source.source_image, config.provider_config(), steps=20, seed=0)
save_png("tiny_edit.png", edited)
