"""
The synthetic moving-shapes corpus
==================================

Every class is a rendered clip of coloured shapes. Appearance classes differ
in shape and colour, trajectory classes in direction of motion, and the compositional
classes only by what the clip contains over time.
"""

import matplotlib.pyplot as plt
import numpy as np

from vidclip.videogen import default_roster, generate, segment_indices

roster = default_roster()
for family in ("appearance", "trajectory", "compositional"):
    print(family, [c.name for c in roster if c.family == family])

###############################################################################
# One sample per family. Eight evenly spaced frames, as used at evaluation.

picks = [next(c for c in roster if c.family == f) for f in ("appearance", "trajectory", "compositional")]
fig, axes = plt.subplots(len(picks), 8, figsize=(12, 5))
for row, spec in zip(axes, picks):
    video = generate(spec, sample_seed=0).frames
    for ax, t in zip(row, segment_indices(len(video), 8)):
        ax.imshow(np.clip(video[t], 0, 1))
        ax.set_axis_off()
    row[0].set_title(spec.name, loc="left", fontsize=9)
plt.tight_layout()
plt.show()
