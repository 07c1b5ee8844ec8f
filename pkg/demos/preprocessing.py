"""
From raw frames to model input
==============================

Render one synthetic walker, then show what size alignment and flow masking
do to a frame before it reaches the network.
"""

import numpy as np

from gaitfusion.data import SynthSpec, flow_mask_preprocess, size_align
from gaitfusion.data.synth import canonical, identity_params, render_flow, render_labels, sequence_placements


def show(mask, step=2):
    # coarse ASCII view, every other row and column
    for row in mask[::step, ::step]:
        print("".join("#" if v else "." for v in row))


spec = SynthSpec(num_ids=4, seqs_per_id=1, frames=12).validate()
rng = np.random.default_rng(0)
walkers = identity_params(spec, rng)
walker = walkers[0]
place = sequence_placements(spec, rng)[0]

labels = render_labels(walker, place, 3.0, "NM", (spec.height, spec.width))
sil = (labels > 0).astype(np.uint8)
print("raw silhouette, rows", np.flatnonzero(sil.any(1))[[0, -1]], "of", sil.shape[0])
show(sil)

# crop to the body, scale to 64 rows, put the centre of gravity on column 22
aligned = size_align(np.stack([sil, labels.astype(np.uint8)]), sil)
print("\naligned silhouette: rows 0 and 63 touch the body:", aligned[0, 0].any(), aligned[0, 63].any())
show(aligned[0])
print("part labels survive the same transform:", np.unique(aligned[1]).tolist())

# flow is drawn on a mid-sized body moving with each walker's gait, so it
# spills past (or falls short of) the real outline; masking removes the spill
print()
for i, w in enumerate(walkers):
    body = render_labels(w, place, 3.0, "NM", (spec.height, spec.width)) > 0
    flow = render_flow(canonical(w, spec), place, 3.0, (spec.height, spec.width)).transpose(2, 0, 1)
    masked = flow_mask_preprocess(flow, body)
    print(f"walker {i}: flow pixels outside the silhouette {(flow.any(0) & ~body).sum():3d} before masking, "
          f"{(masked.any(0) & ~body).sum()} after")
