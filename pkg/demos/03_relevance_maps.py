"""Where does the network look? LRP relevance on artefact images.

Run: python3 demos/03_relevance_maps.py
"""

import numpy as np

from oodgate.engine import TrainConfig, forward, lrp_relevance, tiny_conv, train
from oodgate.synth import SyntheticSpec, generate_dataset
from oodgate.tensor_io import Split

ds = generate_dataset(SyntheticSpec(train_per_class=80, id_test_per_class=5, ood_test_per_class=20))
_, x_tr, y_tr = ds.arrays(Split.TRAIN)
ids, x_ood, _ = ds.arrays(Split.OOD_TEST)
spec = tiny_conv()
params = train(spec, x_tr, y_tr, TrainConfig(lr=0.05, epochs=15, seed=1))

pred = forward(spec, params, x_ood).logits.argmax(1)
shares, areas = [], []
for sid, x, k in zip(ids, x_ood, pred):
    r = np.abs(lrp_relevance(spec, params, x, int(k)))
    mask = ds.masks[sid]
    shares.append(r[mask].sum() / r.sum())
    areas.append(mask.mean())
print(f"artefacts cover {np.mean(areas):.1%} of the image on average")
print(f"share of |relevance| on artefact pixels: mean {np.mean(shares):.1%}, max {np.max(shares):.1%}")
