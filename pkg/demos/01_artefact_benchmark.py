"""Build the synthetic benchmark and look at what an artefact does to an image.

Run: python3 demos/01_artefact_benchmark.py
"""

import numpy as np

from oodgate.synth import SyntheticSpec, feather_band, generate_dataset
from oodgate.tensor_io import Split

spec = SyntheticSpec(train_per_class=20, id_test_per_class=10, ood_test_per_class=10, counterfactual="interpolated")
ds = generate_dataset(spec)

for split in Split:
    labels = [r.label for r in ds.manifest.split(split)]
    print(f"{split.value:9s} {len(labels):4d} images, class counts {np.bincount(labels).tolist()}")

# the OOD split leans towards class 0 (rho = 0.8), so the artefact correlates with a label
rec = ds.manifest.split(Split.OOD_TEST)[0]
img, cf, mask = ds.images[rec.sample_id], ds.images[rec.counterfactual_id], ds.masks[rec.sample_id]
band = feather_band(mask, spec.feather_sigma)
print(f"\n{rec.sample_id}: {int(mask.sum())} artefact pixels, {int(band.sum())} inside mask + feather band")
print(f"pixels changed by removal: {int((img != cf).sum())}, all inside the band: {bool(((img != cf)[:, :, 0] <= band).all())}")


def show(a):
    ramp = " .:-=+*#%@"
    for row in a[:, :, 0]:
        print("".join(ramp[min(int(v * len(ramp)), len(ramp) - 1)] for v in row))


print("\nwith artefact:")
show(img)
print("\ncounterfactual (intra-image interpolation):")
show(cf)
