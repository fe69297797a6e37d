"""Train one small model and compare a confidence score with a feature score.

The artefact is far from the class signal, so the classifier often stays
confident on artefact images while the early-layer feature statistics shift.
Run: python3 demos/02_confidence_vs_feature.py
"""

import numpy as np

from oodgate.confidence import score_mcp
from oodgate.engine import TINYCONV_EARLY_LAYER, TrainConfig, extract_feature_vector, forward, tiny_conv, train
from oodgate.evaluation import auroc, categorise, percentile_threshold
from oodgate.feature import fit_class_gaussians, score_mahalanobis
from oodgate.synth import SyntheticSpec, generate_dataset
from oodgate.tensor_io import Split

ds = generate_dataset(SyntheticSpec(train_per_class=100, id_test_per_class=50, ood_test_per_class=50))
_, x_tr, y_tr = ds.arrays(Split.TRAIN)
_, x_id, y_id = ds.arrays(Split.ID_TEST)
ood_ids, x_ood, y_ood = ds.arrays(Split.OOD_TEST)
_, x_cf = ds.counterfactuals()

spec = tiny_conv()
params = train(spec, x_tr, y_tr, TrainConfig(lr=0.05, epochs=20, batch_size=32, seed=0))


def run(x):
    tr = forward(spec, params, x)
    return tr, extract_feature_vector(tr, TINYCONV_EARLY_LAYER)


tr_train, f_train = run(x_tr)
tr_id, f_id = run(x_id)
tr_ood, f_ood = run(x_ood)
stats = fit_class_gaussians(f_train, y_tr)

scores = {
    "MCP": (score_mcp(tr_id.logits), score_mcp(tr_ood.logits)),
    "Mahalanobis": (score_mahalanobis(f_id, stats), score_mahalanobis(f_ood, stats)),
}
for name, (s_id, s_ood) in scores.items():
    print(f"{name:12s} AUROC_OOD {auroc(s_id, s_ood):.3f}")

pred_ood = tr_ood.logits.argmax(1)
pred_cf = forward(spec, params, x_cf).logits.argmax(1)
cats = [categorise(a, b, y).value for a, b, y in zip(pred_ood, pred_cf, y_ood)]
print("\nartefact impact:", {c: cats.count(c) for c in sorted(set(cats))})

# a gate keeps predictions scoring at least the 75th percentile of held-out ID scores
for name, (s_id, s_ood) in scores.items():
    lam = percentile_threshold(s_id, 75)
    print(f"{name:12s} gate keeps {np.mean(s_id >= lam):.0%} of ID and {np.mean(s_ood >= lam):.0%} of OOD")
