import itertools
import json
import math

import numpy as np
import pytest

from oodgate.errors import EmptyClassOfScores, EmptyScores, SeedCountMismatch
from oodgate.evaluation import (
    DEFAULT_GATES,
    EvalReport,
    GateConfig,
    GateSpec,
    ImpactCategory,
    LabelledScores,
    apply_gate,
    auroc,
    auroc_f,
    auroc_ood,
    build_report,
    categorise,
    derive_gate,
    dual_gate,
    gate_mask,
    gate_summary,
    impact_categories,
    percentile_threshold,
    render_table,
)
from oodgate.tensor_io import ScoreTable

from helpers import auroc_pairs


def make_table(rng, n_id=40, n_ood=30, k=3, with_twins=True, methods=("mcp", "mahalanobis")):
    ids, variants, domains, y, pred = [], [], [], [], []
    for i in range(n_id):
        ids.append(f"id{i:03d}"); variants.append("original"); domains.append("ID")
        y.append(rng.integers(k)); pred.append(y[-1] if rng.uniform() < 0.8 else rng.integers(k))
    for i in range(n_ood):
        ids.append(f"ood{i:03d}"); variants.append("original"); domains.append("OOD")
        y.append(rng.integers(k)); pred.append(rng.integers(k))
        if with_twins:
            ids.append(f"ood{i:03d}"); variants.append("counterfactual"); domains.append("OOD")
            y.append(y[-1]); pred.append(rng.integers(k))
    scores = {m: rng.standard_normal(len(ids)) + np.array([d == "ID" for d in domains]) for m in methods}
    return ScoreTable(ids, variants, domains, y, pred, scores)


# --- AUROC ----------------------------------------------------------------


def test_auroc_examples(rng):
    assert auroc([3, 4, 5], [0, 1, 2]) == 1.0
    assert auroc([1, 1], [1, 1]) == 0.5
    assert auroc([2, 1], [1]) == 0.75
    a = rng.standard_normal(1000)
    b = rng.standard_normal(1000)
    assert abs(auroc(a, b) - 0.5) < 0.05


def test_auroc_matches_pair_enumeration(rng):
    for _ in range(300):
        n1, n2 = rng.integers(1, 11, 2)
        pos = rng.integers(0, 5, n1).astype(float)
        neg = rng.integers(0, 5, n2).astype(float)
        assert auroc(pos, neg) == auroc_pairs(pos, neg)
        assert auroc(pos, neg) + auroc(neg, pos) == 1.0


def test_auroc_invariant_to_monotone_maps(rng):
    pos, neg = rng.standard_normal(30), rng.standard_normal(25) - 0.5
    base = auroc(pos, neg)
    for f in (np.exp, lambda v: 3 * v - 7, np.arctan):
        assert auroc(f(pos), f(neg)) == pytest.approx(base, abs=1e-15)


def test_auroc_empty_side():
    with pytest.raises(EmptyClassOfScores):
        auroc([], [1.0])
    with pytest.raises(EmptyClassOfScores):
        auroc([1.0], [])


def test_failure_detection_examples(rng):
    correct = rng.uniform(size=200) < 0.6
    s = LabelledScores(np.where(correct, 1.0, 0.0) + rng.uniform(0, 0.5, 200), np.ones(200, bool), correct)
    assert auroc_f(s) == 1.0
    noise = LabelledScores(rng.standard_normal(2000), np.ones(2000, bool), rng.uniform(size=2000) < 0.5)
    assert abs(auroc_f(noise) - 0.5) < 0.05
    for _ in range(50):
        n = int(rng.integers(2, 21))
        sc = rng.integers(0, 4, n).astype(float)
        c = np.arange(n) % 2 == 0
        is_id = rng.uniform(size=n) < 0.5
        is_id[:2] = [True, False]
        ls = LabelledScores(sc, is_id, c)
        assert auroc_f(ls) == auroc_pairs(sc[c], sc[~c])
        assert auroc_ood(ls) == auroc_pairs(sc[is_id], sc[~is_id])


def test_labelled_scores_reject_nan():
    with pytest.raises(ValueError):
        LabelledScores([np.nan], [True], [True])


# --- percentiles and gates -----------------------------------------------


def test_nearest_rank_examples():
    assert percentile_threshold([4, 2, 1, 3], 75) == 3
    assert percentile_threshold([4, 2, 1, 3], 100) == 4
    assert percentile_threshold([4, 2, 1, 3], 0) == 1
    assert percentile_threshold([4, 2, 1, 3], 25) == 1
    with pytest.raises(EmptyScores):
        percentile_threshold([], 50)
    with pytest.raises(ValueError):
        percentile_threshold([1.0], 101)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 7, 20, 99, 100, 101])
def test_gate_retention_arithmetic(rng, n):
    s = rng.standard_normal(n)
    lam = percentile_threshold(s, 75)
    assert (s >= lam).sum() == n - (math.ceil(0.75 * n) - 1)


def test_gate_beyond_max_is_empty(rng):
    t = make_table(rng)
    out = apply_gate(t, GateConfig("mcp", float(t.scores["mcp"].max()) + 1))
    assert len(out) == 0


def test_gate_partitions_rows(rng):
    t = make_table(rng)
    g = derive_gate(t, "mcp")
    kept, dropped = t.select(gate_mask(t, g)), t.select(~gate_mask(t, g))
    assert sorted(kept.keys() + dropped.keys()) == sorted(t.keys())
    assert not set(kept.keys()) & set(dropped.keys())
    id_orig = t.mask(variant="original", domain="ID")
    assert (t.scores["mcp"][id_orig] >= g.threshold).mean() >= 0.25


def test_gate_idempotent_and_commutative(rng):
    t = make_table(rng)
    a, b = derive_gate(t, "mcp"), derive_gate(t, "mahalanobis", 50)
    assert dual_gate(t, [a, a]) == apply_gate(t, a)
    ab, ba = dual_gate(t, [a, b]), dual_gate(t, [b, a])
    assert ab == ba
    assert set(ab.keys()) == set(apply_gate(t, a).keys()) & set(apply_gate(t, b).keys())
    rows = [i for i in range(len(t)) if t.scores["mcp"][i] >= a.threshold and t.scores["mahalanobis"][i] >= b.threshold]
    acc = sum(t.true_labels[i] == t.predicted_labels[i] for i in rows) / len(rows)
    assert ab.correct.mean() == acc


def test_derive_gate_uses_original_id_rows(rng):
    t = make_table(rng)
    keep = t.mask(variant="original", domain="ID")
    g = derive_gate(t, "mcp", 60)
    assert g.threshold == percentile_threshold(t.scores["mcp"][keep], 60)
    assert (g.method, g.q) == ("mcp", 60)


# --- impact categories ----------------------------------------------------


def test_categorise_truth_table():
    expect = {
        (True, True): ImpactCategory.CORRECT_UNAFFECTED,
        (True, False): ImpactCategory.CORRECT_ONLY_WITH_ARTEFACT,
        (False, True): ImpactCategory.CORRECT_ONLY_WITHOUT_ARTEFACT,
        (False, False): ImpactCategory.INCORRECT_UNAFFECTED,
    }
    for (w, wo), cat in expect.items():
        assert categorise(1 if w else 0, 1 if wo else 2, 1) is cat


def test_impact_categories_pair_rows(rng):
    t = make_table(rng)
    cats = impact_categories(t)
    assert len(cats) == 30
    for i, (sid, v) in enumerate(t.keys()):
        if v == "counterfactual":
            orig = t.keys().index((sid, "original"))
            assert cats[sid] is categorise(t.predicted_labels[orig], t.predicted_labels[i], t.true_labels[i])
    assert impact_categories(make_table(rng, with_twins=False)) == {}


# --- reports --------------------------------------------------------------


def test_gate_summary_percentages(rng):
    t = make_table(rng)
    for spec in DEFAULT_GATES:
        s = gate_summary(t, spec)
        if sum(s["categories"].values()):
            assert abs(sum(s["category_pct"].values()) - 100) < 1e-9
    orig = gate_summary(t, DEFAULT_GATES[0])
    assert orig["id_retained_pct"] == 100 and orig["ood_retained_pct"] == 100
    assert sum(orig["categories"].values()) == 30


def test_single_seed_mean_is_the_seed(rng):
    t = make_table(rng)
    r = build_report({3: t}, ["mcp", "mahalanobis"])
    for m in r.methods.values():
        assert m["mean"] == m["per_seed"][0]
    for g in r.gates.values():
        assert g["mean"]["accuracy"] == g["per_seed"][0]["accuracy"]


def test_report_mean_over_seeds(rng):
    tables = {s: make_table(rng) for s in range(3)}
    r = build_report(tables, ["mcp"])
    vals = [m["auroc_ood"] for m in r.methods["mcp"]["per_seed"]]
    assert r.methods["mcp"]["mean"]["auroc_ood"] == pytest.approx(np.mean(vals), abs=1e-15)
    assert set(r.gates) == {"original", "confidence", "feature", "combined"}


def test_report_json_round_trip(rng):
    r = build_report({0: make_table(rng), 1: make_table(rng)}, ["mcp", "mahalanobis"])
    text = r.to_json()
    assert EvalReport.from_json(text).to_json() == text
    json.loads(text)
    assert "Mahal. Score" in render_table(r) and "MCP" in render_table(r)


def test_seed_mismatch(rng):
    t = make_table(rng)
    with pytest.raises(SeedCountMismatch):
        build_report({0: t}, ["mcp"], expected_seeds=[0, 1])
    with pytest.raises(SeedCountMismatch):
        build_report({0: t}, ["energy"])
    with pytest.raises(SeedCountMismatch):
        build_report({}, ["mcp"])
