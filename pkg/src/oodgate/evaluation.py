"""OOD-detection and failure-detection metrics, percentile gates and reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import EmptyClassOfScores, EmptyScores, SeedCountMismatch
from .registry import CONFIDENCE_METHODS, DISPLAY_NAMES, FEATURE_METHODS
from .tensor_io import Domain, ScoreTable, Variant


def auroc(pos_scores, neg_scores) -> float:
    """Probability that a positive outscores a negative, ties counting one half.

    Computed from average ranks (Mann-Whitney U); the value equals the
    pair-count definition exactly because tied ranks are half-integers.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    neg = np.asarray(neg_scores, dtype=np.float64).reshape(-1)
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyClassOfScores("AUROC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]))
    n1, n2 = len(pos), len(neg)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


@dataclass
class LabelledScores:
    scores: np.ndarray
    is_id: np.ndarray
    correct: np.ndarray
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_id = np.asarray(self.is_id, dtype=bool)
        self.correct = np.asarray(self.correct, dtype=bool)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_table(cls, table: ScoreTable, method: str) -> "LabelledScores":
        """Original-variant rows of ``table`` scored by ``method``."""
        t = table.select(table.mask(variant=Variant.ORIGINAL))
        return cls(t.scores[method], t.mask(domain=Domain.ID), t.correct, t.sample_ids)

    def subset(self, keep) -> "LabelledScores":
        keep = np.asarray(keep, dtype=bool)
        return LabelledScores(self.scores[keep], self.is_id[keep], self.correct[keep],
                              [s for s, k in zip(self.sample_ids, keep) if k] if self.sample_ids else [])


def auroc_ood(s: LabelledScores) -> float:
    """ID samples are the positives, OOD samples the negatives."""
    return auroc(s.scores[s.is_id], s.scores[~s.is_id])


def auroc_f(s: LabelledScores) -> float:
    """Correct predictions are the positives, errors the negatives, ID and OOD pooled."""
    return auroc(s.scores[s.correct], s.scores[~s.correct])


def percentile_threshold(id_scores, q: float) -> float:
    """Nearest-rank percentile: ``sorted(scores)[ceil(q/100 * N) - 1]``, minimum at q = 0."""
    s = np.sort(np.asarray(id_scores, dtype=np.float64).reshape(-1))
    if len(s) == 0:
        raise EmptyScores("cannot derive a threshold from no scores")
    if not 0 <= q <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    rank = math.ceil(q / 100.0 * len(s))
    return float(s[max(rank, 1) - 1])


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateConfig:
    method: str
    threshold: float
    q: float = 75.0
    derived_from: str = "id_test"


def derive_gate(table: ScoreTable, method: str, q: float = 75.0) -> GateConfig:
    """Threshold at the q-th percentile of the original ID rows of ``table``."""
    keep = table.mask(variant=Variant.ORIGINAL, domain=Domain.ID)
    return GateConfig(method, percentile_threshold(table.scores[method][keep], q), q)


def gate_mask(table: ScoreTable, gate: GateConfig) -> np.ndarray:
    return table.scores[gate.method] >= gate.threshold


def apply_gate(table: ScoreTable, gate: GateConfig) -> ScoreTable:
    """Rows scoring at or above the threshold; predictions below it are dismissed."""
    return table.select(gate_mask(table, gate))


def dual_gate(table: ScoreTable, gates: Sequence[GateConfig]) -> ScoreTable:
    """Apply gates in order. With fixed thresholds this is the intersection of the single gates."""
    for gate in gates:
        table = apply_gate(table, gate)
    return table


class ImpactCategory(str, Enum):
    CORRECT_UNAFFECTED = "correct_unaffected"
    INCORRECT_UNAFFECTED = "incorrect_unaffected"
    CORRECT_ONLY_WITH_ARTEFACT = "correct_only_with_artefact"
    CORRECT_ONLY_WITHOUT_ARTEFACT = "correct_only_without_artefact"


def categorise(pred_with_artefact: int, pred_without_artefact: int, true_label: int) -> ImpactCategory:
    with_ok = pred_with_artefact == true_label
    without_ok = pred_without_artefact == true_label
    if with_ok and without_ok:
        return ImpactCategory.CORRECT_UNAFFECTED
    if with_ok:
        return ImpactCategory.CORRECT_ONLY_WITH_ARTEFACT
    if without_ok:
        return ImpactCategory.CORRECT_ONLY_WITHOUT_ARTEFACT
    return ImpactCategory.INCORRECT_UNAFFECTED


def impact_categories(table: ScoreTable) -> dict[str, ImpactCategory]:
    """Category of every original OOD row that has a counterfactual twin in ``table``."""
    twin = {
        sid: int(p)
        for sid, v, p in zip(table.sample_ids, table.variants, table.predicted_labels)
        if v is Variant.COUNTERFACTUAL
    }
    out = {}
    for sid, v, d, p, y in zip(table.sample_ids, table.variants, table.domains, table.predicted_labels, table.true_labels):
        if v is Variant.ORIGINAL and d is Domain.OOD and sid in twin:
            out[sid] = categorise(int(p), twin[sid], int(y))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateSpec:
    """A named gate sequence; an empty ``stages`` list keeps everything."""

    name: str
    stages: tuple[tuple[str, float], ...] = ()


DEFAULT_GATES = (
    GateSpec("original", ()),
    GateSpec("confidence", (("mcp", 75.0),)),
    GateSpec("feature", (("mahalanobis", 75.0),)),
    GateSpec("combined", (("mahalanobis", 75.0), ("mcp", 75.0))),
)


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else float("nan")


def _acc(correct: np.ndarray) -> float:
    return float(correct.mean()) if len(correct) else float("nan")


def gate_summary(table: ScoreTable, spec: GateSpec) -> dict:
    """Retention, accuracy and impact-category breakdown for one seed's table."""
    orig = table.select(table.mask(variant=Variant.ORIGINAL))
    gates = [derive_gate(orig, m, q) for m, q in spec.stages]
    kept = dual_gate(orig, gates)
    n_id = int(orig.mask(domain=Domain.ID).sum())
    n_ood = int(orig.mask(domain=Domain.OOD).sum())
    kept_id = kept.mask(domain=Domain.ID)
    kept_ood = kept.mask(domain=Domain.OOD)
    cats = impact_categories(table)
    kept_cats = [cats[s] for s, d in zip(kept.sample_ids, kept.domains) if d is Domain.OOD and s in cats]
    counts = {c.value: sum(1 for k in kept_cats if k is c) for c in ImpactCategory}
    return {
        "thresholds": [{"method": g.method, "q": g.q, "threshold": g.threshold} for g in gates],
        "n_id": int(kept_id.sum()),
        "n_ood": int(kept_ood.sum()),
        "id_retained_pct": _pct(int(kept_id.sum()), n_id),
        "ood_retained_pct": _pct(int(kept_ood.sum()), n_ood),
        "ood_share_pct": _pct(int(kept_ood.sum()), len(kept)),
        "accuracy": _acc(kept.correct),
        "accuracy_id": _acc(kept.correct[kept_id]),
        "accuracy_ood": _acc(kept.correct[kept_ood]),
        "categories": counts,
        "category_pct": {k: _pct(v, len(kept_cats)) for k, v in counts.items()},
    }


def _safe_auroc(fn, s: LabelledScores) -> float:
    try:
        return fn(s)
    except EmptyClassOfScores:
        return float("nan")


def method_metrics(table: ScoreTable, method: str) -> dict:
    s = LabelledScores.from_table(table, method)
    return {
        "auroc_ood": auroc_ood(s),
        "auroc_f": _safe_auroc(auroc_f, s),
        "auroc_f_id": _safe_auroc(auroc_f, s.subset(s.is_id)),
        "auroc_f_ood": _safe_auroc(auroc_f, s.subset(~s.is_id)),
    }


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else float("nan")


def _aggregate(per_seed: list[dict]) -> dict:
    out = {}
    for key, first in per_seed[0].items():
        if isinstance(first, dict):
            out[key] = _aggregate([p[key] for p in per_seed])
        elif isinstance(first, (int, float)) and not isinstance(first, bool):
            out[key] = _mean([float(p[key]) for p in per_seed])
    return out


@dataclass
class EvalReport:
    seeds: list[int]
    methods: dict  # method -> {"mean": {...}, "per_seed": [...]}
    gates: dict  # gate name -> {"stages": [...], "mean": {...}, "per_seed": [...]}

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "methods": self.methods, "gates": self.gates}

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(doc["seeds"], doc["methods"], doc["gates"])


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def evaluate_methods(tables: Mapping[int, ScoreTable], methods: Sequence[str]) -> dict:
    seeds = sorted(tables)
    out = {}
    for m in methods:
        per_seed = [method_metrics(tables[s], m) for s in seeds]
        out[m] = {"mean": _aggregate(per_seed), "per_seed": per_seed}
    return out


def evaluate_gates(tables: Mapping[int, ScoreTable], gates: Sequence[GateSpec] = DEFAULT_GATES) -> dict:
    seeds = sorted(tables)
    out = {}
    for g in gates:
        per_seed = [gate_summary(tables[s], g) for s in seeds]
        out[g.name] = {
            "stages": [{"method": m, "q": q} for m, q in g.stages],
            "mean": _aggregate(per_seed),
            "per_seed": per_seed,
        }
    return out


def build_report(
    tables: Mapping[int, ScoreTable],
    methods: Sequence[str],
    gates: Sequence[GateSpec] = DEFAULT_GATES,
    expected_seeds: Sequence[int] | None = None,
) -> EvalReport:
    """Per-method AUROCs and per-gate retention, per seed and averaged over seeds."""
    seeds = sorted(tables)
    if not seeds:
        raise SeedCountMismatch("no score tables")
    if expected_seeds is not None and sorted(expected_seeds) != seeds:
        raise SeedCountMismatch(f"tables for seeds {seeds}, expected {sorted(expected_seeds)}")
    for s in seeds:
        missing = set(methods) - set(tables[s].methods)
        if missing:
            raise SeedCountMismatch(f"seed {s} lacks scores for {sorted(missing)}")
    return EvalReport(seeds, evaluate_methods(tables, methods), evaluate_gates(tables, gates))


def _fmt(v) -> str:
    return "  n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:5.1f}"


def _fmt_pct(v) -> str:
    return "  n/a" if v is None or math.isnan(v) else f"{v:5.1f}"


def render_table(report: EvalReport) -> str:
    """Plain-text methods x {AUC_OOD, AUC_f} table (percent, mean over seeds) plus gate panels."""
    width = max(len(n) for n in DISPLAY_NAMES.values()) + 2
    lines = [f"{'OOD-D method':<{width}} AUC_OOD  AUC_f", "-" * (width + 15)]
    for title, group in (("Confidence-based Methods", CONFIDENCE_METHODS), ("Feature-based Methods", FEATURE_METHODS)):
        rows = [m for m in group if m in report.methods]
        if not rows:
            continue
        lines.append(title)
        for m in rows:
            mean = report.methods[m]["mean"]
            lines.append(f"{DISPLAY_NAMES.get(m, m):<{width}} {_fmt(mean.get('auroc_ood'))}  {_fmt(mean.get('auroc_f'))}")
    if report.gates:
        lines += ["", f"{'gate':<12} {'ID kept %':>9} {'OOD kept %':>10} {'accuracy %':>10}"]
        for name, g in report.gates.items():
            m = g["mean"]
            lines.append(
                f"{name:<12} {_fmt_pct(m.get('id_retained_pct')):>9} {_fmt_pct(m.get('ood_retained_pct')):>10} {_fmt(m.get('accuracy')):>10}"
            )
    lines.append(f"(mean of {len(report.seeds)} seed(s))")
    return "\n".join(lines) + "\n"
