"""End-to-end stages: synth -> train -> score -> eval -> gate -> report.

All outputs live under ``<out>/<config digest>/``:

    data/                  synthetic dataset (images, masks, manifest, spec echo)
    seed<k>/model/         trained parameters
    seed<k>/dump/          logits and hidden features of every sample
    seed<k>/stats/         fitted feature statistics
    seed<k>/scores.csv     score table of the test rows
    seed<k>/tuning.json    grid values picked for the tuned methods
    eval.json, gates.json, report.json, report.txt

A dump directory (``index.csv`` plus array files) is also the format for
features produced elsewhere: point ``dataset.dump`` at a directory holding
``seed<k>/`` dumps and the score stage uses them instead of a trained model.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import confidence as C
from . import feature as F
from .config import RunConfig
from .engine.layers import ModelParams, ModelSpec
from .engine.model import ensemble_softmax, extract_feature_vector, forward, mc_dropout_sample
from .engine.serialize import load_model, save_model
from .engine.train import TrainConfig, train
from .errors import IoFailure, MissingUpstream, NotAFeatureLayer, SchemaMismatch
from .evaluation import EvalReport, auroc, evaluate_gates, evaluate_methods, render_table
from .synth import SyntheticDataset, generate_dataset, load_dataset, write_dataset
from .tensor_io import (
    Domain,
    ScoreTable,
    Split,
    Variant,
    read_array_file,
    read_score_table,
    write_array_file,
    write_score_table,
)

STAGES = ("synth", "train", "score", "eval", "gate", "report")
INDEX_HEADER = ["sample_id", "split", "variant", "label"]
BATCH = 256


# ---------------------------------------------------------------------------
# feature dumps
# ---------------------------------------------------------------------------


@dataclass
class FeatureDump:
    """Network outputs for every sample of one model.

    ``features`` holds pooled vectors and ``maps`` full ``(J, J, M)`` feature
    maps, both keyed by layer index. The optional arrays feed the sampling
    based methods and ODIN, which need the network itself.
    """

    sample_ids: list[str]
    splits: list[Split]
    variants: list[Variant]
    labels: np.ndarray
    logits: np.ndarray
    penultimate: np.ndarray
    last_w: np.ndarray
    last_b: np.ndarray
    features: dict[int, np.ndarray] = field(default_factory=dict)
    maps: dict[int, np.ndarray] = field(default_factory=dict)
    mc_softmax: np.ndarray | None = None
    ensemble_softmax: np.ndarray | None = None
    odin: np.ndarray | None = None
    odin_grid: dict | None = None

    def __post_init__(self):
        n = len(self.sample_ids)
        arrays = [self.labels, self.logits, self.penultimate, *self.features.values(), *self.maps.values()]
        arrays += [a for a in (self.mc_softmax, self.ensemble_softmax, self.odin) if a is not None]
        if len(self.splits) != n or len(self.variants) != n or any(len(a) != n for a in arrays):
            raise SchemaMismatch("dump arrays disagree on the number of samples")
        if self.last_w.shape != (self.logits.shape[1], self.penultimate.shape[1]):
            raise SchemaMismatch(f"last-layer weights {self.last_w.shape} do not match logits and features")

    def rows(self, split: Split | None = None, variant: Variant | None = None) -> np.ndarray:
        keep = np.ones(len(self.sample_ids), dtype=bool)
        if split is not None:
            keep &= np.array([s is split for s in self.splits])
        if variant is not None:
            keep &= np.array([v is variant for v in self.variants])
        return keep


def write_dump(dump: FeatureDump, directory) -> None:
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(INDEX_HEADER)
        for row in zip(dump.sample_ids, dump.splits, dump.variants, dump.labels):
            w.writerow([row[0], row[1].value, row[2].value, int(row[3])])
        (d / "index.csv").write_text(buf.getvalue())
        if dump.odin_grid is not None:
            (d / "odin_grid.json").write_text(json.dumps(dump.odin_grid, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    for name in ("logits", "penultimate", "last_w", "last_b", "mc_softmax", "ensemble_softmax", "odin"):
        arr = getattr(dump, name)
        if arr is not None:
            write_array_file(arr, d / f"{name}.npy")
    for layer, arr in sorted(dump.features.items()):
        write_array_file(arr, d / f"feat_{layer}.npy")
    for layer, arr in sorted(dump.maps.items()):
        write_array_file(arr, d / f"map_{layer}.npy")


def read_dump(directory) -> FeatureDump:
    d = Path(directory)
    if not (d / "index.csv").is_file():
        raise MissingUpstream(f"no feature dump at {d}")
    rows = list(csv.reader(io.StringIO((d / "index.csv").read_text())))
    if not rows or rows[0] != INDEX_HEADER:
        raise SchemaMismatch(f"{d / 'index.csv'}: header must be {','.join(INDEX_HEADER)}")
    try:
        ids = [r[0] for r in rows[1:]]
        splits = [Split(r[1]) for r in rows[1:]]
        variants = [Variant(r[2]) for r in rows[1:]]
        labels = np.array([int(r[3]) for r in rows[1:]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise SchemaMismatch(f"{d / 'index.csv'}: {exc}") from None

    def need(name):
        if not (d / name).is_file():
            raise MissingUpstream(f"dump {d} lacks {name}")
        return read_array_file(d / name)

    def maybe(name):
        return read_array_file(d / name) if (d / name).is_file() else None

    def layered(prefix):
        out = {}
        for p in d.glob(f"{prefix}_*.npy"):
            out[int(p.stem.split("_", 1)[1])] = read_array_file(p)
        return dict(sorted(out.items()))

    grid = json.loads((d / "odin_grid.json").read_text()) if (d / "odin_grid.json").is_file() else None
    return FeatureDump(
        ids, splits, variants, labels,
        need("logits.npy"), need("penultimate.npy"), need("last_w.npy"), need("last_b.npy"),
        layered("feat"), layered("map"),
        maybe("mc_softmax.npy"), maybe("ensemble_softmax.npy"), maybe("odin.npy"), grid,
    )


def _batched(fn, x: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(x[i:i + BATCH]) for i in range(0, len(x), BATCH)])


def extract_dump(spec: ModelSpec, params: ModelParams, data: SyntheticDataset, cfg: RunConfig, seed: int,
                 members: list[ModelParams] | None = None) -> FeatureDump:
    """Run one model over every training, test and counterfactual image."""
    sc = cfg.doc["scoring"]
    ids, splits, variants, labels, images = [], [], [], [], []
    for split in (Split.TRAIN, Split.ID_TEST, Split.OOD_TEST):
        sid, x, y = data.arrays(split)
        ids += sid
        splits += [split] * len(sid)
        variants += [Variant.ORIGINAL] * len(sid)
        labels.append(y)
        images.append(x)
    recs = [r for r in data.manifest if r.counterfactual_id]
    if recs:
        ids += [r.sample_id for r in recs]
        splits += [r.split for r in recs]
        variants += [Variant.COUNTERFACTUAL] * len(recs)
        labels.append(np.array([r.label for r in recs], dtype=np.int64))
        images.append(np.stack([data.images[r.counterfactual_id] for r in recs]))
    x = np.concatenate(images)

    last = spec.last_dense_index
    feat_layers = sorted({sc["feature_layer"], *sc["mbm_layers"]})
    map_layers = sorted(sc["gram_layers"])
    logits, penult, feats, maps = [], [], {l: [] for l in feat_layers}, {l: [] for l in map_layers}
    for i in range(0, len(x), BATCH):
        tr = forward(spec, params, x[i:i + BATCH])
        logits.append(tr.logits)
        penult.append(tr.activations[last - 1] if last > 0 else tr.input)
        for l in feat_layers:
            feats[l].append(extract_feature_vector(tr, l))
        for l in map_layers:
            if tr.activations[l].ndim != 4:
                raise NotAFeatureLayer(f"layer {l} has no spatial feature map")
            maps[l].append(tr.activations[l])

    methods = set(cfg.methods)
    dump = FeatureDump(
        ids, splits, variants, np.concatenate(labels),
        np.concatenate(logits), np.concatenate(penult),
        params.weights[last], params.biases[last],
        {l: np.concatenate(v) for l, v in feats.items()},
        {l: np.concatenate(v) for l, v in maps.items()},
    )
    if methods & {"mcdp_mcp", "mcdp_pe", "mcdp_mi"}:
        dump.mc_softmax = _batched(
            lambda b: mc_dropout_sample(spec, params, b, sc["mc_samples"], seed, sc["mc_dropout"]), x)
    if "de_mcp" in methods:
        dump.ensemble_softmax = _batched(lambda b: ensemble_softmax(spec, members or [params], b), x)
    if "odin" in methods:
        g = cfg.doc["grids"]["odin"]
        dump.odin = _batched(lambda b: C.odin_grid(spec, params, b, g["temperatures"], g["epsilons"]), x)
        dump.odin_grid = {"temperatures": list(g["temperatures"]), "epsilons": list(g["epsilons"])}
    return dump


# ---------------------------------------------------------------------------
# scoring a dump
# ---------------------------------------------------------------------------


def holdout_rows(labels: np.ndarray, fraction: float) -> np.ndarray:
    """The last ``ceil(fraction * n_c)`` rows of each class, as a boolean mask."""
    out = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = int(np.ceil(fraction * len(idx)))
        out[idx[len(idx) - k:]] = True
    return out


@dataclass
class FittedScorers:
    class_stats: dict
    background: dict
    selection: F.LayerSelection | None
    gram: F.GramReference | None
    penultimate_mean: np.ndarray


def fit_scorers(dump: FeatureDump, cfg: RunConfig) -> FittedScorers:
    """Fit every feature statistic on the training rows minus a per-class held-out fold.

    The fold calibrates the multi-layer normalisers and the Gram expected
    deviations, so it never contributes to the statistics it calibrates.
    """
    sc = cfg.doc["scoring"]
    methods = set(cfg.methods)
    tr = np.flatnonzero(dump.rows(Split.TRAIN, Variant.ORIGINAL))
    y = dump.labels[tr]
    hold = holdout_rows(y, sc["holdout_fraction"])
    fit, held = tr[~hold], tr[hold]
    reg, shared = sc["covariance_reg"], sc["shared_covariance"]

    def features(layer, rows):
        if layer not in dump.features:
            raise MissingUpstream(f"dump lacks pooled features of layer {layer}")
        return dump.features[layer][rows]

    layers = set()
    if methods & {"mahalanobis", "rms"}:
        layers.add(sc["feature_layer"])
    if "mbm" in methods:
        layers.update(sc["mbm_layers"])
    class_stats = {l: F.fit_class_gaussians(features(l, fit), dump.labels[fit], reg, shared) for l in sorted(layers)}
    background = {}
    if "rms" in methods:
        l = sc["feature_layer"]
        background[l] = F.fit_background_gaussian(features(l, fit), reg)
    selection = None
    if "mbm" in methods:
        selection = F.fit_layer_selection(sc["mbm_layers"], class_stats, {l: features(l, held) for l in sc["mbm_layers"]})
    gram = None
    if "gram" in methods:
        missing = [l for l in sc["gram_layers"] if l not in dump.maps]
        if missing:
            raise MissingUpstream(f"dump lacks feature maps of layers {missing}")
        gram = F.fit_gram_reference(
            {l: dump.maps[l][fit] for l in sc["gram_layers"]}, dump.labels[fit], sc["gram_orders"],
            {l: dump.maps[l][held] for l in sc["gram_layers"]}, dump.labels[held],
        )
    return FittedScorers(class_stats, background, selection, gram, dump.penultimate[fit].mean(axis=0))


def pick_best(candidates: list[tuple[dict, np.ndarray]], original: np.ndarray, is_id: np.ndarray) -> tuple[dict, np.ndarray]:
    """Grid value whose scores on the original rows best separate ID from OOD; first wins ties."""
    aucs = [auroc(s[original][is_id], s[original][~is_id]) for _, s in candidates]
    best = int(np.argmax(aucs))
    params, scores = candidates[best]
    return params | {"auroc_ood": aucs[best]}, scores


def _require(arr, name):
    if arr is None:
        raise MissingUpstream(f"dump lacks {name}")
    return arr


def score_dump(dump: FeatureDump, fitted: FittedScorers, cfg: RunConfig) -> tuple[ScoreTable, dict]:
    """Score every test row (originals and counterfactuals) with each configured method.

    ODIN, ReAct and DICE take the grid value that best separates ID from OOD
    originals, an optimistic upper bound on what a held-out choice would give.
    """
    sc, grids = cfg.doc["scoring"], cfg.doc["grids"]
    ev = ~dump.rows(Split.TRAIN)
    tr = dump.rows(Split.TRAIN, Variant.ORIGINAL)
    logits = dump.logits[ev]
    rec = C.LogitRecord(logits, dump.penultimate[ev], dump.last_w, dump.last_b)
    splits = [s for s, k in zip(dump.splits, ev) if k]
    variants = [v for v, k in zip(dump.variants, ev) if k]
    original = np.array([v is Variant.ORIGINAL for v in variants])
    is_id = np.array([s is Split.ID_TEST for s in splits])[original]
    predicted = logits.argmax(axis=1)

    cols, tuning = {}, {}
    L = sc["feature_layer"]
    for m in cfg.methods:
        if m == "mcp":
            cols[m] = C.score_mcp(logits)
        elif m == "se":
            cols[m] = C.score_shannon_entropy(logits)
        elif m == "mls":
            cols[m] = C.score_max_logit(logits)
        elif m == "energy":
            cols[m] = C.score_energy(logits)
        elif m.startswith("mcdp_"):
            cols[m] = C.score_mcdp(_require(dump.mc_softmax, "mc_softmax.npy")[ev], m.split("_", 1)[1])
        elif m == "de_mcp":
            cols[m] = C.score_de_mcp(_require(dump.ensemble_softmax, "ensemble_softmax.npy")[ev])
        elif m == "gradnorm":
            cols[m] = C.score_gradnorm(rec)
        elif m == "odin":
            grid = _require(dump.odin, "odin.npy")[ev]
            g = _require(dump.odin_grid, "odin_grid.json")
            cands = [
                ({"temperature": t, "epsilon": e}, grid[:, a, b])
                for a, t in enumerate(g["temperatures"])
                for b, e in enumerate(g["epsilons"])
            ]
            tuning[m], cols[m] = pick_best(cands, original, is_id)
        elif m == "react":
            train_feats = dump.penultimate[tr]
            cands = []
            for p in grids["react"]["percentiles"]:
                c = C.react_threshold(train_feats, p)
                cands.append(({"percentile": p, "clamp": c}, C.score_react(rec, c)))
            tuning[m], cols[m] = pick_best(cands, original, is_id)
        elif m == "dice":
            cands = [({"keep": k}, C.score_dice(rec, k, fitted.penultimate_mean)) for k in grids["dice"]["keep"]]
            tuning[m], cols[m] = pick_best(cands, original, is_id)
        elif m == "mahalanobis":
            cols[m] = F.score_mahalanobis(dump.features[L][ev], fitted.class_stats[L])
        elif m == "rms":
            cols[m] = F.score_rms(dump.features[L][ev], fitted.class_stats[L], fitted.background[L])
        elif m == "mbm":
            z = {l: dump.features[l][ev] for l in fitted.selection.layers}
            cols[m] = F.score_mbm(z, fitted.selection, fitted.class_stats)
        elif m == "gram":
            maps = {l: dump.maps[l][ev] for l in fitted.gram.layers}
            cols[m] = F.score_gram(maps, fitted.gram, predicted)
    table = ScoreTable(
        [s for s, k in zip(dump.sample_ids, ev) if k],
        variants,
        [Domain.ID if s is Split.ID_TEST else Domain.OOD for s in splits],
        dump.labels[ev],
        predicted,
        {m: np.asarray(cols[m], dtype=np.float64) for m in cfg.methods},
    )
    return table, tuning


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def _workers() -> int:
    try:
        n = int(os.environ.get("OODGATE_THREADS", "0"))
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _map_seeds(fn, doc: dict, seeds: list[int]) -> list:
    """``fn(doc, seed)`` for each seed; results come back in seed order."""
    n = min(_workers(), len(seeds))
    if n <= 1:
        return [fn(doc, s) for s in seeds]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(fn, [doc] * len(seeds), seeds))


def _write_json(path: Path, obj) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _read_json(path: Path, what: str):
    if not path.is_file():
        raise MissingUpstream(f"{what} not found at {path}")
    return json.loads(path.read_text())


def _load_data(cfg: RunConfig) -> SyntheticDataset:
    d = cfg.run_dir / "data"
    if not (d / "manifest.csv").is_file():
        raise MissingUpstream(f"dataset not found at {d}; run the synth stage first")
    return load_dataset(d)


def _load_params(cfg: RunConfig, seed: int) -> tuple[ModelSpec, ModelParams]:
    d = cfg.run_dir / f"seed{seed}" / "model"
    if not (d / "model.json").is_file():
        raise MissingUpstream(f"model for seed {seed} not found at {d}; run the train stage first")
    return load_model(d)


def run_synth(cfg: RunConfig) -> str:
    if not cfg.is_synthetic:
        if not cfg.dump_source.is_dir():
            raise MissingUpstream(f"external dump directory {cfg.dump_source} does not exist")
        return f"using external dumps from {cfg.dump_source}"
    ds = generate_dataset(cfg.synthetic_spec())
    write_dataset(ds, cfg.run_dir / "data")
    return f"wrote {len(ds.images)} images to {cfg.run_dir / 'data'}"


def _train_one(doc: dict, seed: int) -> float:
    cfg = RunConfig(doc)
    data = _load_data(cfg)
    spec = cfg.model_spec(data.spec)
    _, x, y = data.arrays(Split.TRAIN)
    t = doc["train"]
    params = train(spec, x, y, TrainConfig(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
                                           momentum=t["momentum"], seed=seed))
    save_model(spec, params, cfg.run_dir / f"seed{seed}" / "model")
    return float((forward(spec, params, x).logits.argmax(axis=1) == y).mean())


def run_train(cfg: RunConfig) -> str:
    if not cfg.is_synthetic:
        return "external dumps: nothing to train"
    _load_data(cfg)
    accs = _map_seeds(_train_one, cfg.doc, cfg.seeds)
    return "trained seeds " + ", ".join(f"{s} (train acc {a:.3f})" for s, a in zip(cfg.seeds, accs))


def _score_one(doc: dict, seed: int) -> int:
    cfg = RunConfig(doc)
    out = cfg.run_dir / f"seed{seed}"
    if cfg.is_synthetic:
        data = _load_data(cfg)
        spec, params = _load_params(cfg, seed)
        members = [_load_params(cfg, s)[1] for s in cfg.seeds] if "de_mcp" in cfg.methods else None
        dump = extract_dump(spec, params, data, cfg, seed, members)
        write_dump(dump, out / "dump")
    else:
        dump = read_dump(cfg.dump_source / f"seed{seed}")
    fitted = fit_scorers(dump, cfg)
    F.save_feature_stats(out / "stats", fitted.class_stats, fitted.background, fitted.selection, fitted.gram)
    write_array_file(fitted.penultimate_mean, out / "stats" / "penultimate_mean.npy")
    table, tuning = score_dump(dump, fitted, cfg)
    write_score_table(table, out / "scores.csv")
    _write_json(out / "tuning.json", tuning)
    return len(table)


def run_score(cfg: RunConfig) -> str:
    if cfg.is_synthetic:
        _load_data(cfg)
        for s in cfg.seeds:
            _load_params(cfg, s)
    rows = _map_seeds(_score_one, cfg.doc, cfg.seeds)
    return f"scored {sum(rows)} rows over {len(rows)} seed(s)"


def load_tables(cfg: RunConfig) -> dict[int, ScoreTable]:
    tables = {}
    for s in cfg.seeds:
        p = cfg.run_dir / f"seed{s}" / "scores.csv"
        if not p.is_file():
            raise MissingUpstream(f"score table for seed {s} not found at {p}; run the score stage first")
        tables[s] = read_score_table(p)
    return tables


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def run_eval(cfg: RunConfig) -> str:
    tables = load_tables(cfg)
    missing = {s: sorted(set(cfg.methods) - set(t.methods)) for s, t in tables.items()}
    missing = {s: m for s, m in missing.items() if m}
    if missing:
        raise MissingUpstream(f"score tables lack methods {missing}; rerun the score stage")
    # partial reports: eval.json carries no gates, gates.json no methods
    _write_text(cfg.run_dir / "eval.json", EvalReport(cfg.seeds, evaluate_methods(tables, cfg.methods), {}).to_json())
    return f"wrote {cfg.run_dir / 'eval.json'}"


def run_gate(cfg: RunConfig) -> str:
    tables = load_tables(cfg)
    _write_text(cfg.run_dir / "gates.json", EvalReport(cfg.seeds, {}, evaluate_gates(tables, cfg.gates)).to_json())
    return f"wrote {cfg.run_dir / 'gates.json'}"


def run_report(cfg: RunConfig) -> str:
    ev = _read_json(cfg.run_dir / "eval.json", "evaluation")
    gt = _read_json(cfg.run_dir / "gates.json", "gate summary")
    if ev["seeds"] != cfg.seeds or gt["seeds"] != cfg.seeds:
        raise MissingUpstream("eval.json/gates.json were produced for different seeds; rerun eval and gate")
    report = EvalReport(cfg.seeds, ev["methods"], gt["gates"])
    _write_text(cfg.run_dir / "report.json", report.to_json())
    _write_text(cfg.run_dir / "report.txt", render_table(report))
    return f"wrote {cfg.run_dir / 'report.json'}"


RUNNERS = {
    "synth": run_synth,
    "train": run_train,
    "score": run_score,
    "eval": run_eval,
    "gate": run_gate,
    "report": run_report,
}


def run(stage: str, cfg: RunConfig, log=None) -> None:
    """Run one stage, or every stage in order for ``"all"``."""
    stages = STAGES if stage == "all" else (stage,)
    _write_json(cfg.run_dir / "config.json", cfg.doc)
    for s in stages:
        msg = RUNNERS[s](cfg)
        if log is not None:
            log(f"[{s}] {msg}")
