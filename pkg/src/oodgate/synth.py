"""Synthetic counterfactual-artefact benchmark.

Images are ``(S, S, 1)`` grayscale: a flat background with noise and one
Gaussian blob whose peak intensity encodes the class. OOD test images carry
an artefact (grid ruler or corner annotation) confined to an image border, and
each is paired with an artefact-free counterfactual.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ArtefactOverlapsSignal, InvalidSpec, IoFailure, OutOfBounds, SourceOverlapsMask
from .tensor_io import DatasetManifest, SampleRecord, Split, read_array_file, read_manifest, write_array_file, write_manifest

ARTEFACT_KINDS = ("ruler_lines", "corner_annotation")
_SPLIT_CODES = {Split.TRAIN: 0, Split.ID_TEST: 1, Split.OOD_TEST: 2}


@dataclass(frozen=True)
class RulerParams:
    """Horizontal lines every ``spacing`` rows along the bottom edge, joined by ticks every ``tick_spacing`` columns."""

    n_lines: int = 3
    spacing: int = 2
    length: int = 20
    tick_spacing: int = 3
    intensity: float = 0.4


@dataclass(frozen=True)
class AnnotationParams:
    """A plus-shaped mark with arms of ``size`` pixels in one corner."""

    size: int = 2
    margin: int = 0
    intensity: float = 0.9


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 28
    num_classes: int = 2
    # peak blob intensity per class, jittered by intensity_jitter (std)
    class_intensity: tuple[float, ...] = (0.65, 0.4)
    intensity_jitter: float = 0.08
    blob_sigma: tuple[float, float] = (2.0, 2.5)
    # blob centres are drawn uniformly from this inclusive pixel range on both axes
    centre_range: tuple[int, int] = (9, 14)
    background: float = 0.1
    noise_sigma: float = 0.05
    artefact_kind: str = "ruler_lines"
    ruler: RulerParams = field(default_factory=RulerParams)
    annotation: AnnotationParams = field(default_factory=AnnotationParams)
    train_per_class: int = 150
    id_test_per_class: int = 100
    ood_test_per_class: int = 100
    rho: float = 0.8
    counterfactual: str = "clean"
    feather_sigma: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        k = self.num_classes
        if k < 2 or len(self.class_intensity) != k:
            raise InvalidSpec("need one blob intensity per class and at least two classes")
        if min(self.train_per_class, self.id_test_per_class, self.ood_test_per_class) <= 0:
            raise InvalidSpec("per-class counts must be positive")
        values = list(self.class_intensity) + [self.background, self.ruler.intensity, self.annotation.intensity]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise InvalidSpec("intensities must lie in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidSpec("rho must lie in [0, 1]")
        if self.artefact_kind not in ARTEFACT_KINDS:
            raise InvalidSpec(f"artefact_kind must be one of {ARTEFACT_KINDS}")
        if self.counterfactual not in ("clean", "interpolated"):
            raise InvalidSpec("counterfactual must be 'clean' or 'interpolated'")
        lo, hi = self.centre_range
        reach = 3 * self.blob_sigma[1]
        if lo - reach < 0 or hi + reach > self.image_size - 1:
            raise InvalidSpec("blob support leaves the image")
        # blob support must stay clear of the artefact region
        free = signal_support(self)
        probe = np.zeros((self.image_size, self.image_size, 1))
        for s in range(4):
            _, mask = inject_artefact(probe, self.artefact_kind, self._artefact_params(), s)
            if (mask & free).any():
                raise InvalidSpec("artefact region overlaps the class-signal region")

    def _artefact_params(self):
        return self.ruler if self.artefact_kind == "ruler_lines" else self.annotation

    def ood_class_counts(self) -> list[int]:
        """OOD test images per class: class 0 takes a share ``rho``, the others split the rest."""
        n = self.ood_test_per_class * self.num_classes
        first = int(round(self.rho * n))
        rest = n - first
        k = self.num_classes - 1
        return [first] + [rest // k + (1 if i < rest % k else 0) for i in range(k)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidSpec(f"unknown synthetic spec keys {sorted(unknown)}")
        if "ruler" in doc:
            doc["ruler"] = RulerParams(**doc["ruler"])
        if "annotation" in doc:
            doc["annotation"] = AnnotationParams(**doc["annotation"])
        for key in ("class_intensity", "blob_sigma", "centre_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def signal_support(spec: SyntheticSpec) -> np.ndarray:
    """Pixels any class blob can reach (within three maximal sigmas of an admissible centre)."""
    s = spec.image_size
    lo, hi = spec.centre_range
    reach = 3 * spec.blob_sigma[1]
    r = np.arange(s)
    dr = np.maximum(0, np.maximum(lo - r, r - hi))
    d2 = dr[:, None] ** 2 + dr[None, :] ** 2
    return (d2 <= reach**2)[:, :, None]


def render_blob(spec: SyntheticSpec, centre: tuple[float, float], sigma: float, peak: float) -> np.ndarray:
    s = spec.image_size
    r = np.arange(s, dtype=np.float64)
    d2 = (r[:, None] - centre[0]) ** 2 + (r[None, :] - centre[1]) ** 2
    blob = peak * np.exp(-d2 / (2 * sigma**2))
    blob[d2 > (3 * sigma) ** 2] = 0.0
    return blob[:, :, None]


def render_clean(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = spec.centre_range
    centre = (rng.uniform(lo, hi), rng.uniform(lo, hi))
    sigma = rng.uniform(*spec.blob_sigma)
    peak = float(np.clip(spec.class_intensity[label] + spec.intensity_jitter * rng.standard_normal(), 0.0, 1.0))
    img = spec.background + render_blob(spec, centre, sigma, peak)
    img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# artefacts
# ---------------------------------------------------------------------------


def ruler_pattern(size: int, params: RulerParams, col0: int, phase: int) -> np.ndarray:
    """Boolean ``(size, size)`` ruler footprint anchored at the bottom edge."""
    pattern = np.zeros((size, size), dtype=bool)
    top = size - 1 - (params.n_lines - 1) * params.spacing
    cols = slice(col0, col0 + params.length)
    for k in range(params.n_lines):
        pattern[top + k * params.spacing, cols] = True
    for c in range(col0 + phase, col0 + params.length, params.tick_spacing):
        pattern[top:size, c] = True
    return pattern


def annotation_pattern(size: int, params: AnnotationParams, corner: int) -> np.ndarray:
    pattern = np.zeros((size, size), dtype=bool)
    centre_off = params.margin + params.size
    r = centre_off if corner in (0, 1) else size - 1 - centre_off
    c = centre_off if corner in (0, 2) else size - 1 - centre_off
    pattern[r, c - params.size : c + params.size + 1] = True
    pattern[r - params.size : r + params.size + 1, c] = True
    return pattern


def inject_artefact(image, kind: str, params, seed: int, signal_mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Add an artefact to ``image``; returns the new image and the boolean footprint.

    Pixels under the footprint get ``intensity`` added (clipped to [0, 1]);
    every other pixel is copied unchanged. ``seed`` picks the ruler's column
    offset and tick phase, or the annotation's corner.
    """
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[0]
    rng = np.random.default_rng([seed, 7])
    if kind == "ruler_lines":
        params = params or RulerParams()
        if params.length > size or (params.n_lines - 1) * params.spacing >= size:
            raise InvalidSpec("ruler does not fit in the image")
        col0 = int(rng.integers(0, size - params.length + 1))
        phase = int(rng.integers(0, params.tick_spacing))
        pattern = ruler_pattern(size, params, col0, phase)
    elif kind == "corner_annotation":
        params = params or AnnotationParams()
        pattern = annotation_pattern(size, params, int(rng.integers(0, 4)))
    else:
        raise InvalidSpec(f"unknown artefact kind {kind!r}")
    mask = np.broadcast_to(pattern[:, :, None], img.shape).copy()
    if signal_mask is not None and (mask & np.asarray(signal_mask, dtype=bool)).any():
        raise ArtefactOverlapsSignal("artefact footprint intersects the class-signal region")
    out = img.copy()
    out[mask] = np.clip(img[mask] + params.intensity, 0.0, 1.0)
    return out, mask


def find_source_offset(mask: np.ndarray) -> tuple[int, int]:
    """Smallest axis-aligned shift that keeps the mask in bounds and off itself.

    Candidates are tried by increasing distance in the order up, down, left, right.
    """
    m = np.asarray(mask, dtype=bool)
    m2 = m.any(axis=2) if m.ndim == 3 else m
    h, w = m2.shape
    for d in range(1, max(h, w)):
        for off in ((-d, 0), (d, 0), (0, -d), (0, d)):
            try:
                _check_offset(m2, off)
            except (OutOfBounds, SourceOverlapsMask):
                continue
            return off
    raise OutOfBounds("no in-bounds translation separates the mask from itself")


def _check_offset(m2: np.ndarray, offset: tuple[int, int]) -> None:
    rows, cols = np.nonzero(m2)
    sr, sc = rows + offset[0], cols + offset[1]
    h, w = m2.shape
    if len(rows) and (sr.min() < 0 or sc.min() < 0 or sr.max() >= h or sc.max() >= w):
        raise OutOfBounds(f"source patch shifted by {offset} leaves the image")
    if len(rows) and m2[sr, sc].any():
        raise SourceOverlapsMask(f"source patch shifted by {offset} overlaps the mask")


def remove_artefact(image, mask, source_offset: tuple[int, int] | None = None, feather_sigma: float = 1.5) -> np.ndarray:
    """Replace masked pixels with pixels of the same image shifted by ``source_offset``.

    Pixels outside the mask within ``3 * feather_sigma`` are blended towards
    the shifted content with weight ``exp(-d^2 / (2 sigma^2))``, ``d`` being
    the distance to the mask; everything farther away is left untouched.
    """
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    m2 = m.any(axis=2) if m.ndim == 3 else m
    if source_offset is None:
        source_offset = find_source_offset(m2)
    dy, dx = int(source_offset[0]), int(source_offset[1])
    _check_offset(m2, (dy, dx))
    h, w = m2.shape
    rr = np.clip(np.arange(h) + dy, 0, h - 1)
    cc = np.clip(np.arange(w) + dx, 0, w - 1)
    shifted = img[rr][:, cc]

    weight = m2.astype(np.float64)
    if feather_sigma > 0 and m2.any():
        dist = distance_transform_edt(~m2)
        band = (~m2) & (dist <= 3 * feather_sigma)
        # feather pixels whose source falls on the artefact keep their own value
        band &= ~m2[rr][:, cc]
        weight[band] = np.exp(-dist[band] ** 2 / (2 * feather_sigma**2))
    if img.ndim == 3:
        weight = weight[:, :, None]
    out = img.copy()
    touched = weight > 0
    out[np.broadcast_to(touched, img.shape)] = (weight * shifted + (1 - weight) * img)[np.broadcast_to(touched, img.shape)]
    return out


def feather_band(mask: np.ndarray, feather_sigma: float) -> np.ndarray:
    """Mask plus every pixel within ``3 * feather_sigma`` of it."""
    m = np.asarray(mask, dtype=bool)
    m2 = m.any(axis=2) if m.ndim == 3 else m
    if feather_sigma <= 0:
        return m2
    return m2 | (distance_transform_edt(~m2) <= 3 * feather_sigma)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    manifest: DatasetManifest
    images: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]

    def arrays(self, split: Split | str) -> tuple[list[str], np.ndarray, np.ndarray]:
        recs = self.manifest.split(split)
        ids = [r.sample_id for r in recs]
        x = np.stack([self.images[i] for i in ids]) if ids else np.zeros((0,))
        return ids, x, np.array([r.label for r in recs], dtype=np.int64)

    def counterfactuals(self) -> tuple[list[str], np.ndarray]:
        recs = [r for r in self.manifest if r.counterfactual_id]
        return [r.sample_id for r in recs], np.stack([self.images[r.counterfactual_id] for r in recs])


def generate_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Render every split; each image draws from its own ``(seed, split, index)`` stream."""
    spec.validate()
    params = spec._artefact_params()
    support = signal_support(spec)
    records, images, masks = [], {}, {}

    def labels_for(split):
        if split is Split.OOD_TEST:
            counts = spec.ood_class_counts()
        else:
            n = spec.train_per_class if split is Split.TRAIN else spec.id_test_per_class
            counts = [n] * spec.num_classes
        return [c for c, n in enumerate(counts) for _ in range(n)]

    prefixes = {Split.TRAIN: "train", Split.ID_TEST: "id", Split.OOD_TEST: "ood"}
    for split in (Split.TRAIN, Split.ID_TEST, Split.OOD_TEST):
        for i, label in enumerate(labels_for(split)):
            sid = f"{prefixes[split]}-{i:05d}"
            rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], i])
            clean = render_clean(spec, label, rng)
            if split is not Split.OOD_TEST:
                images[sid] = clean
                records.append(SampleRecord(sid, split, label, False))
                continue
            art_seed = int(rng.integers(0, 2**31))
            img, mask = inject_artefact(clean, spec.artefact_kind, params, art_seed, support)
            if spec.counterfactual == "clean":
                cf = clean
            else:
                cf = remove_artefact(img, mask, None, spec.feather_sigma)
            cf_id = f"{sid}-cf"
            images[sid], images[cf_id], masks[sid] = img, cf, mask
            records.append(SampleRecord(sid, split, label, True, cf_id))
    return SyntheticDataset(spec, DatasetManifest(records), images, masks)


def write_dataset(ds: SyntheticDataset, directory: str | os.PathLike) -> None:
    """``images/<id>.npy``, ``masks/<id>.npy`` (0/1 int64), ``manifest.csv`` and ``spec.json``."""
    d = Path(directory)
    try:
        (d / "images").mkdir(parents=True, exist_ok=True)
        (d / "masks").mkdir(exist_ok=True)
        (d / "spec.json").write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    for sid in sorted(ds.images):
        write_array_file(ds.images[sid], d / "images" / f"{sid}.npy")
    for sid in sorted(ds.masks):
        write_array_file(ds.masks[sid].astype(np.int64), d / "masks" / f"{sid}.npy")
    write_manifest(ds.manifest, d / "manifest.csv")


def load_dataset(directory: str | os.PathLike) -> SyntheticDataset:
    d = Path(directory)
    try:
        spec = SyntheticSpec.from_dict(json.loads((d / "spec.json").read_text()))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    manifest = read_manifest(d / "manifest.csv", spec.num_classes, d / "images")
    images, masks = {}, {}
    for r in manifest:
        images[r.sample_id] = read_array_file(d / "images" / f"{r.sample_id}.npy")
        if r.counterfactual_id:
            images[r.counterfactual_id] = read_array_file(d / "images" / f"{r.counterfactual_id}.npy")
        if r.has_artefact:
            masks[r.sample_id] = read_array_file(d / "masks" / f"{r.sample_id}.npy").astype(bool)
    return SyntheticDataset(spec, manifest, images, masks)


# class counts of the two real benchmarks: (label name, ID images, OOD images)
REFERENCE_LAYOUTS = {
    "d7p": [("nevus", 832, 148), ("not_nevus", 571, 102)],
    "breastmnist": [("normal", 126, 7), ("benign", 269, 168), ("malignant", 157, 53)],
}


def layout_manifest(name: str, train_fraction: float = 0.9) -> DatasetManifest:
    """Image-free manifest with the class counts of a real benchmark.

    ID images are split ``train_fraction`` / rest into train and ID test;
    every artefact image goes to the OOD test split.
    """
    records = []
    for label, (cls, n_id, n_ood) in enumerate(REFERENCE_LAYOUTS[name]):
        n_train = int(round(train_fraction * n_id))
        for i in range(n_id):
            split = Split.TRAIN if i < n_train else Split.ID_TEST
            records.append(SampleRecord(f"{cls}-id-{i:04d}", split, label, False))
        for i in range(n_ood):
            records.append(SampleRecord(f"{cls}-ood-{i:04d}", Split.OOD_TEST, label, True, f"{cls}-ood-{i:04d}-cf"))
    return DatasetManifest(records)
