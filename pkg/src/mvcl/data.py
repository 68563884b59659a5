"""Manifest ingestion, consensus labelling, splits and the synthetic lesion generator."""
from __future__ import annotations

import csv
import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidAnnotationError, InvalidRatingError, StratificationError
from .volume import LesionCube

MAX_SLICE_THICKNESS_MM = 2.5
MIN_NODULE_DIAMETER_MM = 3.0

TIANCHI_CLASSES = ("nodule", "streak_shadow", "arteriosclerosis_calcification", "lymph_node_calcification")
NODULE_CLASSES = ("benign", "malignant")
SYNTHETIC_CLASSES = ("smooth_blob", "spiculated_blob")

# synthetic generator constants (calibration knobs, not clinical facts)
NOISE_SIGMA = 0.02
CORE_SIGMA_RANGE = (0.09, 0.13)      # fraction of side, per principal axis
CORE_AMPLITUDE_RANGE = (0.55, 0.85)
RIDGE_COUNT_RANGE = (4, 8)
RIDGE_LENGTH_RANGE = (0.40, 0.50)    # fraction of side
RIDGE_WIDTH_RANGE = (2.0, 2.8)       # voxels (Gaussian sigma across the ridge)
RIDGE_AMPLITUDE_RANGE = (0.60, 0.90)


class Mode(str, enum.Enum):
    LIDC = "lidc"
    LNDB = "lndb"
    TIANCHI = "tianchi"
    SYNTHETIC = "synthetic"


MIN_RATERS = {Mode.LIDC: 3, Mode.LNDB: 1}


def class_names(mode) -> tuple:
    mode = Mode(mode)
    if mode is Mode.TIANCHI:
        return TIANCHI_CLASSES
    if mode is Mode.SYNTHETIC:
        return SYNTHETIC_CLASSES
    return NODULE_CLASSES


@dataclass
class ManifestRow:
    volume_path: str
    lesion_id: str
    center_mm: tuple
    longest_diameter_mm: float
    slice_thickness_mm: float
    ratings: tuple = None
    class_label: str = None

    def __post_init__(self):
        if (self.ratings is None) == (self.class_label is None):
            raise InvalidAnnotationError(f"lesion {self.lesion_id}: exactly one of ratings / label must be given")
        if not self.longest_diameter_mm > 0:
            raise InvalidAnnotationError(f"lesion {self.lesion_id}: diameter must be > 0")
        if self.ratings is not None:
            self.ratings = tuple(int(r) for r in self.ratings)


@dataclass
class LabeledLesion:
    lesion_id: str
    label: str
    split: str = None
    row: ManifestRow = field(default=None, repr=False)


MANIFEST_FIELDS = ["volume_path", "lesion_id", "cx_mm", "cy_mm", "cz_mm",
                   "diameter_mm", "slice_thickness_mm", "ratings", "label"]


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"volume_path", "lesion_id", "cx_mm", "cy_mm", "cz_mm", "diameter_mm",
                   "slice_thickness_mm"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: manifest missing columns {sorted(missing)}")
        if not {"ratings", "label"} & set(reader.fieldnames):
            raise DataError(f"{path}: manifest needs a ratings or label column")
        for lineno, rec in enumerate(reader, start=2):
            try:
                ratings = rec.get("ratings") or None
                rows.append(ManifestRow(
                    volume_path=rec["volume_path"],
                    lesion_id=rec["lesion_id"],
                    center_mm=(float(rec["cx_mm"]), float(rec["cy_mm"]), float(rec["cz_mm"])),
                    longest_diameter_mm=float(rec["diameter_mm"]),
                    slice_thickness_mm=float(rec["slice_thickness_mm"]),
                    ratings=tuple(int(r) for r in ratings.split("|")) if ratings else None,
                    class_label=rec.get("label") or None,
                ))
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def write_manifest(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.volume_path, r.lesion_id, *(repr(float(c)) for c in r.center_mm),
                        repr(float(r.longest_diameter_mm)), repr(float(r.slice_thickness_mm)),
                        "|".join(map(str, r.ratings)) if r.ratings else "", r.class_label or ""])
    return path


def consensus_label(ratings, min_raters: int) -> str:
    """Mean malignancy rating: below 3 benign, above 3 malignant, exactly 3 excluded.

    Lesions read by fewer than ``min_raters`` radiologists are excluded too.
    """
    ratings = list(ratings)
    if not ratings:
        raise InvalidRatingError("ratings list is empty")
    for r in ratings:
        if r not in (1, 2, 3, 4, 5):
            raise InvalidRatingError(f"rating {r} outside 1..5")
    if len(ratings) < min_raters:
        return "excluded"
    # compare sum against 3 * n to avoid float ties
    total, n = sum(ratings), len(ratings)
    if total < 3 * n:
        return "benign"
    if total > 3 * n:
        return "malignant"
    return "excluded"


def filter_manifest(rows, mode) -> list[ManifestRow]:
    mode = Mode(mode)
    if mode in (Mode.TIANCHI, Mode.SYNTHETIC):
        return list(rows)
    return [r for r in rows
            if r.slice_thickness_mm <= MAX_SLICE_THICKNESS_MM and r.longest_diameter_mm >= MIN_NODULE_DIAMETER_MM]


def label_rows(rows, mode) -> list[LabeledLesion]:
    """Attach consensus / categorical labels; excluded lesions are dropped."""
    mode = Mode(mode)
    out = []
    for r in rows:
        if mode in MIN_RATERS:
            if r.ratings is None:
                raise InvalidAnnotationError(f"lesion {r.lesion_id}: {mode.value} rows need ratings")
            label = consensus_label(r.ratings, MIN_RATERS[mode])
            if label == "excluded":
                continue
        else:
            label = r.class_label
            if label not in class_names(mode):
                raise InvalidAnnotationError(f"lesion {r.lesion_id}: unknown {mode.value} class {label!r}")
        out.append(LabeledLesion(r.lesion_id, label, row=r))
    return out


def consensus_counts(rows, mode) -> dict:
    mode = Mode(mode)
    counts = defaultdict(int)
    for r in rows:
        counts[consensus_label(r.ratings, MIN_RATERS[mode])] += 1
    return dict(counts)


def _by_class(lesions):
    groups = defaultdict(list)
    for i, les in enumerate(lesions):
        groups[les.label].append(i)
    return {k: groups[k] for k in sorted(groups)}


def split_dataset(lesions, test_fraction: float = 0.2, seed: int = 0):
    """Stratified split; returns ``(train, test)`` preserving input order."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = set()
    for label, idx in _by_class(lesions).items():
        if len(idx) < 2:
            raise StratificationError(f"class {label!r} has {len(idx)} member(s); need at least 2 to stratify")
        n_test = min(max(1, int(round(test_fraction * len(idx)))), len(idx) - 1)
        perm = rng.permutation(len(idx))
        test_idx.update(idx[p] for p in perm[:n_test])
    train = [replace(les, split="train") for i, les in enumerate(lesions) if i not in test_idx]
    test = [replace(les, split="test") for i, les in enumerate(lesions) if i in test_idx]
    return train, test


def subsample_labels(train, fraction: float, seed: int = 0):
    """Per-class prefix of one seeded shuffle, so smaller fractions nest inside larger ones."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    keep = set()
    for _, idx in _by_class(train).items():
        k = max(1, int(round(fraction * len(idx))))
        perm = rng.permutation(len(idx))
        keep.update(idx[p] for p in perm[:k])
    return [les for i, les in enumerate(train) if i in keep]


def write_split(train, test, seed, fraction, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps({
        "train": [t.lesion_id for t in train],
        "test": [t.lesion_id for t in test],
        "seed": seed,
        "fraction": fraction,
    }, indent=2) + "\n")
    return path


# -- synthetic lesions ---------------------------------------------------

def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def gen_synthetic_lesion(cls: str, side: int, seed: int, lesion_id: str = "") -> LesionCube:
    """Anisotropic Gaussian blob; ``spiculated_blob`` adds radial ridges.

    Both classes get additive Gaussian noise and are clamped to [0, 1].
    """
    if cls not in SYNTHETIC_CLASSES:
        raise ValueError(f"unknown synthetic class {cls!r}")
    if side < 9:
        raise ValueError("side must be >= 9")
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), SYNTHETIC_CLASSES.index(cls), side])
    c = (side - 1) / 2.0 + rng.uniform(-1.0, 1.0, size=3)
    g = np.arange(side, dtype=np.float64)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1) - c

    rot = _random_rotation(rng)
    sig = rng.uniform(*CORE_SIGMA_RANGE, size=3) * side
    local = pts @ rot
    core = rng.uniform(*CORE_AMPLITUDE_RANGE) * np.exp(-0.5 * ((local / sig) ** 2).sum(axis=-1))
    img = core

    if cls == "spiculated_blob":
        n = rng.integers(RIDGE_COUNT_RANGE[0], RIDGE_COUNT_RANGE[1] + 1)
        for d in _unit_vectors(rng, n):
            length = rng.uniform(*RIDGE_LENGTH_RANGE) * side
            width = rng.uniform(*RIDGE_WIDTH_RANGE)
            amp = rng.uniform(*RIDGE_AMPLITUDE_RANGE)
            t = pts @ d
            perp2 = (pts ** 2).sum(axis=-1) - t ** 2
            along = np.clip(1.0 - t / length, 0.0, 1.0) * (t >= 0)
            img = np.maximum(img, amp * along * np.exp(-0.5 * perp2 / width ** 2))

    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return LesionCube(np.clip(img, 0.0, 1.0).astype(np.float32), lesion_id)

