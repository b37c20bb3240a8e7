"""Synthetic multi-modal brain-tumour phantoms.

Each case is a 2D slice with four pre-aligned modalities (F, T1, T1c, T2
analogs) and a four-class label map:

    0 healthy / background, 1 edema, 2 core, 3 enhancing rim

The lesion is a set of nested irregular blobs: the enhancing rim surrounds
the core, and both sit inside the edema. Contrast per tissue is chosen so
that the F analog shows the whole lesion best, T1c shows the enhancing rim
best, T2 shows the lesion moderately but confuses it with bright CSF, and T1
is only weakly informative.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import MODALITY_NAMES
from .tensor import FormatError, load_htf, save_htf

N_CLASSES = 4
EDEMA, CORE, ENHANCING = 1, 2, 3

# Tissue order: air, brain, csf, edema, core, enhancing.
TISSUE_MEANS = {
    "F":   (0.0, 1.00, 0.35, 2.10, 1.95, 1.90),
    "T1":  (0.0, 1.00, 0.30, 0.80, 0.70, 0.85),
    "T1c": (0.0, 1.00, 0.30, 0.95, 0.75, 2.50),
    "T2":  (0.0, 1.00, 2.00, 1.75, 1.85, 1.65),
}
# Gain applied to the smooth anatomical texture inside the head.
TEXTURE_GAIN = {"F": 0.12, "T1": 0.25, "T1c": 0.20, "T2": -0.15}
NOISE_SCALE = 0.15
QUANTILE = 0.001


@dataclass
class Case:
    case_id: str
    images: np.ndarray  # (N, H, W) float32
    labels: np.ndarray  # (H, W) int64
    available: tuple = (True, True, True, True)
    modality_names: tuple = MODALITY_NAMES
    norm_stats: dict = field(default_factory=dict)


def _blob(shape, center, radii, angle, rng, wobble=0.15):
    """Boolean mask of a rotated ellipse with a low-frequency wavy boundary."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / radii[1]
    v = (-s * dx + c * dy) / radii[0]
    theta = np.arctan2(v, u)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps = rng.uniform(0, wobble, size=3)
    rad = 1.0 + sum(a * np.sin((i + 2) * theta + p) for i, (a, p) in enumerate(zip(amps, phases)))
    return np.hypot(u, v) <= rad


def _lesion_labels(shape, head, rng, max_tries=50):
    h, w = shape
    size = min(h, w)
    rim = max(1, int(round(0.035 * size)))
    for _ in range(max_tries):
        r_out = rng.uniform(0.10, 0.20, size=2) * size
        cy = rng.uniform(0.28, 0.72) * h
        cx = rng.uniform(0.28, 0.72) * w
        angle = rng.uniform(0, np.pi)
        complete = _blob(shape, (cy, cx), r_out, angle, rng)
        r_core = r_out * rng.uniform(0.45, 0.65)
        off = rng.uniform(-0.15, 0.15, size=2) * r_out
        core = _blob(shape, (cy + off[0], cx + off[1]), r_core, angle + rng.uniform(-0.5, 0.5), rng, 0.1)
        inner = ndimage.binary_erosion(core, iterations=rim)
        if not (complete & ~core).any() or not inner.any() or not (core & ~inner).any():
            continue
        if (core & ~complete).any() or (complete & ~head).any():
            continue
        labels = np.zeros(shape, dtype=np.int64)
        labels[complete] = EDEMA
        labels[core] = ENHANCING
        labels[inner] = CORE
        return labels
    raise RuntimeError("could not place a valid nested lesion; geometry retries exhausted")


def generate_case(rng: np.random.Generator, height: int = 64, width: int = 64,
                  difficulty: float = 1.0, lesion: bool = True, case_id: str = "case") -> Case:
    """Draw one phantom. ``difficulty`` scales the additive Gaussian noise."""
    if height < 32 or width < 32:
        raise ValueError("phantoms need H, W >= 32")
    if difficulty < 0:
        raise ValueError("difficulty must be non-negative")
    shape = (height, width)
    head = _blob(shape, (height / 2 + rng.uniform(-1, 1), width / 2 + rng.uniform(-1, 1)),
                 (0.46 * height, 0.40 * width), rng.uniform(-0.2, 0.2), rng, 0.03)
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=0.06 * min(shape))
    texture /= texture.std() + 1e-12
    tissue = np.where(head, 1, 0)
    for _ in range(2):
        vc = (height * rng.uniform(0.42, 0.58), width * rng.uniform(0.40, 0.60))
        vr = np.array([rng.uniform(0.05, 0.09) * height, rng.uniform(0.02, 0.04) * width])
        tissue[_blob(shape, vc, vr, rng.uniform(-0.3, 0.3), rng, 0.05) & head] = 2
    labels = np.zeros(shape, dtype=np.int64)
    if lesion:
        labels = _lesion_labels(shape, head, rng)
        tissue = np.where(labels > 0, labels + 2, tissue)
    images = np.empty((len(MODALITY_NAMES),) + shape, dtype=np.float32)
    for m, name in enumerate(MODALITY_NAMES):
        img = np.asarray(TISSUE_MEANS[name])[tissue] + TEXTURE_GAIN[name] * texture * head
        noise = rng.standard_normal(shape)
        images[m] = img + NOISE_SCALE * difficulty * noise
    return Case(case_id, images, labels)


def quantile_bounds(values):
    """Low/high clipping points that are actual sample values.

    Using the order statistics at ``floor(q (n-1))`` and ``ceil((1-q)(n-1))``
    makes clipping idempotent: a clipped image has the same bounds again.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    return (float(np.quantile(values, QUANTILE, method="lower")),
            float(np.quantile(values, 1 - QUANTILE, method="higher")))


def normalize_image(img, stats=None):
    """Clip to the 0.001/0.999 quantiles, then standardize.

    With ``stats`` (``lo``, ``hi``, ``mean``, ``std``) the given statistics
    are applied instead of the image's own. Returns ``(normalized, stats)``.
    """
    x = np.asarray(img, dtype=np.float64)
    if stats is None:
        lo, hi = quantile_bounds(x)
        clipped = np.clip(x, lo, hi)
        mean, std = float(clipped.mean()), float(clipped.std())
        if not std > 0:
            raise ValueError("cannot normalize a zero-variance image")
        stats = {"lo": lo, "hi": hi, "mean": mean, "std": std}
    clipped = np.clip(x, stats["lo"], stats["hi"])
    return ((clipped - stats["mean"]) / stats["std"]).astype(np.float32), stats


def normalize_case(case: Case, stats: dict | None = None) -> Case:
    """Per-modality normalization, with the case's own statistics by default."""
    images = np.empty_like(case.images, dtype=np.float32)
    used = {}
    for m, name in enumerate(case.modality_names):
        images[m], used[name] = normalize_image(case.images[m], None if stats is None else stats[name])
    return replace(case, images=images, norm_stats=used)


def derive_binary_maps(labels) -> dict:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise ValueError("labels must lie in {0, 1, 2, 3}")
    return {"complete": labels >= 1, "core": labels >= 2, "enhancing": labels == 3}


def check_nesting(labels) -> bool:
    maps = derive_binary_maps(labels)
    return bool(not (maps["enhancing"] & ~maps["core"]).any()
                and not (maps["core"] & ~maps["complete"]).any())


# --- dataset on disk --------------------------------------------------------

MANIFEST_VERSION = 1
SPLITS = ("train", "valid", "test")


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    dims: tuple
    splits: dict
    normalization: str = "case"
    stats: dict = field(default_factory=dict)
    difficulty: float = 1.0
    modality_names: tuple = MODALITY_NAMES

    def to_json(self) -> dict:
        return {"version": MANIFEST_VERSION, "seed": self.seed, "dims": list(self.dims),
                "splits": {k: list(v) for k, v in self.splits.items()},
                "normalization": self.normalization, "stats": self.stats,
                "difficulty": self.difficulty, "modalities": list(self.modality_names)}


def split_sizes(n: int) -> tuple:
    n_train = int(np.floor(0.7 * n))
    n_valid = int(np.floor(0.1 * n))
    return n_train, n_valid, n - n_train - n_valid


def case_rng(seed: int, index: int) -> np.random.Generator:
    """Per-case generator derived from the master seed and the case index."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _dataset_stats(cases):
    stats = {}
    for m, name in enumerate(MODALITY_NAMES):
        values = np.concatenate([c.images[m].ravel() for c in cases]).astype(np.float64)
        lo, hi = quantile_bounds(values)
        clipped = np.clip(values, lo, hi)
        stats[name] = {"lo": lo, "hi": hi, "mean": float(clipped.mean()), "std": float(clipped.std())}
    return stats


def generate_cases(n_cases: int, seed: int, height: int = 64, width: int = 64,
                   difficulty: float = 1.0, normalization: str = "case"):
    """Generate and normalize ``n_cases`` phantoms; returns ``(cases, splits, stats)``."""
    if n_cases < 10:
        raise ValueError("need at least 10 cases to form train/valid/test splits")
    raw = [generate_case(case_rng(seed, i), height, width, difficulty, case_id=f"case_{i:04d}")
           for i in range(n_cases)]
    n_train, n_valid, _ = split_sizes(n_cases)
    ids = [c.case_id for c in raw]
    splits = {"train": ids[:n_train], "valid": ids[n_train:n_train + n_valid],
              "test": ids[n_train + n_valid:]}
    if normalization == "case":
        cases = [normalize_case(c) for c in raw]
        stats = {c.case_id: c.norm_stats for c in cases}
    elif normalization == "dataset":
        stats = _dataset_stats(raw[:n_train])
        cases = [normalize_case(c, stats) for c in raw]
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return cases, splits, stats


def build_dataset(out_dir, n_cases: int, seed: int, height: int = 64, width: int = 64,
                  difficulty: float = 1.0, normalization: str = "case") -> DatasetManifest:
    """Write ``manifest.json`` and ``<split>/<case_id>/{mod_*.htf,label.htf}``."""
    root = Path(out_dir)
    cases, splits, stats = generate_cases(n_cases, seed, height, width, difficulty, normalization)
    by_id = {c.case_id: c for c in cases}
    for split, ids in splits.items():
        for cid in ids:
            save_case(by_id[cid], root / split / cid)
    manifest = DatasetManifest(root, seed, (height, width), splits, normalization, stats, difficulty)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
    return manifest


def save_case(case: Case, case_dir) -> None:
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    for m, name in enumerate(case.modality_names):
        save_htf(np.ascontiguousarray(case.images[m]), case_dir / f"mod_{name}.htf")
    save_htf(case.labels.astype(np.float32), case_dir / "label.htf")


def load_case(case_dir, modality_names=MODALITY_NAMES) -> Case:
    case_dir = Path(case_dir)
    images = np.stack([load_htf(case_dir / f"mod_{name}.htf") for name in modality_names])
    label_path = case_dir / "label.htf"
    if label_path.exists():
        labels = load_htf(label_path).astype(np.int64)
    else:
        labels = np.zeros(images.shape[1:], dtype=np.int64)
    return Case(case_dir.name, images.astype(np.float32), labels,
                (True,) * len(modality_names), tuple(modality_names))


def read_manifest(root) -> DatasetManifest:
    root = Path(root)
    try:
        with open(root / "manifest.json") as fh:
            data = json.load(fh)
        if data.get("version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {data.get('version')}")
        splits = {s: list(data["splits"][s]) for s in SPLITS}
        return DatasetManifest(root, int(data["seed"]), tuple(data["dims"]), splits,
                               data.get("normalization", "case"), data.get("stats", {}),
                               float(data.get("difficulty", 1.0)),
                               tuple(data.get("modalities", MODALITY_NAMES)))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed manifest in {root}: {exc}") from exc


def load_dataset(root, split: str | None = None):
    """Yield cases in manifest order, either for one split or for all splits."""
    manifest = read_manifest(root)
    for s in ([split] if split else SPLITS):
        for cid in manifest.splits[s]:
            yield load_case(Path(root) / s / cid, manifest.modality_names)


def load_splits(root) -> dict:
    return {s: list(load_dataset(root, s)) for s in SPLITS}


def modality_contrast(cases, region: str = "complete") -> dict:
    """Mean absolute intensity difference between a lesion region and healthy tissue."""
    out = {name: [] for name in MODALITY_NAMES}
    for c in cases:
        region_mask = derive_binary_maps(c.labels)[region]
        healthy = c.labels == 0
        if not region_mask.any():
            continue
        for m, name in enumerate(c.modality_names):
            out[name].append(abs(c.images[m][region_mask].mean() - c.images[m][healthy].mean()))
    return {k: float(np.mean(v)) for k, v in out.items()}

