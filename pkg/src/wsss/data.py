"""Synthetic forest-tile corpus: rectangular stands over a cleared background."""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import wsst

CLASS_NAMES = ("Cleared", "Pine", "Spruce", "Beech", "Oak")
SPLITS = ("train", "val", "test")
FORMAT_VERSION = 1

# per-class mean reflectance in (R, G, B, NIR); NIR carries the widest spread
DEFAULT_SIGNATURES = (
    (0.55, 0.50, 0.40, 0.20),
    (0.20, 0.30, 0.20, 0.45),
    (0.10, 0.22, 0.15, 0.70),
    (0.30, 0.45, 0.25, 0.95),
    (0.40, 0.35, 0.30, 1.20),
)


@dataclass
class SyntheticConfig:
    image_size: int = 64
    channels: int = 4
    n_classes: int = 5
    n_total: int = 856
    min_regions: int = 1
    max_regions: int = 4
    min_side: float = 0.3
    max_side: float = 0.7
    min_region_fraction: float = 0.1
    full_cover_prob: float = 0.4
    region_classes: tuple = (0, 1, 2, 3, 4)
    signatures: tuple = DEFAULT_SIGNATURES
    noise_sigma: float = 0.05
    max_tries: int = 1000

    def __post_init__(self):
        self.region_classes = tuple(int(c) for c in self.region_classes)
        self.signatures = tuple(tuple(float(v) for v in s) for s in self.signatures)
        self.validate()

    def validate(self):
        if self.image_size < 1 or self.n_total < 0:
            raise ValueError("image_size must be >= 1 and n_total >= 0")
        if len(self.signatures) != self.n_classes:
            raise ValueError(f"need {self.n_classes} class signatures, got {len(self.signatures)}")
        if any(len(s) != self.channels for s in self.signatures):
            raise ValueError(f"every signature needs {self.channels} channel values")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ValueError(f"region count range [{self.min_regions}, {self.max_regions}] is invalid")
        if not 0 < self.min_side <= self.max_side <= 1:
            raise ValueError(f"side fraction range [{self.min_side}, {self.max_side}] is invalid")
        if not self.region_classes or any(not 0 <= c < self.n_classes for c in self.region_classes):
            raise ValueError(f"region classes {self.region_classes} outside [0, {self.n_classes})")
        if not 0 <= self.full_cover_prob <= 1:
            raise ValueError(f"full_cover_prob {self.full_cover_prob} must lie in [0, 1]")
        if not 0 <= self.min_region_fraction <= 1:
            raise ValueError(f"min_region_fraction {self.min_region_fraction} must lie in [0, 1]")
        sig = np.asarray(self.signatures)
        for a in range(self.n_classes):
            for b in range(a + 1, self.n_classes):
                if np.max(np.abs(sig[a] - sig[b])) < 4 * self.noise_sigma:
                    raise ValueError(
                        f"classes {a} and {b} are closer than 4 sigma in every channel"
                    )

    def to_dict(self):
        d = asdict(self)
        d["region_classes"] = list(self.region_classes)
        d["signatures"] = [list(s) for s in self.signatures]
        return d


@dataclass
class Sample:
    image: np.ndarray
    labels: np.ndarray
    reference: np.ndarray = None


@dataclass
class Dataset:
    config: SyntheticConfig
    seed: int
    splits: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.splits[name]


def split_sizes(total):
    """70/15/15 split: val and test round down, the remainder goes to train."""
    val = int(total * 15 // 100)
    test = val
    return total - val - test, val, test


def presence(reference, n_classes):
    return (np.bincount(reference.ravel(), minlength=n_classes)[:n_classes] > 0).astype(np.uint8)


def _draw_reference(cfg, rng):
    size = cfg.image_size
    lo = max(1, int(round(cfg.min_side * size)))
    hi = max(lo, int(round(cfg.max_side * size)))
    min_pixels = cfg.min_region_fraction * size * size
    stands = [c for c in cfg.region_classes if c != 0] or list(cfg.region_classes)
    for _ in range(cfg.max_tries):
        ref = np.zeros((size, size), dtype=np.uint8)
        for k in range(rng.integers(cfg.min_regions, cfg.max_regions + 1)):
            if k == 0 and rng.random() < cfg.full_cover_prob:
                # a stand filling the tile; later regions are cut into it
                ref[:] = rng.choice(stands)
                continue
            h = rng.integers(lo, hi + 1)
            w = rng.integers(lo, hi + 1)
            top = rng.integers(0, size - h + 1)
            left = rng.integers(0, size - w + 1)
            ref[top:top + h, left:left + w] = rng.choice(cfg.region_classes if k else stands)
        counts = np.bincount(ref.ravel(), minlength=cfg.n_classes)
        present = counts[counts > 0]
        if present.min() >= min_pixels:
            return ref
    raise ValueError(
        f"could not place regions satisfying min_region_fraction={cfg.min_region_fraction} "
        f"after {cfg.max_tries} tries (sides {cfg.min_side}-{cfg.max_side}, "
        f"{cfg.min_regions}-{cfg.max_regions} regions)"
    )


def make_sample(cfg, seed, split_index, index):
    rng = np.random.default_rng([seed, split_index, index])
    ref = _draw_reference(cfg, rng)
    sig = np.asarray(cfg.signatures, dtype=np.float32)
    image = sig[ref].transpose(2, 0, 1)
    noise = rng.normal(0.0, cfg.noise_sigma, size=image.shape).astype(np.float32)
    image = (image + noise).astype(np.float32)
    return Sample(image=image, labels=presence(ref, cfg.n_classes), reference=ref)


def generate(config=None, seed=0):
    """Draw train/val/test splits; each sample is seeded by (seed, split, index)."""
    cfg = config or SyntheticConfig()
    cfg.validate()
    sizes = dict(zip(SPLITS, split_sizes(cfg.n_total)))
    ds = Dataset(config=cfg, seed=seed)
    for si, name in enumerate(SPLITS):
        ds.splits[name] = [make_sample(cfg, seed, si, i) for i in range(sizes[name])]
    return ds


def save_dataset(ds, directory):
    directory = Path(directory)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": ds.seed,
        "config": ds.config.to_dict(),
        "class_names": list(CLASS_NAMES[: ds.config.n_classes]),
        "splits": {},
    }
    for name in SPLITS:
        entries = []
        sub = directory / "samples" / name
        sub.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(ds.splits.get(name, [])):
            entry = {
                "image": f"samples/{name}/{i:05d}.img.wsst",
                "labels": f"samples/{name}/{i:05d}.lbl.wsst",
            }
            wsst.save(directory / entry["image"], s.image)
            wsst.save(directory / entry["labels"], s.labels.astype(np.uint8))
            if s.reference is not None:
                entry["reference"] = f"samples/{name}/{i:05d}.ref.wsst"
                wsst.save(directory / entry["reference"], s.reference.astype(np.uint8))
            entries.append(entry)
        manifest["splits"][name] = entries
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory, splits=SPLITS):
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: unsupported format version {manifest.get('format_version')}")
    cfg = SyntheticConfig(**manifest["config"])
    ds = Dataset(config=cfg, seed=manifest["seed"])
    size = cfg.image_size
    for name in splits:
        samples = []
        for entry in manifest["splits"].get(name, []):
            image = wsst.load(directory / entry["image"])
            labels = wsst.load(directory / entry["labels"])
            ref = wsst.load(directory / entry["reference"]) if "reference" in entry else None
            if image.shape != (cfg.channels, size, size):
                raise ValueError(f"{directory / entry['image']}: shape {image.shape} does not match config")
            if labels.shape != (cfg.n_classes,):
                raise ValueError(f"{directory / entry['labels']}: shape {labels.shape} does not match config")
            if ref is not None and ref.shape != (size, size):
                raise ValueError(f"{directory / entry['reference']}: shape {ref.shape} does not match config")
            samples.append(Sample(image=image, labels=labels, reference=ref))
        ds.splits[name] = samples
    return ds
