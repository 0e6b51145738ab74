"""Multi-domain image data: a procedural synthetic benchmark, a folder loader
for real datasets, leave-one-domain-out splits, and seeded batch iteration.

Images are float32 arrays of shape (channels, H, W) normalized to [-1, 1].
The synthetic benchmark encodes the domain shift in backgrounds (gray level,
color cast, sinusoidal texture) while the class is carried by the rendered
shape alone, so class evidence is domain-invariant by construction.
"""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, DatasetError, ValidationError


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    class_label: int
    domain_label: int


class MultiDomainDataset:
    """Immutable array-backed dataset; every sample carries a class label and
    a domain label indexing into domain_names.
    """

    def __init__(self, images, class_labels, domain_labels, num_classes,
                 domain_names, name="dataset"):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.class_labels = np.asarray(class_labels, dtype=np.int64)
        self.domain_labels = np.asarray(domain_labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        self.domain_names = tuple(str(n) for n in domain_names)
        self.name = str(name)
        n = len(self.images)
        if self.images.ndim != 4:
            raise ValidationError(
                f"images must be a (N, ch, H, W) array, got {self.images.ndim} dims")
        if len(self.class_labels) != n or len(self.domain_labels) != n:
            raise ValidationError(
                f"label arrays must match image count {n}, got "
                f"{len(self.class_labels)} class / {len(self.domain_labels)} domain labels")

    @property
    def total_domains(self):
        return len(self.domain_names)

    @property
    def channels(self):
        return self.images.shape[1]

    @property
    def image_size(self):
        return self.images.shape[2]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Sample:
        return Sample(image=self.images[i],
                      class_label=int(self.class_labels[i]),
                      domain_label=int(self.domain_labels[i]))

    def validate(self):
        """Checks the full invariant set; intended for nonempty datasets."""
        if len(self) == 0:
            raise ValidationError("dataset is empty")
        if not np.all(np.isfinite(self.images)):
            raise ValidationError("images contain non-finite values")
        if self.images.min() < -1.0 or self.images.max() > 1.0:
            raise ValidationError("images must be normalized to [-1, 1]")
        if self.class_labels.min() < 0 or self.class_labels.max() >= self.num_classes:
            raise ValidationError(
                f"class labels must lie in [0, {self.num_classes})")
        if self.domain_labels.min() < 0 or self.domain_labels.max() >= self.total_domains:
            raise ValidationError(
                f"domain labels must lie in [0, {self.total_domains})")
        present = set(np.unique(self.domain_labels).tolist())
        missing = [self.domain_names[d] for d in range(self.total_domains)
                   if d not in present]
        if missing:
            raise ValidationError(f"domains without samples: {missing}")
        return self


@dataclass(frozen=True)
class DomainStyle:
    """Background recipe for one synthetic domain."""

    base_color: tuple
    texture_freq: float
    texture_angle: float
    texture_amp: float


def default_domain_styles(num_domains):
    """Spreads domains over distinct gray levels with rotating color casts and
    per-domain texture frequency/orientation.  Channel sums of the cast cancel,
    so each domain's mean background level stays at its gray level.
    """
    styles = []
    for d in range(num_domains):
        level = 0.0 if num_domains == 1 else -0.55 + 1.1 * d / (num_domains - 1)
        hue = 2.0 * math.pi * d / num_domains
        base = tuple(level + 0.22 * math.cos(hue + k * 2.0 * math.pi / 3.0)
                     for k in range(3))
        styles.append(DomainStyle(
            base_color=base,
            texture_freq=2.0 + d,
            texture_angle=math.pi * d / num_domains,
            texture_amp=0.12,
        ))
    return tuple(styles)


@dataclass
class SynthSpec:
    """Recipe for the procedural benchmark; domain_style defaults per domain."""

    num_classes: int = 4
    num_domains: int = 4
    image_size: int = 16
    samples_per_domain_per_class: int = 200
    seed: int = 0
    domain_style: tuple = None

    def resolved_styles(self):
        if self.domain_style is None:
            return default_domain_styles(self.num_domains)
        return tuple(self.domain_style)

    def validate(self):
        if not isinstance(self.num_classes, int) or not 2 <= self.num_classes <= len(SHAPES):
            raise ConfigurationError(
                f"num_classes must be an integer in [2, {len(SHAPES)}], got {self.num_classes!r}")
        if not isinstance(self.num_domains, int) or self.num_domains < 3:
            raise ConfigurationError(f"num_domains must be an integer >= 3, got {self.num_domains!r}")
        if not isinstance(self.image_size, int) or self.image_size < 8 or self.image_size % 4:
            raise ConfigurationError(
                f"image_size must be an integer >= 8 divisible by 4, got {self.image_size!r}")
        if not isinstance(self.samples_per_domain_per_class, int) or self.samples_per_domain_per_class < 1:
            raise ConfigurationError(
                f"samples_per_domain_per_class must be a positive integer, "
                f"got {self.samples_per_domain_per_class!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}")
        styles = self.resolved_styles()
        if len(styles) != self.num_domains:
            raise ConfigurationError(
                f"domain_style must provide {self.num_domains} entries, got {len(styles)}")


def _disk(dx, dy, r):
    return dx * dx + dy * dy <= r * r


def _square(dx, dy, r):
    return np.maximum(np.abs(dx), np.abs(dy)) <= 0.9 * r


def _triangle(dx, dy, r):
    return (dy >= -r) & (dy <= 0.7 * r) & (np.abs(dx) <= 0.55 * (dy + r))


def _cross(dx, dy, r):
    arm = 0.35 * r
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
           ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def _ring(dx, dy, r):
    d2 = dx * dx + dy * dy
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def _diamond(dx, dy, r):
    return np.abs(dx) + np.abs(dy) <= 1.2 * r


SHAPES = (_disk, _square, _triangle, _cross, _ring, _diamond)


def generate_synth_dataset(spec: SynthSpec) -> MultiDomainDataset:
    """Renders the benchmark deterministically from the spec's seed.

    Per sample: a domain background (base color + oriented sinusoidal texture
    at a random phase) with the class shape painted at a random position and
    scale in a random gray tone, plus pixel noise.
    """
    spec.validate()
    styles = spec.resolved_styles()
    size = spec.image_size
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    images, class_labels, domain_labels = [], [], []
    for d in range(spec.num_domains):
        style = styles[d]
        ux = math.cos(style.texture_angle)
        uy = math.sin(style.texture_angle)
        wave_arg = 2.0 * math.pi * style.texture_freq * (ux * xx + uy * yy) / size
        for c in range(spec.num_classes):
            shape_fn = SHAPES[c]
            for _ in range(spec.samples_per_domain_per_class):
                phase = rng.uniform(0.0, 2.0 * math.pi)
                radius = rng.uniform(0.15, 0.24) * size
                cx = rng.uniform(0.3, 0.7) * size
                cy = rng.uniform(0.3, 0.7) * size
                sign = 1.0 if rng.uniform() < 0.5 else -1.0
                gray = sign * rng.uniform(0.55, 0.95)
                tint = rng.uniform(-0.1, 0.1, size=3)

                texture = style.texture_amp * np.sin(wave_arg + phase)
                img = np.stack([style.base_color[ch] + texture for ch in range(3)])
                mask = shape_fn(xx - cx, yy - cy, radius)
                for ch in range(3):
                    img[ch][mask] = gray + tint[ch]
                img += rng.normal(0.0, 0.05, size=img.shape)
                np.clip(img, -1.0, 1.0, out=img)

                images.append(img.astype(np.float32))
                class_labels.append(c)
                domain_labels.append(d)

    return MultiDomainDataset(
        images=np.stack(images),
        class_labels=class_labels,
        domain_labels=domain_labels,
        num_classes=spec.num_classes,
        domain_names=tuple(f"domain{d}" for d in range(spec.num_domains)),
        name="synth",
    ).validate()


def load_folder_dataset(root, image_size=64) -> MultiDomainDataset:
    """Loads `root/<domain>/<class>/<images>` with lexicographic label order.

    Images are resized bilinearly to image_size and normalized as x/127.5 - 1.
    """
    from PIL import Image, UnidentifiedImageError

    if not isinstance(image_size, int) or image_size < 8 or image_size % 4:
        raise ConfigurationError(
            f"image_size must be an integer >= 8 divisible by 4, got {image_size!r}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DatasetError(f"no domain directories under {root}")

    class_names = sorted({p.name for d in domain_dirs for p in d.iterdir() if p.is_dir()})
    if not class_names:
        raise DatasetError(f"no class directories under {root}")
    class_index = {n: i for i, n in enumerate(class_names)}

    images, class_labels, domain_labels = [], [], []
    for d_idx, domain_dir in enumerate(domain_dirs):
        class_dirs = sorted(p for p in domain_dir.iterdir() if p.is_dir())
        if not class_dirs:
            raise DatasetError(f"domain folder {domain_dir} has no class directories")
        for class_dir in class_dirs:
            files = sorted(p for p in class_dir.iterdir() if p.is_file())
            if not files:
                raise DatasetError(f"class folder {class_dir} is empty")
            for path in files:
                try:
                    with Image.open(path) as im:
                        im = im.convert("RGB").resize(
                            (image_size, image_size), Image.BILINEAR)
                        arr = np.asarray(im, dtype=np.float32)
                except (UnidentifiedImageError, OSError) as exc:
                    raise DatasetError(f"cannot decode image {path}: {exc}") from exc
                images.append(arr.transpose(2, 0, 1) / 127.5 - 1.0)
                class_labels.append(class_index[class_dir.name])
                domain_labels.append(d_idx)

    return MultiDomainDataset(
        images=np.stack(images),
        class_labels=class_labels,
        domain_labels=domain_labels,
        num_classes=len(class_names),
        domain_names=tuple(d.name for d in domain_dirs),
        name=root.name,
    ).validate()


@dataclass
class SplitSpec:
    """Leave-one-domain-out split request.

    val_fraction carves a stratified held-in validation set out of the source
    pool; the seed only affects which samples land in that validation set.
    """

    target_domain: str = ""
    val_fraction: float = 0.0
    seed: int = 0

    def validate(self):
        if not isinstance(self.val_fraction, (int, float)) or \
                not 0.0 <= float(self.val_fraction) < 0.5:
            raise ConfigurationError(
                f"val_fraction must lie in [0, 0.5), got {self.val_fraction!r}")


def _subset(dataset, indices, domain_names, domain_map=None):
    domain_labels = dataset.domain_labels[indices]
    if domain_map is not None:
        domain_labels = np.array([domain_map[d] for d in domain_labels], dtype=np.int64)
    return MultiDomainDataset(
        images=dataset.images[indices],
        class_labels=dataset.class_labels[indices],
        domain_labels=domain_labels,
        num_classes=dataset.num_classes,
        domain_names=domain_names,
        name=dataset.name,
    )


def _stratified_take(class_labels, domain_labels, fraction, rng):
    """Picks ~fraction of the indices, proportionally per (domain, class) cell
    via largest-remainder rounding; returns a sorted index array.
    """
    n = len(class_labels)
    target_total = int(round(n * fraction))
    cells = []
    for d in np.unique(domain_labels):
        for c in np.unique(class_labels):
            idx = np.nonzero((domain_labels == d) & (class_labels == c))[0]
            if len(idx):
                cells.append(idx)
    exact = [len(idx) * fraction for idx in cells]
    take = [int(math.floor(e)) for e in exact]
    remainders = sorted(range(len(cells)), key=lambda i: (-(exact[i] - take[i]), i))
    shortfall = target_total - sum(take)
    for i in remainders[:max(shortfall, 0)]:
        take[i] += 1
    chosen = [rng.choice(idx, size=k, replace=False)
              for idx, k in zip(cells, take) if k]
    if not chosen:
        return np.array([], dtype=np.int64)
    return np.sort(np.concatenate(chosen))


def make_splits(dataset: MultiDomainDataset, spec: SplitSpec):
    """Returns (train, held_in_val, test) partitioning the dataset.

    test holds exactly the target domain.  train and held_in_val keep only the
    source domains, relabeled 0..K-1 in their original name order so they can
    feed domain-conditioned models directly.
    """
    spec.validate()
    if spec.target_domain not in dataset.domain_names:
        raise ValidationError(
            f"unknown target domain {spec.target_domain!r}; "
            f"available: {list(dataset.domain_names)}")
    target_idx = dataset.domain_names.index(spec.target_domain)
    source_names = tuple(n for n in dataset.domain_names if n != spec.target_domain)
    domain_map = {}
    for old in range(dataset.total_domains):
        if old != target_idx:
            domain_map[old] = len(domain_map)

    all_idx = np.arange(len(dataset))
    test_idx = all_idx[dataset.domain_labels == target_idx]
    source_idx = all_idx[dataset.domain_labels != target_idx]

    rng = np.random.default_rng(spec.seed)
    val_pos = _stratified_take(dataset.class_labels[source_idx],
                               dataset.domain_labels[source_idx],
                               float(spec.val_fraction), rng)
    val_idx = source_idx[val_pos]
    train_idx = np.setdiff1d(source_idx, val_idx)

    train = _subset(dataset, train_idx, source_names, domain_map)
    held_in_val = _subset(dataset, val_idx, source_names, domain_map)
    test = _subset(dataset, test_idx, (spec.target_domain,),
                   {target_idx: 0})
    return train, held_in_val, test


def batch_iterator(split, batch_size, seed, epoch):
    """Yields (images, class_labels, domain_labels) tensors over a seeded
    permutation of the split; the last partial batch is kept.
    """
    if not isinstance(batch_size, int) or batch_size < 1:
        raise ConfigurationError(f"batch_size must be a positive integer, got {batch_size!r}")
    perm = np.random.default_rng([seed, epoch]).permutation(len(split))
    for start in range(0, len(perm), batch_size):
        idx = perm[start:start + batch_size]
        yield (torch.from_numpy(split.images[idx]),
               torch.from_numpy(split.class_labels[idx]),
               torch.from_numpy(split.domain_labels[idx]))


def save_dataset(dataset: MultiDomainDataset, path, provenance=None):
    """Caches a dataset as .npz plus a JSON sidecar (same stem, .json)."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    np.savez_compressed(path, images=dataset.images,
                        class_labels=dataset.class_labels,
                        domain_labels=dataset.domain_labels)
    sidecar = {
        "name": dataset.name,
        "num_classes": dataset.num_classes,
        "domain_names": list(dataset.domain_names),
        "provenance": provenance,
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return path


def load_dataset(path) -> MultiDomainDataset:
    """Loads a dataset cached by save_dataset."""
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    try:
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset sidecar {sidecar_path}: {exc}") from exc
    try:
        arrays = np.load(path)
        dataset = MultiDomainDataset(
            images=arrays["images"],
            class_labels=arrays["class_labels"],
            domain_labels=arrays["domain_labels"],
            num_classes=sidecar["num_classes"],
            domain_names=sidecar["domain_names"],
            name=sidecar.get("name", path.stem),
        )
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot load dataset {path}: {exc}") from exc
    return dataset.validate()


def spec_provenance(spec: SynthSpec) -> dict:
    """JSON-ready description of a SynthSpec, styles resolved."""
    record = asdict(spec)
    record["domain_style"] = [asdict(s) for s in spec.resolved_styles()]
    return record
