"""Synthetic benchmark generation, folder loading, leave-one-domain-out
splits, and seeded batching."""

import hashlib
import json

import numpy as np
import pytest
import torch
from PIL import Image

from nasood.datasets import (
    MultiDomainDataset,
    SplitSpec,
    SynthSpec,
    batch_iterator,
    default_domain_styles,
    generate_synth_dataset,
    load_dataset,
    load_folder_dataset,
    make_splits,
    save_dataset,
    spec_provenance,
)
from nasood.errors import ConfigurationError, DatasetError, ValidationError

# Rendering is pinned: any change to the procedural recipe or its RNG
# consumption shows up as a checksum mismatch here.
SMALL_SPEC = SynthSpec(samples_per_domain_per_class=5, seed=3)
SMALL_CHECKSUM = "62ddd4261bcbcdc7d93e64c17d5c17d3704de059181dfe7f3ed2f3868b261434"


def _checksum(ds):
    h = hashlib.sha256()
    h.update(ds.images.tobytes())
    h.update(ds.class_labels.tobytes())
    h.update(ds.domain_labels.tobytes())
    return h.hexdigest()


def _image_keys(ds):
    return {ds.images[i].tobytes() for i in range(len(ds))}


# --- synthesis -----------------------------------------------------------


def test_synth_spec_validation():
    for bad in (dict(num_classes=1), dict(num_classes=7), dict(num_domains=2),
                dict(image_size=10), dict(image_size=4),
                dict(samples_per_domain_per_class=0), dict(seed=-1)):
        with pytest.raises(ConfigurationError):
            SynthSpec(**bad).validate()
    with pytest.raises(ConfigurationError):
        SynthSpec(domain_style=default_domain_styles(3)).validate()


def test_generation_shapes_and_labels(tiny_dataset):
    ds = tiny_dataset
    assert len(ds) == 4 * 4 * 6
    assert ds.images.shape == (96, 3, 16, 16)
    assert ds.images.dtype == np.float32
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    assert set(np.unique(ds.class_labels)) == {0, 1, 2, 3}
    assert set(np.unique(ds.domain_labels)) == {0, 1, 2, 3}
    assert ds.domain_names == ("domain0", "domain1", "domain2", "domain3")
    sample = ds[5]
    assert sample.image.shape == (3, 16, 16)


def test_generation_frozen_checksum():
    assert _checksum(generate_synth_dataset(SMALL_SPEC)) == SMALL_CHECKSUM


def test_generation_deterministic_and_seed_sensitive():
    a = generate_synth_dataset(SMALL_SPEC)
    b = generate_synth_dataset(SynthSpec(samples_per_domain_per_class=5, seed=3))
    c = generate_synth_dataset(SynthSpec(samples_per_domain_per_class=5, seed=4))
    assert _checksum(a) == _checksum(b)
    assert _checksum(a) != _checksum(c)


def test_default_styles_color_cast_cancels():
    styles = default_domain_styles(5)
    assert len(styles) == 5
    levels = []
    for style in styles:
        level = sum(style.base_color) / 3.0
        levels.append(level)
    assert levels == sorted(levels)
    assert abs(levels[0] + 0.55) < 1e-9 and abs(levels[-1] - 0.55) < 1e-9


def test_dataset_validate_rejects_broken_data():
    ok = generate_synth_dataset(SMALL_SPEC)
    with pytest.raises(ValidationError):
        MultiDomainDataset(ok.images, ok.class_labels[:-1], ok.domain_labels,
                           4, ok.domain_names)
    bad = MultiDomainDataset(ok.images * 3.0, ok.class_labels, ok.domain_labels,
                             4, ok.domain_names)
    with pytest.raises(ValidationError, match="normalized"):
        bad.validate()
    missing = MultiDomainDataset(ok.images, ok.class_labels,
                                 np.zeros_like(ok.domain_labels), 4, ok.domain_names)
    with pytest.raises(ValidationError, match="without samples"):
        missing.validate()


# --- splits --------------------------------------------------------------


@pytest.mark.property
def test_splits_partition_the_dataset(tiny_dataset):
    train, val, test = make_splits(tiny_dataset, SplitSpec(
        target_domain="domain2", val_fraction=0.25, seed=1))
    assert len(train) + len(val) + len(test) == len(tiny_dataset)
    assert test.domain_names == ("domain2",)
    assert len(test) == 4 * 6

    all_keys = _image_keys(tiny_dataset)
    train_keys, val_keys, test_keys = map(_image_keys, (train, val, test))
    assert train_keys | val_keys | test_keys == all_keys
    assert not (train_keys & val_keys)
    assert not (train_keys & test_keys)
    assert not (val_keys & test_keys)


@pytest.mark.property
def test_splits_isolate_the_target_domain(tiny_dataset):
    """No image from the held-out domain may appear in train or val."""
    target_idx = tiny_dataset.domain_names.index("domain1")
    target_keys = {tiny_dataset.images[i].tobytes()
                   for i in range(len(tiny_dataset))
                   if tiny_dataset.domain_labels[i] == target_idx}
    train, val, _ = make_splits(tiny_dataset, SplitSpec(
        target_domain="domain1", val_fraction=0.2, seed=0))
    for split in (train, val):
        assert "domain1" not in split.domain_names
        assert not (_image_keys(split) & target_keys)


def test_splits_relabel_sources_compactly(tiny_dataset):
    train, _, test = make_splits(tiny_dataset, SplitSpec(target_domain="domain1"))
    assert train.domain_names == ("domain0", "domain2", "domain3")
    assert set(np.unique(train.domain_labels)) == {0, 1, 2}
    assert set(np.unique(test.domain_labels)) == {0}


def test_splits_val_fraction_stratified(tiny_dataset):
    _, val, _ = make_splits(tiny_dataset, SplitSpec(
        target_domain="domain3", val_fraction=0.2, seed=5))
    # 3 source domains x 4 classes x 6 samples: round(72 * 0.2) = 14 total,
    # largest-remainder rounding gives every cell 1 and two cells 2.
    assert len(val) == 14
    counts = [int(((val.domain_labels == d) & (val.class_labels == c)).sum())
              for d in range(3) for c in range(4)]
    assert sorted(counts) == [1] * 10 + [2] * 2


def test_splits_seed_moves_only_val_membership(tiny_dataset):
    spec = dict(target_domain="domain0", val_fraction=0.25)
    t1, v1, te1 = make_splits(tiny_dataset, SplitSpec(seed=1, **spec))
    t2, v2, te2 = make_splits(tiny_dataset, SplitSpec(seed=2, **spec))
    assert _image_keys(te1) == _image_keys(te2)
    assert _image_keys(t1) | _image_keys(v1) == _image_keys(t2) | _image_keys(v2)
    assert _image_keys(v1) != _image_keys(v2)


def test_splits_unknown_target(tiny_dataset):
    with pytest.raises(ValidationError, match="unknown target"):
        make_splits(tiny_dataset, SplitSpec(target_domain="domain9"))
    with pytest.raises(ConfigurationError):
        make_splits(tiny_dataset, SplitSpec(target_domain="domain0", val_fraction=0.5))


# --- batching ------------------------------------------------------------


def test_batch_iterator_covers_every_sample_once(source_pool):
    seen = []
    for images, labels, domains in batch_iterator(source_pool, 13, seed=0, epoch=0):
        assert isinstance(images, torch.Tensor) and images.dtype == torch.float32
        assert labels.dtype == torch.int64 and domains.dtype == torch.int64
        seen.extend(img.numpy().tobytes() for img in images)
    assert len(seen) == len(source_pool)
    assert set(seen) == _image_keys(source_pool)


def test_batch_iterator_partial_batch_and_sizes(source_pool):
    sizes = [len(labels) for _, labels, _ in batch_iterator(source_pool, 50, 0, 0)]
    assert sizes == [50, 22]


def _order(split, batch_size, seed, epoch):
    return [labels.tolist() for _, labels, _ in
            batch_iterator(split, batch_size, seed, epoch)]


def test_batch_iterator_seeded_permutation(source_pool):
    assert _order(source_pool, 16, 3, 0) == _order(source_pool, 16, 3, 0)
    assert _order(source_pool, 16, 3, 0) != _order(source_pool, 16, 3, 1)
    assert _order(source_pool, 16, 3, 0) != _order(source_pool, 16, 4, 0)


def test_batch_iterator_rejects_bad_batch_size(source_pool):
    for bad in (0, -1, 2.5):
        with pytest.raises(ConfigurationError):
            list(batch_iterator(source_pool, bad, 0, 0))


# --- persistence ---------------------------------------------------------


def test_save_load_round_trip(tmp_path, tiny_dataset):
    path = save_dataset(tiny_dataset, tmp_path / "bench",
                        provenance=spec_provenance(SMALL_SPEC))
    assert path.suffix == ".npz"
    sidecar = json.loads(path.with_suffix(".json").read_text())
    assert sidecar["num_classes"] == 4
    assert sidecar["provenance"]["seed"] == SMALL_SPEC.seed
    back = load_dataset(path)
    assert _checksum(back) == _checksum(tiny_dataset)
    assert back.domain_names == tiny_dataset.domain_names


def test_load_dataset_missing_sidecar(tmp_path, tiny_dataset):
    path = save_dataset(tiny_dataset, tmp_path / "bench")
    path.with_suffix(".json").unlink()
    with pytest.raises(DatasetError):
        load_dataset(path)


# --- folder datasets -----------------------------------------------------


def _write_folder_tree(root):
    rng = np.random.default_rng(0)
    for domain in ("art", "photo"):
        for cls in ("cat", "dog"):
            d = root / domain / cls
            d.mkdir(parents=True)
            for i in range(3):
                arr = rng.integers(0, 256, size=(10, 10, 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"img{i}.png")


def test_folder_dataset_loads_with_lexicographic_labels(tmp_path):
    _write_folder_tree(tmp_path)
    ds = load_folder_dataset(tmp_path, image_size=8)
    assert len(ds) == 12
    assert ds.domain_names == ("art", "photo")
    assert ds.num_classes == 2
    assert ds.images.shape == (12, 3, 8, 8)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    ds.validate()


def test_folder_dataset_missing_root(tmp_path):
    with pytest.raises(DatasetError):
        load_folder_dataset(tmp_path / "nope")


def test_folder_dataset_empty_root(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        load_folder_dataset(tmp_path / "empty")
