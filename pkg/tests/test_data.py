import struct

import numpy as np
import pytest

from data_weighter.data import (IDX_FILES, SYNTHETIC_DOMAINS, Domain, ImageSet, SplitSpec,
                                build_mixed_source, build_mixed_splits, load_domain, load_idx,
                                load_idx_images, load_idx_labels, rotate_image, synth_domain_pools,
                                synth_domains, write_idx)
from data_weighter.errors import ConfigurationError, ContractError, FormatError
from data_weighter.harness import linear_probe
from data_weighter.ndmath import RandomStream


def random_bytes(shape, seed=0):
    return RandomStream(seed).integers(0, 256, shape).astype(np.uint8)


def test_idx_round_trip(tmp_path):
    images = random_bytes((5, 7, 7))
    labels = random_bytes(5, seed=1)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", labels)
    loaded = load_idx_images(tmp_path / "img")
    assert np.array_equal(np.rint(loaded.images * 255).astype(np.uint8), images)
    assert np.array_equal(load_idx_labels(tmp_path / "lbl"), labels.astype(np.int64))


def test_idx_gzip_round_trip(tmp_path):
    images = random_bytes((3, 4, 4))
    path = write_idx(tmp_path / "img.gz", images)
    assert np.array_equal(load_idx(path).images, images / 255.0)


def test_idx_float_images_are_rescaled(tmp_path):
    write_idx(tmp_path / "img", np.full((1, 2, 2), 0.5))
    assert np.all(load_idx_images(tmp_path / "img").images == 128 / 255.0)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">IIII", 0x00000802, 1, 2, 2) + bytes(4))
    with pytest.raises(FormatError) as err:
        load_idx(path)
    assert err.value.offset == 0


def test_idx_truncated_files(tmp_path):
    short = tmp_path / "short"
    short.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_idx(short)
    header = tmp_path / "header"
    header.write_bytes(struct.pack(">II", 0x00000803, 2))
    with pytest.raises(FormatError, match="header"):
        load_idx(header)
    payload = tmp_path / "payload"
    payload.write_bytes(struct.pack(">IIII", 0x00000803, 2, 3, 3) + bytes(10))
    with pytest.raises(FormatError, match="expected 18 bytes"):
        load_idx(payload)


def test_idx_extent_overflow(tmp_path):
    path = tmp_path / "huge"
    path.write_bytes(struct.pack(">II", 0x00000801, 1 << 31))
    with pytest.raises(FormatError) as err:
        load_idx(path)
    assert err.value.offset == 4


def test_idx_kind_mismatch(tmp_path):
    write_idx(tmp_path / "lbl", random_bytes(3))
    with pytest.raises(FormatError):
        load_idx_images(tmp_path / "lbl")


def write_domain(root, name, n_train=6, n_test=4, seed=0):
    directory = root / name
    directory.mkdir()
    write_idx(directory / IDX_FILES["train_images"], random_bytes((n_train, 5, 5), seed))
    write_idx(directory / IDX_FILES["train_labels"], np.arange(n_train, dtype=np.uint8) % 3)
    write_idx(directory / (IDX_FILES["test_images"] + ".gz"), random_bytes((n_test, 5, 5), seed + 1))
    write_idx(directory / (IDX_FILES["test_labels"] + ".gz"), np.arange(n_test, dtype=np.uint8) % 3)


def test_load_domain(tmp_path):
    write_domain(tmp_path, "mnist")
    domain = load_domain(tmp_path, "mnist")
    assert len(domain.train) == 6 and len(domain.test) == 4
    assert set(domain.train.domain_tags) == {"mnist"}
    assert np.array_equal(domain.train.origin, np.arange(6))
    with pytest.raises(FileNotFoundError):
        load_domain(tmp_path, "kmnist")


def test_load_domain_label_mismatch(tmp_path):
    write_domain(tmp_path, "mnist")
    write_idx(tmp_path / "mnist" / IDX_FILES["train_labels"], np.zeros(5, dtype=np.uint8))
    with pytest.raises(FormatError):
        load_domain(tmp_path, "mnist")


def test_image_set_validation():
    with pytest.raises(ContractError):
        ImageSet(np.full((1, 2, 2), 1.5))
    with pytest.raises(ContractError):
        ImageSet(np.zeros((2, 2, 2)), labels=np.zeros(3))
    with pytest.raises(ContractError):
        ImageSet(np.zeros((2, 4)))
    with pytest.raises(ContractError):
        ImageSet.concat([ImageSet(np.zeros((1, 2, 2))), ImageSet(np.zeros((1, 3, 3)))])


def make_domains():
    r = RandomStream(0)
    out = []
    for name in ("a", "b", "c"):
        train = ImageSet(r.uniform((30, 3, 3)), np.arange(30) % 2).with_domain(name)
        test = ImageSet(r.uniform((10, 3, 3)), np.arange(10) % 2).with_domain(name)
        out.append(Domain(name, train, test))
    return out


def test_mixed_source_split_sizes_and_disjointness():
    spec = SplitSpec("b", target_train=8, target_test=5, source_caps={"a": 12})
    source, target_train, target_test = build_mixed_source(make_domains(), spec, RandomStream(1))
    assert len(target_train) == 8 and len(target_test) == 5
    tags = list(source.domain_tags)
    assert tags.count("a") == 12 and tags.count("b") == 22 and tags.count("c") == 30
    in_source = set(source.origin[source.domain_tags == "b"])
    assert not in_source & set(target_train.origin)


def test_mixed_source_is_deterministic():
    spec = SplitSpec("a", 5, 5)
    first = build_mixed_source(make_domains(), spec, RandomStream(2))
    second = build_mixed_source(make_domains(), spec, RandomStream(2))
    for x, y in zip(first, second):
        assert np.array_equal(x.images, y.images)


def test_mixed_source_infeasible_splits():
    with pytest.raises(ConfigurationError):
        build_mixed_source(make_domains(), SplitSpec("z", 1, 1), RandomStream(0))
    with pytest.raises(ConfigurationError):
        build_mixed_source(make_domains(), SplitSpec("a", 31, 1), RandomStream(0))
    with pytest.raises(ConfigurationError):
        build_mixed_source(make_domains(), SplitSpec("a", 1, 11), RandomStream(0))


def test_synthetic_domains():
    sets = synth_domains(RandomStream(3), 20, size=12)
    assert [s.domain_tags[0] for s in sets] == list(SYNTHETIC_DOMAINS)
    for s in sets:
        assert s.images.shape == (20, 12, 12)
        assert s.images.min() >= 0.0 and s.images.max() <= 1.0
        assert set(s.labels) <= {0, 1, 2, 3}
        assert np.all(s.images.reshape(20, -1).sum(axis=1) > 0)
    again = synth_domains(RandomStream(3), 20, size=12)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(sets, again))


def test_synthetic_domain_pools():
    pools = synth_domain_pools(RandomStream(4), 15, 6, size=8)
    assert [d.name for d in pools] == list(SYNTHETIC_DOMAINS)
    assert all(len(d.train) == 15 and len(d.test) == 6 for d in pools)
    with pytest.raises(ConfigurationError):
        synth_domains(RandomStream(0), 0)


def test_rotate_image():
    img = np.array([[1, 2], [3, 4]])
    assert np.array_equal(rotate_image(img, 1), [[2, 4], [1, 3]])
    assert np.array_equal(rotate_image(img, 0), img)
    x = RandomStream(5).uniform((5, 5))
    turned = x
    for _ in range(4):
        turned = rotate_image(turned, 1)
    assert np.array_equal(turned, x)
    with pytest.raises(ContractError):
        rotate_image(img, 4)
    with pytest.raises(ContractError):
        rotate_image(np.zeros((2, 3)), 1)


def test_mixed_source_at_full_scale():
    # 60k training pools with 10k target train leave 50k + 60k + 60k source images
    domains = []
    for name in ("mnist", "fashion_mnist", "kmnist"):
        train = ImageSet(np.zeros((60_000, 1, 1))).with_domain(name)
        test = ImageSet(np.zeros((10_000, 1, 1))).with_domain(name)
        domains.append(Domain(name, train, test))
    source, target_train, target_test = build_mixed_source(
        domains, SplitSpec("fashion_mnist", 10_000, 10_000), RandomStream(0))
    assert len(source) == 170_000
    assert len(target_train) == 10_000 and len(target_test) == 10_000
    assert list(source.domain_tags).count("fashion_mnist") == 50_000


def test_mixed_source_with_zero_caps_keeps_leftover_target():
    spec = SplitSpec("c", 10, 5, source_caps={"a": 0, "b": 0})
    source, _, _ = build_mixed_source(make_domains(), spec, RandomStream(6))
    assert set(source.domain_tags) == {"c"} and len(source) == 20


def test_validation_split_is_held_out_of_train_and_source():
    spec = SplitSpec("b", target_train=8, target_test=5, target_val=6)
    splits = build_mixed_splits(make_domains(), spec, RandomStream(1))
    assert len(splits.target_val) == 6 and len(splits.target_train) == 8
    val = set(splits.target_val.origin)
    assert not val & set(splits.target_train.origin)
    assert not val & set(splits.source.origin[splits.source.domain_tags == "b"])
    assert list(splits.source.domain_tags).count("b") == 16
    with pytest.raises(ConfigurationError):
        build_mixed_splits(make_domains(), SplitSpec("b", 25, 5, target_val=6), RandomStream(1))


def test_empty_validation_split_leaves_the_other_splits_unchanged():
    plain = build_mixed_source(make_domains(), SplitSpec("a", 7, 4), RandomStream(3))
    splits = build_mixed_splits(make_domains(), SplitSpec("a", 7, 4), RandomStream(3))
    assert len(splits.target_val) == 0
    for x, y in zip(plain, splits[:3]):
        assert np.array_equal(x.origin, y.origin)


def test_synthetic_domains_are_linearly_separable():
    sets = synth_domains(RandomStream(7), 500)
    for i, j in ((0, 1), (0, 2), (1, 2)):
        x = np.vstack([sets[i].flat(), sets[j].flat()])
        y = np.repeat([0, 1], 500)
        order = RandomStream(8).permutation(1000)
        assert linear_probe(x[order], y[order], 500) >= 0.95, (SYNTHETIC_DOMAINS[i], SYNTHETIC_DOMAINS[j])
