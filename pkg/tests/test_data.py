import json

import numpy as np
import pytest

from fedseg import data
from fedseg.data import DomainSpec, generate, split
from fedseg.errors import ConfigError, DatasetIOError, FormatError, UsageError
from fedseg.tensor import Rng


def test_generate_is_deterministic():
    spec = DomainSpec("d", image_size=32)
    assert generate(spec, 6, Rng(9)) == generate(spec, 6, Rng(9))
    assert generate(spec, 6, Rng(9)) != generate(spec, 6, Rng(10))


def test_noise_free_bright_fg_has_two_levels():
    ds = generate(DomainSpec("d", "bright_fg", noise_std=0.0, image_size=32), 5, Rng(1))
    for s in ds.samples:
        levels = np.unique(s.image)
        assert len(levels) == 2
        np.testing.assert_array_equal(s.image == levels[1], s.mask == 1)


@pytest.mark.parametrize("family", ["ellipse_pair", "irregular_blob"])
def test_foreground_fraction_and_binary_masks(family):
    ds = generate(DomainSpec("d", shape_family=family), 20, Rng(4))
    for s in ds.samples:
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert 0.01 <= s.mask.mean() <= 0.35
        assert s.image.dtype == np.float32 and s.image.shape == (1, 64, 64)


def test_shared_geometry_across_appearances():
    a = generate(DomainSpec("ct", "bright_fg", image_size=32), 5, Rng(8))
    b = generate(DomainSpec("pet", "blurred_hot_fg", image_size=32), 5, Rng(8))
    np.testing.assert_array_equal(a.masks(), b.masks())
    assert not np.array_equal(a.images(), b.images())


def test_multichannel_shape():
    ds = generate(DomainSpec("mr", "multichannel", image_size=32), 3, Rng(2))
    assert ds.image_shape == [3, 32, 32]


def test_infeasible_placement():
    from fedseg.errors import GenerationError
    with pytest.raises(GenerationError):
        generate(DomainSpec("d", image_size=16, fg_fraction=[0.9, 0.95]), 1, Rng(0))


def test_spec_validation():
    with pytest.raises(ConfigError):
        DomainSpec("d", appearance="xray")
    with pytest.raises(ConfigError):
        DomainSpec.from_dict({"name": "d", "colour": 1})
    with pytest.raises(ConfigError):
        DomainSpec("d", image_size=48).check_depth(5)


def test_save_load_round_trip(tmp_path):
    ds = generate(DomainSpec("d", image_size=16), 10, Rng(3))
    data.save(ds, tmp_path / "d")
    back = data.load(tmp_path / "d")
    assert back == ds
    assert back.spec == ds.spec


def test_missing_file_is_named(tmp_path):
    ds = generate(DomainSpec("d", image_size=16), 4, Rng(3))
    data.save(ds, tmp_path)
    (tmp_path / "msk_2.fdt1").unlink()
    with pytest.raises(DatasetIOError) as e:
        data.load(tmp_path)
    assert "msk_2.fdt1" in str(e.value)


def test_count_mismatch(tmp_path):
    ds = generate(DomainSpec("d", image_size=16), 5, Rng(3))
    data.save(ds, tmp_path)
    (tmp_path / "img_4.fdt1").unlink()
    (tmp_path / "msk_4.fdt1").unlink()
    with pytest.raises(FormatError):
        data.load(tmp_path)


def test_corrupt_tensor(tmp_path):
    ds = generate(DomainSpec("d", image_size=16), 2, Rng(3))
    data.save(ds, tmp_path)
    (tmp_path / "img_1.fdt1").write_bytes(b"junk")
    with pytest.raises(FormatError) as e:
        data.load(tmp_path)
    assert "img_1.fdt1" in str(e.value)


def test_manifest_is_canonical(tmp_path):
    ds = generate(DomainSpec("d", image_size=16), 2, Rng(3))
    data.save(ds, tmp_path)
    text = (tmp_path / "manifest.json").read_text()
    assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"


def test_split_35_15():
    ds = generate(DomainSpec("d", image_size=16), 50, Rng(6))
    train, test = split(ds, 35, 15, Rng(7))
    assert (len(train), len(test)) == (35, 15)
    keys = {s.image.tobytes() for s in train.samples} | {s.image.tobytes() for s in test.samples}
    assert len(keys) == 50
    again = split(ds, 35, 15, Rng(7))
    assert again[0] == train and again[1] == test
    with pytest.raises(UsageError):
        split(ds, 40, 15, Rng(7))
