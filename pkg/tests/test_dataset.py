import json
import os

import pytest

from conftest import tiny_domain_specs
from dannseg.dataset import (
    MANIFEST_NAME,
    Dataset,
    default_domain_specs,
    generate_dataset,
    native_size,
    read_dataset,
    write_dataset,
)
from dannseg.error import DannSegError, ErrorCode
from dannseg.phantom import DomainStyle, generate_phantom


def test_generation_is_deterministic():
    assert generate_dataset(tiny_domain_specs(), seed=3) == generate_dataset(tiny_domain_specs(), seed=3)
    assert generate_dataset(tiny_domain_specs(), seed=3) != generate_dataset(tiny_domain_specs(), seed=4)


def test_split_counts_and_labels(tiny_dataset):
    assert len(tiny_dataset.select("train", "A")) == 6
    assert len(tiny_dataset.select("val", "A")) == 2
    assert len(tiny_dataset.select("test", "A")) == 2
    assert all(s.has_mask for s in tiny_dataset.select(domain_id="A"))
    assert len(tiny_dataset.select("train", "C")) == 8
    assert not any(s.has_mask for s in tiny_dataset.select("train", "C"))
    assert all(s.has_mask for s in tiny_dataset.select("test", "C"))
    assert tiny_dataset.domain_ids("train") == ["A", "B", "C"]


def test_default_domains_cover_the_crop_window():
    specs = {spec.domain_id: spec for spec in default_domain_specs(10, crop_size=32)}
    assert set(specs) == {"A", "B", "C", "D"}
    assert specs["A"].labelled and specs["B"].labelled
    assert not specs["C"].labelled and not specs["D"].labelled
    assert specs["D"].splits == {"test": 1.0}
    for spec in specs.values():
        assert spec.size * spec.style.spacing_mm >= 32 * 1.25
    assert native_size(192, 1.5) == 176


def test_round_trip(tmp_path, tiny_dataset):
    write_dataset(str(tmp_path), tiny_dataset)
    loaded = read_dataset(str(tmp_path))
    assert loaded == tiny_dataset
    assert loaded.seed == 7
    assert [d.to_dict() for d in loaded.domains] == [d.to_dict() for d in tiny_dataset.domains]


def test_refuses_to_overwrite_without_force(tmp_path, tiny_dataset):
    write_dataset(str(tmp_path), tiny_dataset)
    with pytest.raises(DannSegError) as info:
        write_dataset(str(tmp_path), tiny_dataset)
    assert info.value.code == ErrorCode.OUTPUT_EXISTS
    write_dataset(str(tmp_path), tiny_dataset, force=True)


def test_truncated_image_names_the_sample(tmp_path, tiny_dataset):
    write_dataset(str(tmp_path), tiny_dataset)
    path = tmp_path / "B_0003.img"
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DannSegError) as info:
        read_dataset(str(tmp_path))
    assert info.value.code == ErrorCode.MALFORMED_DATASET
    assert "B_0003" in info.value.message


def test_extra_image_file_is_rejected(tmp_path, tiny_dataset):
    write_dataset(str(tmp_path), tiny_dataset)
    (tmp_path / "stray.img").write_bytes(b"\x00" * 16)
    with pytest.raises(DannSegError) as info:
        read_dataset(str(tmp_path))
    assert info.value.code == ErrorCode.MALFORMED_DATASET


def test_missing_or_bad_manifest(tmp_path, tiny_dataset):
    with pytest.raises(DannSegError):
        read_dataset(str(tmp_path))
    write_dataset(str(tmp_path), tiny_dataset)
    with open(os.path.join(tmp_path, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    manifest["schema_version"] = 99
    with open(os.path.join(tmp_path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f)
    with pytest.raises(DannSegError) as info:
        read_dataset(str(tmp_path))
    assert info.value.code == ErrorCode.MALFORMED_DATASET


def test_duplicate_ids_are_rejected():
    sample = generate_phantom(0, DomainStyle(), 32, sample_id="same")
    with pytest.raises(DannSegError):
        Dataset([sample, sample])
