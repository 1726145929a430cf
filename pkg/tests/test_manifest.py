import numpy as np
import pytest

from enact_heart.errors import ClassTooSmall, DuplicatePath, UnlabeledFile
from enact_heart.manifest import (
    CSV_HEADER,
    Label,
    Manifest,
    ManifestRecord,
    Split,
    assign_splits,
    build_manifest,
    class_distribution,
    filename_label_rule,
    folder_label_rule,
)


def touch(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"")
    return path


def test_two_roots(tmp_path):
    touch(tmp_path / "A" / "a_normal.wav")
    touch(tmp_path / "B" / "b_murmur.wav")
    m = build_manifest([tmp_path / "A", tmp_path / "B"])
    assert [r.label for r in m] == [Label.NORMAL, Label.MURMUR]
    assert all(r.augmentation_index == 0 for r in m)


def test_empty_roots(tmp_path):
    (tmp_path / "A").mkdir()
    assert len(build_manifest([tmp_path / "A"])) == 0
    assert len(build_manifest([])) == 0


def test_duplicate_path(tmp_path):
    touch(tmp_path / "A" / "normal__1.wav")
    with pytest.raises(DuplicatePath):
        build_manifest([tmp_path / "A", tmp_path / "A"])


def test_unlabeled(tmp_path):
    touch(tmp_path / "Bunlabelledtest__1.wav")
    with pytest.raises(UnlabeledFile):
        build_manifest([tmp_path])


def test_label_rules(tmp_path):
    from pathlib import Path

    assert filename_label_rule(Path("murmur__201108222238.wav")) is Label.MURMUR
    assert filename_label_rule(Path("Extrahls.wav")) is Label.EXTRAHLS
    assert filename_label_rule(Path("normal_murmur.wav")) is None
    assert filename_label_rule(Path("normality__1.wav")) is None
    assert folder_label_rule(Path("set/artifact/x.wav")) is Label.ARTIFACT
    assert folder_label_rule(Path("set/x.wav")) is None


def test_ordering_and_id_collisions(tmp_path):
    touch(tmp_path / "b" / "normal__1.wav")
    touch(tmp_path / "a" / "normal__1.wav")
    touch(tmp_path / "a" / "murmur__2.wav")
    m = build_manifest([tmp_path])
    assert [r.source_path for r in m] == sorted(r.source_path for r in m)
    assert [r.clip_id for r in m] == ["murmur__2", "normal__1", "normal__1~1"]


def rec(i, label, src=None, aug=0, split=Split.TRAIN):
    return ManifestRecord(f"c{i}_{aug}", src or f"s{i}.wav", label, split, aug, 0)


def test_class_distribution():
    m = Manifest([rec(0, Label.NORMAL), rec(1, Label.NORMAL), rec(2, Label.NORMAL), rec(3, Label.MURMUR)])
    d = class_distribution(m)
    assert d[Label.NORMAL] == 3 and d[Label.MURMUR] == 1 and sum(d.values()) == 4
    assert set(class_distribution(Manifest()).values()) == {0}
    augmented = Manifest([rec(r.clip_id[1:], r.label, r.source_path, a) for r in m for a in range(10)])
    assert class_distribution(augmented) == d


def corpus(per_class=10, versions=10):
    return Manifest(
        rec(f"{lab}{i}", lab, f"{lab.slug}_{i}.wav", a)
        for lab in Label
        for i in range(per_class)
        for a in range(versions)
    )


@pytest.mark.parametrize("seed", [0, 1, 7, 123])
def test_split_counts_and_groups(seed):
    m = assign_splits(corpus(), 0.2, seed)
    for lab in Label:
        val_src = {r.source_path for r in m.validation if r.label is lab}
        assert len(val_src) == 2
    by_src = {}
    for r in m:
        by_src.setdefault(r.source_path, set()).add(r.split)
    assert all(len(s) == 1 for s in by_src.values())
    assert len(m.train) + len(m.validation) == len(m)


def test_split_fraction_within_one_recording():
    rng = np.random.default_rng(3)
    for _ in range(20):
        counts = rng.integers(2, 40, size=5)
        frac = rng.uniform(0.05, 0.6)
        m = Manifest(rec(f"{lab}{i}", lab) for lab, n in zip(Label, counts) for i in range(n))
        split = assign_splits(m, frac, int(rng.integers(100)))
        for lab, n in zip(Label, counts):
            n_val = sum(1 for r in split.validation if r.label is lab)
            assert abs(n_val - frac * n) <= 1


def test_split_deterministic():
    m = corpus()
    assert assign_splits(m, 0.2, 5) == assign_splits(m, 0.2, 5)
    assert assign_splits(m, 0.2, 5) != assign_splits(m, 0.2, 6)


def test_class_too_small():
    m = Manifest([rec(0, Label.NORMAL), rec(1, Label.NORMAL), rec(2, Label.MURMUR, aug=0)])
    with pytest.raises(ClassTooSmall):
        assign_splits(m, 0.2, 0)


def test_drop_augmented_validation():
    m = assign_splits(corpus(), 0.2, 0, drop_augmented_validation=True)
    assert all(r.augmentation_index == 0 for r in m.validation)
    assert any(r.augmentation_index > 0 for r in m.train)


def test_csv_roundtrip(tmp_path):
    m = assign_splits(corpus(3, 2), 0.34, 1)
    text = m.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert "\r" not in text and "normal" in text
    assert Manifest.from_csv(text) == m
    m.save(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_bytes() == text.encode()
    assert Manifest.load(tmp_path / "m.csv") == m


def test_unique_ids_and_valid_aug():
    with pytest.raises(ValueError):
        Manifest([rec(0, Label.NORMAL), rec(0, Label.NORMAL)])
    with pytest.raises(ValueError):
        rec(0, Label.NORMAL, aug=10)
