import math

import numpy as np
import pytest

from xdtbench.data import (
    DatasetManifest,
    SampleRecord,
    SplitSpec,
    balance_classes,
    check_split_covers,
    load_manifest,
    load_split,
    make_splits,
    save_manifest,
    save_split,
)
from xdtbench.errors import ManifestError, SplitError


def write_manifest(path, rows):
    path.write_text("\n".join("\t".join(r) for r in rows) + "\n", encoding="utf-8")


def make_manifest(n_pos, n_neg, name="toy"):
    records = [SampleRecord(id=f"p{i}", source=f"img/p{i}.png", label=1) for i in range(n_pos)]
    records += [SampleRecord(id=f"n{i}", source=f"img/n{i}.png", label=0) for i in range(n_neg)]
    return DatasetManifest.from_records(name, records)


class TestLoadManifest:
    def test_three_row_tally(self, tmp_path):
        p = tmp_path / "tiny.tsv"
        write_manifest(p, [("a", "x.png", "pos"), ("b", "y.png", "pos"), ("c", "z.png", "neg")])
        m = load_manifest(p)
        assert m.name == "tiny"
        assert (m.positive_count, m.negative_count) == (2, 1)
        assert m.ids() == ("a", "b", "c")

    def test_pneumonia_scale_counts(self, tmp_path):
        # 3883 diseased / 1349 healthy, the published size of the largest corpus.
        p = tmp_path / "guangzhou.tsv"
        rows = [(f"d{i}", "img.png", "pos") for i in range(3883)]
        rows += [(f"h{i}", "img.png", "neg") for i in range(1349)]
        write_manifest(p, rows)
        m = load_manifest(p)
        assert (m.positive_count, m.negative_count) == (3883, 1349)
        assert len(m) == 5232

    def test_duplicate_id_rejected(self, tmp_path):
        p = tmp_path / "dup.tsv"
        write_manifest(p, [("a", "x.png", "pos"), ("a", "y.png", "neg")])
        with pytest.raises(ManifestError, match="duplicate id"):
            load_manifest(p)

    def test_unknown_label_rejected(self, tmp_path):
        p = tmp_path / "bad.tsv"
        write_manifest(p, [("a", "x.png", "positive")])
        with pytest.raises(ManifestError, match="unknown label"):
            load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "absent.tsv")

    def test_malformed_row(self, tmp_path):
        p = tmp_path / "short.tsv"
        p.write_text("a\tpos\n", encoding="utf-8")
        with pytest.raises(ManifestError, match="3 tab-separated"):
            load_manifest(p)

    def test_comments_and_blanks_skipped(self, tmp_path):
        p = tmp_path / "c.tsv"
        p.write_text("# header\n\na\tx.png\tpos\nb\ty.png\tneg\n", encoding="utf-8")
        assert len(load_manifest(p)) == 2

    def test_save_round_trip(self, tmp_path):
        m = make_manifest(3, 2)
        p = tmp_path / "rt.tsv"
        save_manifest(m, p)
        back = load_manifest(p)
        assert back.records == tuple(
            SampleRecord(id=r.id, source=r.source, label=r.label) for r in m.records
        )


class TestMakeSplits:
    def test_exact_fractions(self):
        m = make_manifest(6, 4)
        a = make_splits(m, SplitSpec(seed=0))
        assert (len(a.train_ids), len(a.val_ids), len(a.test_ids)) == (6, 2, 2)
        pos = set(f"p{i}" for i in range(6))
        assert sum(1 for i in a.val_ids if i in pos) == 1
        assert sum(1 for i in a.test_ids if i in pos) == 1
        assert sum(1 for i in a.train_ids if i in pos) == 4

    def test_pneumonia_scale_sizes(self):
        # Independent oracle: apply floor(f * class_size) to val/test per class,
        # remainder to train, then sum the classes.
        sizes = {}
        for n_class in (3883, 1349):
            n_val = math.floor(0.2 * n_class)
            n_test = math.floor(0.2 * n_class)
            sizes["val"] = sizes.get("val", 0) + n_val
            sizes["test"] = sizes.get("test", 0) + n_test
            sizes["train"] = sizes.get("train", 0) + n_class - n_val - n_test
        assert (sizes["train"], sizes["val"], sizes["test"]) == (3142, 1045, 1045)

        m = make_manifest(3883, 1349)
        a = make_splits(m, SplitSpec(seed=3))
        assert (len(a.train_ids), len(a.val_ids), len(a.test_ids)) == (3142, 1045, 1045)

    def test_determinism(self):
        m = make_manifest(13, 9)
        spec = SplitSpec(seed=42)
        a1 = make_splits(m, spec)
        a2 = make_splits(m, spec)
        assert a1 == a2

    def test_seed_changes_assignment(self):
        m = make_manifest(13, 9)
        assert make_splits(m, SplitSpec(seed=1)) != make_splits(m, SplitSpec(seed=2))

    def test_partition_property(self):
        m = make_manifest(17, 11)
        for seed in range(10):
            a = make_splits(m, SplitSpec(seed=seed))
            parts = (set(a.train_ids), set(a.val_ids), set(a.test_ids))
            assert parts[0] | parts[1] | parts[2] == set(m.ids())
            assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])

    def test_stratification_property(self):
        # val/test floor rule keeps per-class deviation below one record.
        m = make_manifest(23, 9)
        a = make_splits(m, SplitSpec(seed=5))
        pos = set(f"p{i}" for i in range(23))
        for ids, frac in ((a.val_ids, 0.2), (a.test_ids, 0.2)):
            got_pos = sum(1 for i in ids if i in pos)
            assert abs(got_pos - frac * 23) < 1.0
            assert abs((len(ids) - got_pos) - frac * 9) < 1.0

    def test_class_too_small(self):
        m = make_manifest(10, 3)
        with pytest.raises(SplitError, match="too few records"):
            make_splits(m, SplitSpec(seed=0))

    def test_unstratified(self):
        m = make_manifest(6, 4)
        a = make_splits(m, SplitSpec(seed=0, stratified=False))
        assert (len(a.train_ids), len(a.val_ids), len(a.test_ids)) == (6, 2, 2)

    def test_bad_fractions_rejected(self):
        with pytest.raises(SplitError):
            SplitSpec(fractions=(0.5, 0.2, 0.2))
        with pytest.raises(SplitError):
            SplitSpec(fractions=(1.2, -0.1, -0.1))


class TestBalanceClasses:
    def test_downsample_majority(self):
        m = make_manifest(4, 2)
        b = balance_classes(m, seed=0)
        assert (b.positive_count, b.negative_count) == (2, 2)
        assert [r.id for r in b.records if r.label == 0] == ["n0", "n1"]

    def test_deterministic_in_seed(self):
        m = make_manifest(4, 2)
        assert balance_classes(m, seed=9) == balance_classes(m, seed=9)

    def test_already_balanced_identity(self):
        m = make_manifest(3, 3)
        assert balance_classes(m, seed=0) is m

    def test_large_downsample(self):
        m = make_manifest(1000, 383)
        b = balance_classes(m, seed=1)
        assert (b.positive_count, b.negative_count) == (383, 383)

    def test_minority_untouched_and_order_kept(self):
        m = make_manifest(2, 50)
        b = balance_classes(m, seed=4)
        assert [r.id for r in b.records if r.label == 1] == ["p0", "p1"]
        kept_neg = [r.id for r in b.records if r.label == 0]
        original_neg = [r.id for r in m.records if r.label == 0]
        assert kept_neg == [i for i in original_neg if i in set(kept_neg)]

    def test_empty_class_rejected(self):
        records = [SampleRecord(id=f"p{i}", source="s", label=1) for i in range(3)]
        m = DatasetManifest.from_records("onesided", records)
        with pytest.raises(ManifestError, match="empty class"):
            balance_classes(m, seed=0)


class TestSplitFiles:
    def test_round_trip(self, tmp_path):
        m = make_manifest(8, 6)
        a = make_splits(m, SplitSpec(seed=2))
        p = tmp_path / "toy.split"
        save_split(a, p)
        assert load_split(p) == a
        check_split_covers(m, a)

    def test_missing_section(self, tmp_path):
        p = tmp_path / "bad.split"
        p.write_text("[train]\na\n[val]\nb\n", encoding="utf-8")
        with pytest.raises(SplitError, match="missing sections"):
            load_split(p)

    def test_id_outside_section(self, tmp_path):
        p = tmp_path / "bad.split"
        p.write_text("a\n[train]\n", encoding="utf-8")
        with pytest.raises(SplitError, match="outside any section"):
            load_split(p)

    def test_coverage_check(self):
        m = make_manifest(4, 4)
        a = make_splits(m, SplitSpec(seed=0))
        other = make_manifest(5, 4)
        with pytest.raises(SplitError, match="does not partition"):
            check_split_covers(other, a)


def test_counts_must_match_records():
    records = (SampleRecord(id="a", source="s", label=1),)
    with pytest.raises(ManifestError, match="stated counts"):
        DatasetManifest(name="bad", records=records, positive_count=0, negative_count=1)
