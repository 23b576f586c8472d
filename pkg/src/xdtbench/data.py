"""Dataset manifests, deterministic stratified splits, and class balancing.

Manifest files are UTF-8 text with one record per line::

    id<TAB>source<TAB>label

where ``label`` is ``pos`` (diseased) or ``neg`` (healthy).  Lines starting
with ``#`` and blank lines are ignored.  Split files list ids one per line
under ``[train]``, ``[val]`` and ``[test]`` section headers.

All operations are pure functions of their inputs (plus an explicit seed),
so repeated calls always reproduce the same output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ManifestError, SplitError

LABEL_NEG = 0
LABEL_POS = 1

_LABEL_TOKENS = {"pos": LABEL_POS, "neg": LABEL_NEG}
_TOKEN_FOR_LABEL = {LABEL_POS: "pos", LABEL_NEG: "neg"}

_SPLIT_SECTIONS = ("train", "val", "test")


@dataclass(frozen=True)
class SampleRecord:
    """One labelled sample: a unique id, a source reference, and a binary label."""

    id: str
    source: str
    label: int

    def __post_init__(self) -> None:
        if self.label not in (LABEL_NEG, LABEL_POS):
            raise ManifestError(f"record {self.id!r}: label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class DatasetManifest:
    """A named, ordered collection of binary-labelled sample records."""

    name: str
    records: tuple[SampleRecord, ...]
    positive_count: int
    negative_count: int

    def __post_init__(self) -> None:
        if not self.records:
            raise ManifestError(f"manifest {self.name!r} has no records")
        n_pos = sum(1 for r in self.records if r.label == LABEL_POS)
        n_neg = len(self.records) - n_pos
        if (n_pos, n_neg) != (self.positive_count, self.negative_count):
            raise ManifestError(
                f"manifest {self.name!r}: stated counts ({self.positive_count}, "
                f"{self.negative_count}) do not match records ({n_pos}, {n_neg})"
            )
        seen: set[str] = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"manifest {self.name!r}: duplicate id {r.id!r}")
            seen.add(r.id)

    @classmethod
    def from_records(cls, name: str, records: Iterable[SampleRecord]) -> "DatasetManifest":
        recs = tuple(records)
        n_pos = sum(1 for r in recs if r.label == LABEL_POS)
        return cls(name=name, records=recs, positive_count=n_pos, negative_count=len(recs) - n_pos)

    def ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SplitSpec:
    """Three-way split fractions plus the seed that fixes the assignment."""

    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        if len(self.fractions) != 3:
            raise SplitError("fractions must be (train, val, test)")
        for f in self.fractions:
            if not 0.0 <= f <= 1.0:
                raise SplitError(f"fraction {f} outside [0, 1]")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise SplitError(f"fractions {self.fractions} do not sum to 1")


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/val/test id lists covering one manifest."""

    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        parts = (set(self.train_ids), set(self.val_ids), set(self.test_ids))
        total = len(self.train_ids) + len(self.val_ids) + len(self.test_ids)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise SplitError("split sections overlap or contain duplicates")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file; the dataset name is the file stem."""
    p = Path(path)
    if not p.is_file():
        raise ManifestError(f"manifest file not found: {p}")
    records: list[SampleRecord] = []
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"{p}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        rec_id, source, token = (f.strip() for f in fields)
        if not rec_id:
            raise ManifestError(f"{p}:{lineno}: empty id")
        if token not in _LABEL_TOKENS:
            raise ManifestError(f"{p}:{lineno}: unknown label token {token!r} (expected pos|neg)")
        records.append(SampleRecord(id=rec_id, source=source, label=_LABEL_TOKENS[token]))
    if not records:
        raise ManifestError(f"manifest file {p} contains no records")
    return DatasetManifest.from_records(p.stem, records)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest back out in the id/source/label text format."""
    lines = [f"{r.id}\t{r.source}\t{_TOKEN_FOR_LABEL[r.label]}" for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _split_sizes(n: int, fractions: tuple[float, float, float], what: str) -> tuple[int, int, int]:
    """Floor the val/test fractions; every remaining record goes to train."""
    f_train, f_val, f_test = fractions
    n_val = math.floor(f_val * n)
    n_test = math.floor(f_test * n)
    n_train = n - n_val - n_test
    for size, frac, section in ((n_train, f_train, "train"), (n_val, f_val, "val"), (n_test, f_test, "test")):
        if frac > 0.0 and size < 1:
            raise SplitError(f"{what}: too few records ({n}) to place >=1 in the {section} split")
    return n_train, n_val, n_test


def make_splits(manifest: DatasetManifest, spec: SplitSpec) -> SplitAssignment:
    """Assign every manifest id to train/val/test, deterministically in the seed.

    With ``stratified=True`` the fraction rule is applied per class: val and
    test take ``floor(fraction * class_size)`` records each and the remainder
    trains.  Ordering inside each split is a seeded shuffle.
    """
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        groups = [
            [r.id for r in manifest.records if r.label == LABEL_POS],
            [r.id for r in manifest.records if r.label == LABEL_NEG],
        ]
        group_names = [f"class pos of {manifest.name!r}", f"class neg of {manifest.name!r}"]
    else:
        groups = [[r.id for r in manifest.records]]
        group_names = [f"manifest {manifest.name!r}"]

    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    for ids, what in zip(groups, group_names):
        if not ids:
            raise SplitError(f"{what} is empty")
        _, n_val, n_test = _split_sizes(len(ids), spec.fractions, what)
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        val.extend(shuffled[:n_val])
        test.extend(shuffled[n_val : n_val + n_test])
        train.extend(shuffled[n_val + n_test :])

    # Re-shuffle each section so stratified output is not class-blocked.
    def _mix(part: list[str]) -> tuple[str, ...]:
        order = rng.permutation(len(part))
        return tuple(part[i] for i in order)

    return SplitAssignment(train_ids=_mix(train), val_ids=_mix(val), test_ids=_mix(test))


def balance_classes(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Down-sample the majority class so both classes are equal-sized.

    The minority class is untouched; retained majority records keep their
    manifest order.  An already balanced manifest is returned unchanged.
    """
    n_pos, n_neg = manifest.positive_count, manifest.negative_count
    if n_pos == 0 or n_neg == 0:
        raise ManifestError(f"manifest {manifest.name!r}: cannot balance with an empty class")
    if n_pos == n_neg:
        return manifest
    majority = LABEL_POS if n_pos > n_neg else LABEL_NEG
    target = min(n_pos, n_neg)
    majority_positions = [i for i, r in enumerate(manifest.records) if r.label == majority]
    rng = np.random.default_rng(seed)
    keep = set(rng.choice(len(majority_positions), size=target, replace=False).tolist())
    kept_positions = {majority_positions[i] for i in keep}
    records = tuple(
        r
        for i, r in enumerate(manifest.records)
        if r.label != majority or i in kept_positions
    )
    return DatasetManifest.from_records(manifest.name, records)


def save_split(assignment: SplitAssignment, path: str | Path) -> None:
    """Write a split assignment in the sectioned id-per-line format."""
    chunks = []
    for section, ids in zip(_SPLIT_SECTIONS, (assignment.train_ids, assignment.val_ids, assignment.test_ids)):
        chunks.append(f"[{section}]")
        chunks.extend(ids)
    Path(path).write_text("\n".join(chunks) + "\n", encoding="utf-8")


def load_split(path: str | Path) -> SplitAssignment:
    """Parse a split file; all three sections must be present exactly once."""
    p = Path(path)
    if not p.is_file():
        raise SplitError(f"split file not found: {p}")
    sections: dict[str, list[str]] = {}
    current: list[str] | None = None
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            if name not in _SPLIT_SECTIONS:
                raise SplitError(f"{p}:{lineno}: unknown section {name!r}")
            if name in sections:
                raise SplitError(f"{p}:{lineno}: duplicate section {name!r}")
            sections[name] = []
            current = sections[name]
            continue
        if current is None:
            raise SplitError(f"{p}:{lineno}: id outside any section")
        current.append(line)
    missing = [s for s in _SPLIT_SECTIONS if s not in sections]
    if missing:
        raise SplitError(f"{p}: missing sections {missing}")
    return SplitAssignment(
        train_ids=tuple(sections["train"]),
        val_ids=tuple(sections["val"]),
        test_ids=tuple(sections["test"]),
    )


def check_split_covers(manifest: DatasetManifest, assignment: SplitAssignment) -> None:
    """Raise unless the assignment partitions exactly the manifest's ids."""
    manifest_ids = set(manifest.ids())
    split_ids = set(assignment.train_ids) | set(assignment.val_ids) | set(assignment.test_ids)
    if manifest_ids != split_ids:
        extra = sorted(split_ids - manifest_ids)[:3]
        absent = sorted(manifest_ids - split_ids)[:3]
        raise SplitError(
            f"split does not partition manifest {manifest.name!r} "
            f"(unknown ids {extra}, uncovered ids {absent})"
        )


def ids_by_label(manifest: DatasetManifest) -> dict[int, tuple[str, ...]]:
    """Group manifest ids by class label, preserving manifest order."""
    out: dict[int, list[str]] = {LABEL_NEG: [], LABEL_POS: []}
    for r in manifest.records:
        out[r.label].append(r.id)
    return {k: tuple(v) for k, v in out.items()}


def records_subset(manifest: DatasetManifest, ids: Sequence[str], name: str | None = None) -> DatasetManifest:
    """Manifest restricted to ``ids``, reordered to follow ``ids``."""
    by_id = {r.id: r for r in manifest.records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ManifestError(f"ids not in manifest {manifest.name!r}: {missing[:3]}")
    return DatasetManifest.from_records(name or manifest.name, (by_id[i] for i in ids))
