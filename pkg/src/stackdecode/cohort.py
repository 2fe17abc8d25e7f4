"""Multi-subject labeled feature cohorts: types, disk format, splits, size grids.

A cohort is a set of per-subject feature matrices that share one label space
and one feature dimensionality. The on-disk layout is a directory with a
``cohort.json`` manifest plus one feature file and one label file per subject.

Feature files are either the compact binary format (magic ``ENSB``) or plain
CSV, auto-detected by extension. Label files are UTF-8 text with one class
name per line, line i labeling row i.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .util import atomic_write_bytes, atomic_write_text

_MAGIC = b"ENSB"
_VERSION = 1


class CohortError(ValueError):
    """Raised for malformed cohort files or violated cohort invariants."""


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names with their integer encoding 0..K-1."""

    classes: tuple

    def __post_init__(self):
        if len(self.classes) < 2:
            raise CohortError("a label space needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise CohortError("class names must be unique")
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def encode(self, name) -> int:
        try:
            return self.classes.index(str(name))
        except ValueError:
            raise CohortError(f"unknown class name {name!r}") from None

    def decode(self, index) -> str:
        return self.classes[int(index)]


@dataclass(frozen=True)
class SubjectDataset:
    """One subject's samples: feature matrix plus integer labels per row."""

    subject_id: str
    features: np.ndarray  # (n_samples, n_features) float32
    labels: np.ndarray  # (n_samples,) int64 in 0..K-1

    def __post_init__(self):
        feats = np.asarray(self.features)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise CohortError(
                f"subject {self.subject_id!r}: features must be a non-empty 2-D matrix"
            )
        if labels.shape != (feats.shape[0],):
            raise CohortError(
                f"subject {self.subject_id!r}: {labels.shape[0]} labels for "
                f"{feats.shape[0]} rows"
            )
        bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
        if bad.size:
            raise CohortError(
                f"subject {self.subject_id!r}: non-finite feature value at row {bad[0]}"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Cohort:
    """All subjects of one dataset, sharing a label space and feature width."""

    subjects: tuple
    label_space: LabelSpace

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise CohortError("cohort has no subjects")
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate subject ids in cohort")
        width = subjects[0].n_features
        for s in subjects:
            if s.n_features != width:
                raise CohortError(
                    f"subject {s.subject_id!r} has {s.n_features} features, "
                    f"expected {width}"
                )
            k_max = int(s.labels.max(initial=-1))
            k_min = int(s.labels.min(initial=0))
            if k_min < 0 or k_max >= self.label_space.n_classes:
                raise CohortError(
                    f"subject {s.subject_id!r}: label outside 0..{self.label_space.n_classes - 1}"
                )
        object.__setattr__(self, "subjects", subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_features(self) -> int:
        return self.subjects[0].n_features

    @property
    def n_classes(self) -> int:
        return self.label_space.n_classes

    @property
    def subject_ids(self) -> tuple:
        return tuple(s.subject_id for s in self.subjects)

    def subject(self, subject_id) -> SubjectDataset:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise CohortError(f"no subject {subject_id!r} in cohort")

    def content_hash(self) -> str:
        """sha256 over class names and every subject's raw bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.label_space.classes)).encode())
        for s in self.subjects:
            h.update(s.subject_id.encode())
            h.update(np.ascontiguousarray(s.features, dtype=np.float32).tobytes())
            h.update(np.ascontiguousarray(s.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SplitPlan:
    """One train/test partition of a subject's rows. Test fraction fixed per split."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int

    def __post_init__(self):
        tr = np.asarray(self.train_indices, dtype=np.int64)
        te = np.asarray(self.test_indices, dtype=np.int64)
        if np.intersect1d(tr, te).size:
            raise CohortError("train and test indices overlap")
        object.__setattr__(self, "train_indices", tr)
        object.__setattr__(self, "test_indices", te)


# ---------------------------------------------------------------------------
# binary feature format


def write_feature_file(path, features):
    feats = np.ascontiguousarray(features, dtype="<f4")
    rows, cols = feats.shape
    header = _MAGIC + struct.pack("<IQQ", _VERSION, rows, cols)
    atomic_write_bytes(path, header + feats.tobytes())


def read_feature_file(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise CohortError(f"missing feature file {path!r}")
    if path.endswith(".csv"):
        data = np.loadtxt(path, delimiter=",", dtype=np.float32, ndmin=2)
        return data
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CohortError(f"{path!r}: bad magic bytes, not a feature file")
    version, rows, cols = struct.unpack("<IQQ", blob[4:24])
    if version != _VERSION:
        raise CohortError(f"{path!r}: unsupported feature file version {version}")
    expected = 24 + rows * cols * 4
    if len(blob) != expected:
        raise CohortError(f"{path!r}: truncated feature file")
    return np.frombuffer(blob[24:], dtype="<f4").reshape(rows, cols).copy()


# ---------------------------------------------------------------------------
# cohort directory I/O


def save_cohort(cohort: Cohort, directory):
    """Write a cohort directory (manifest + per-subject binary features/labels)."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "classes": list(cohort.label_space.classes),
        "n_features": int(cohort.n_features),
        "subjects": [],
    }
    for s in cohort.subjects:
        feat_rel = f"{s.subject_id}.feat"
        lab_rel = f"{s.subject_id}.labels"
        write_feature_file(os.path.join(directory, feat_rel), s.features)
        names = [cohort.label_space.decode(k) for k in s.labels]
        atomic_write_text(os.path.join(directory, lab_rel), "\n".join(names) + "\n")
        manifest["subjects"].append(
            {"id": s.subject_id, "features": feat_rel, "labels": lab_rel}
        )
    atomic_write_text(
        os.path.join(directory, "cohort.json"), json.dumps(manifest, indent=2)
    )


def load_cohort(manifest_path) -> Cohort:
    """Load and validate a cohort from a manifest path or its directory."""
    manifest_path = os.fspath(manifest_path)
    if os.path.isdir(manifest_path):
        manifest_path = os.path.join(manifest_path, "cohort.json")
    if not os.path.exists(manifest_path):
        raise CohortError(f"missing manifest {manifest_path!r}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CohortError(f"malformed manifest {manifest_path!r}: {exc}") from exc
    base = os.path.dirname(manifest_path)
    label_space = LabelSpace(tuple(manifest["classes"]))
    n_features = int(manifest["n_features"])

    subjects = []
    for entry in manifest["subjects"]:
        sid = str(entry["id"])
        feats = read_feature_file(os.path.join(base, entry["features"]))
        if feats.shape[1] != n_features:
            raise CohortError(
                f"subject {sid!r}: feature file has {feats.shape[1]} columns, "
                f"manifest says {n_features}"
            )
        lab_path = os.path.join(base, entry["labels"])
        if not os.path.exists(lab_path):
            raise CohortError(f"subject {sid!r}: missing label file {lab_path!r}")
        with open(lab_path, "r", encoding="utf-8") as fh:
            names = [line.rstrip("\n") for line in fh if line.strip() != ""]
        labels = np.empty(len(names), dtype=np.int64)
        for row, name in enumerate(names):
            try:
                labels[row] = label_space.encode(name)
            except CohortError:
                raise CohortError(
                    f"subject {sid!r}: unknown label {name!r} at row {row}"
                ) from None
        try:
            subjects.append(SubjectDataset(sid, feats, labels))
        except CohortError as exc:
            raise CohortError(str(exc)) from None
    return Cohort(tuple(subjects), label_space)


# ---------------------------------------------------------------------------
# splitting and subsampling


def _class_rows(labels, n_classes):
    return [np.flatnonzero(labels == k) for k in range(n_classes)]


def stratified_split(ds: SubjectDataset, test_fraction: float, seed: int,
                     n_classes: int | None = None) -> SplitPlan:
    """Hold out ceil(n * test_fraction) rows, class proportions preserved.

    The per-class test quota comes from largest-remainder rounding of
    ``count * fraction`` with at least one test row per present class when the
    total allows it, and at least one training row always kept per class.
    Deterministic for a given seed.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    labels = ds.labels
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rows_by_class = _class_rows(labels, n_classes)
    present = [k for k, rows in enumerate(rows_by_class) if rows.size]
    for k in present:
        if rows_by_class[k].size < 2:
            raise CohortError(
                f"subject {ds.subject_id!r}: class {k} has "
                f"{rows_by_class[k].size} sample(s), need at least 2 to split"
            )

    n = ds.n_samples
    n_test = int(math.ceil(n * test_fraction))
    targets = {k: rows_by_class[k].size * test_fraction for k in present}
    quota = {k: int(math.floor(targets[k])) for k in present}
    remainder = n_test - sum(quota.values())
    # hand out leftover slots by descending fractional part, ties to low class
    order = sorted(present, key=lambda k: (-(targets[k] - quota[k]), k))
    for k in order:
        if remainder <= 0:
            break
        quota[k] += 1
        remainder -= 1
    if n_test >= len(present):
        for k in present:
            quota[k] = max(quota[k], 1)
    for k in present:
        quota[k] = min(quota[k], rows_by_class[k].size - 1)

    rng = np.random.default_rng(seed)
    test_rows = []
    for k in present:
        perm = rng.permutation(rows_by_class[k])
        test_rows.extend(perm[: quota[k]].tolist())
    test_idx = np.array(sorted(test_rows), dtype=np.int64)
    mask = np.ones(n, dtype=bool)
    mask[test_idx] = False
    train_idx = np.flatnonzero(mask).astype(np.int64)
    return SplitPlan(train_idx, test_idx, int(seed))


def geometric_train_grid(n_train_max: int, n_classes: int, n_points: int = 10):
    """Geometrically spaced training sizes from one-per-class up to the full split.

    sizes_k = round(s_min * (n_train_max / s_min) ** (k / (n_points - 1))) with
    s_min = n_classes, deduplicated ascending; the last entry is always
    n_train_max.
    """
    if n_train_max < n_classes:
        raise ValueError(
            f"n_train_max={n_train_max} smaller than n_classes={n_classes}"
        )
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    s_min = n_classes
    ratio = n_train_max / s_min
    sizes = []
    for k in range(n_points):
        value = s_min * ratio ** (k / (n_points - 1))
        sizes.append(int(math.floor(value + 0.5)))
    sizes[-1] = n_train_max
    return sorted(set(sizes))


def subsample_stratified(ds: SubjectDataset, plan: SplitPlan, size: int,
                         seed: int, n_classes: int | None = None):
    """Pick ``size`` training rows, classes balanced, nested across sizes.

    The per-class orderings are shuffled once from the seed and slots are
    assigned round-robin over classes, so the subsample for a smaller size is
    always a subset of the subsample for a larger size under the same seed.
    """
    train = plan.train_indices
    if size > train.size:
        raise ValueError(f"subsample size {size} exceeds train split of {train.size}")
    labels = ds.labels
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    pools = []
    for k in range(n_classes):
        rows = train[labels[train] == k]
        pools.append(rng.permutation(rows).tolist())

    take = [0] * n_classes
    assigned = 0
    while assigned < size:
        progressed = False
        for k in range(n_classes):
            if assigned >= size:
                break
            if take[k] < len(pools[k]):
                take[k] += 1
                assigned += 1
                progressed = True
        if not progressed:  # all pools exhausted; cannot happen given size<=train
            break
    chosen = []
    for k in range(n_classes):
        chosen.extend(pools[k][: take[k]])
    return np.array(sorted(chosen), dtype=np.int64)
