"""Manifest ingestion, cross-validation folds and class weights."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Label(IntEnum):
    Control = 0
    Pneumonia = 1
    Covid19 = 2

    @classmethod
    def parse(cls, text: str) -> "Label":
        key = text.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        try:
            return _LABEL_ALIASES[key]
        except KeyError:
            raise ValueError(text) from None


_LABEL_ALIASES = {
    "control": Label.Control,
    "normal": Label.Control,
    "nofinding": Label.Control,
    "0": Label.Control,
    "pneumonia": Label.Pneumonia,
    "1": Label.Pneumonia,
    "covid19": Label.Covid19,
    "covid": Label.Covid19,
    "2": Label.Covid19,
}

NUM_CLASSES = len(Label)


class Source(str, Enum):
    HM = "HM"
    BIMCV = "BIMCV"
    ACT = "ACT"
    ChinaSet = "ChinaSet"
    Montgomery = "Montgomery"
    CRX8 = "CRX8"
    CheXpert = "CheXpert"
    MIMIC = "MIMIC"
    Synthetic = "Synthetic"


class Projection(str, Enum):
    AP = "AP"
    PA = "PA"
    Unknown = "Unknown"


class Sensor(str, Enum):
    CR = "CR"
    DX = "DX"
    Unknown = "Unknown"


class Sex(str, Enum):
    M = "M"
    F = "F"
    Unknown = "Unknown"


# Lateral views are rejected outright; only frontal projections are admitted.
_REJECTED_PROJECTIONS = {"LAT", "LATERAL", "LL", "RL", "LLD", "RLD"}

MANIFEST_COLUMNS = (
    "record_id", "image_path", "label", "patient_id", "source",
    "projection", "sensor", "sex", "age",
)


class CorpusError(Exception):
    pass


class MissingFile(CorpusError):
    pass


class MalformedRow(CorpusError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicateRecordId(CorpusError):
    def __init__(self, line: int, record_id: str):
        super().__init__(f"line {line}: duplicate record_id {record_id!r}")
        self.line = line
        self.record_id = record_id


class UnknownLabel(CorpusError):
    def __init__(self, line: int, text: str):
        super().__init__(f"line {line}: unknown label {text!r}")
        self.line = line


class TooFewRecords(CorpusError):
    def __init__(self, label: Label, count: int, k: int):
        super().__init__(f"class {label.name} has {count} records, need >= {k}")
        self.label = label


class TooFewPatients(CorpusError):
    def __init__(self, label: Label, count: int, k: int):
        super().__init__(f"class {label.name} has {count} patients, need >= {k}")
        self.label = label


class EmptyClass(CorpusError):
    def __init__(self, label: Label):
        super().__init__(f"class {label.name} has no records")
        self.label = label


@dataclass(frozen=True)
class ImageRecord:
    record_id: str
    image_path: str
    label: Label
    patient_id: str
    source: Source
    projection: Projection = Projection.Unknown
    sensor: Sensor = Sensor.Unknown
    sex: Sex = Sex.Unknown
    age: float | None = None

    def __post_init__(self):
        for name, enum_cls in (("label", Label), ("source", Source), ("projection", Projection),
                               ("sensor", Sensor), ("sex", Sex)):
            object.__setattr__(self, name, enum_cls(getattr(self, name)))
        if not self.record_id:
            raise ValueError("record_id must be non-empty")
        if not self.image_path:
            raise ValueError("image_path must be non-empty")
        if self.age is not None and not 0 <= self.age <= 130:
            raise ValueError(f"age {self.age} outside [0, 130]")

    def to_row(self) -> dict[str, str]:
        return {
            "record_id": self.record_id,
            "image_path": self.image_path,
            "label": self.label.name,
            "patient_id": self.patient_id,
            "source": self.source.value,
            "projection": self.projection.value,
            "sensor": self.sensor.value,
            "sex": self.sex.value,
            "age": "" if self.age is None else f"{self.age:g}",
        }


@dataclass
class FoldSplit:
    fold_index: int
    train_ids: set[str] = field(default_factory=set)
    test_ids: set[str] = field(default_factory=set)


def _parse_lenient(enum_cls, text: str):
    # Unrecognised metadata degrades to Unknown rather than failing the row.
    text = text.strip()
    if not text:
        return enum_cls.Unknown
    for member in enum_cls:
        if member.value.lower() == text.lower():
            return member
    return enum_cls.Unknown


def _parse_projection(text: str, line: int) -> Projection:
    if text.strip().upper() in _REJECTED_PROJECTIONS:
        raise MalformedRow(line, f"projection {text!r} is not a frontal (AP/PA) view")
    return _parse_lenient(Projection, text)


def _parse_source(text: str, line: int) -> Source:
    for member in Source:
        if member.value.lower() == text.strip().lower():
            return member
    raise MalformedRow(line, f"unknown source {text!r}")


def _parse_age(text: str, line: int) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        age = float(text)
    except ValueError:
        raise MalformedRow(line, f"age {text!r} is not a number") from None
    if not (math.isfinite(age) and 0 <= age <= 130):
        raise MalformedRow(line, f"age {age:g} outside [0, 130]")
    return age


def load_manifest(path: str | Path) -> list[ImageRecord]:
    """Read a manifest CSV into validated records.

    Relative ``image_path`` values are resolved against the manifest's
    directory. Errors carry the 1-based file line number (header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    base = path.parent
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedRow(1, f"header lacks columns {missing}")
        for row in reader:
            line = reader.line_num
            if None in row or any(row[c] is None for c in MANIFEST_COLUMNS):
                raise MalformedRow(line, "wrong number of fields")
            record_id = row["record_id"].strip()
            if not record_id:
                raise MalformedRow(line, "empty record_id")
            if record_id in seen:
                raise DuplicateRecordId(line, record_id)
            image_path = row["image_path"].strip()
            if not image_path:
                raise MalformedRow(line, "empty image_path")
            try:
                label = Label.parse(row["label"])
            except ValueError:
                raise UnknownLabel(line, row["label"]) from None
            if not Path(image_path).is_absolute():
                image_path = str(base / image_path)
            records.append(ImageRecord(
                record_id=record_id,
                image_path=image_path,
                label=label,
                patient_id=row["patient_id"].strip() or record_id,
                source=_parse_source(row["source"], line),
                projection=_parse_projection(row["projection"], line),
                sensor=_parse_lenient(Sensor, row["sensor"]),
                sex=_parse_lenient(Sex, row["sex"]),
                age=_parse_age(row["age"], line),
            ))
            seen.add(record_id)
    return records


def write_manifest(records: Iterable[ImageRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_row())


def _class_counts(records: Sequence[ImageRecord]) -> Counter:
    return Counter(r.label for r in records)


def fold_test_size(n_class: int, k: int, test_fraction: float) -> int:
    """Per-fold test quota for a class of ``n_class`` records."""
    frac = min(test_fraction, 1.0 / k)
    n = int(math.floor(n_class * frac + 0.5))
    return max(1, min(n, n_class // k))


def _patient_strata(records: Sequence[ImageRecord]) -> dict[Label, dict[str, list[str]]]:
    """Group record ids by patient, and patients by their majority label."""
    by_patient: dict[str, list[ImageRecord]] = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r)
    strata: dict[Label, dict[str, list[str]]] = {lab: {} for lab in Label}
    for pid in sorted(by_patient):
        recs = by_patient[pid]
        counts = Counter(r.label for r in recs)
        label = min(counts, key=lambda lab: (-counts[lab], int(lab)))
        strata[label][pid] = sorted(r.record_id for r in recs)
    return strata


def make_folds(
    records: Sequence[ImageRecord],
    k: int = 5,
    seed: int = 0,
    patient_disjoint: bool = True,
    test_fraction: float = 0.10,
) -> list[FoldSplit]:
    """Build ``k`` folds whose test sets are mutually disjoint stratified draws.

    Each fold tests on ``test_fraction`` of every class (capped at 1/k so the
    draws fit without replacement); the fold's training set is the complement.
    With ``patient_disjoint`` whole patients are assigned to a test set, using
    best-fit decreasing packing against each fold's per-class quota.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    records = sorted(records, key=lambda r: r.record_id)
    counts = _class_counts(records)
    for lab in Label:
        if counts[lab] < k:
            raise TooFewRecords(lab, counts[lab], k)

    rng = np.random.default_rng(seed)
    test_sets: list[set[str]] = [set() for _ in range(k)]
    strata = _patient_strata(records) if patient_disjoint else {
        lab: {r.record_id: [r.record_id] for r in records if r.label == lab} for lab in Label
    }
    for lab in Label:
        groups = strata[lab]
        if patient_disjoint and len(groups) < k:
            raise TooFewPatients(lab, len(groups), k)
        n_records = sum(len(v) for v in groups.values())
        quota = fold_test_size(n_records, k, test_fraction)
        keys = sorted(groups)
        order = rng.permutation(len(keys))
        shuffled = [keys[i] for i in order]
        # stable sort keeps the shuffled order among equal-size groups
        shuffled.sort(key=lambda g: -len(groups[g]))
        filled = [0] * k
        for g in shuffled:
            size = len(groups[g])
            room = [quota - filled[f] for f in range(k)]
            fits = [f for f in range(k) if room[f] >= size]
            if not fits:
                # a patient larger than the quota still seeds a fold that has none
                fits = [f for f in range(k) if filled[f] == 0]
            if not fits:
                continue
            f = min(fits, key=lambda f: (room[f] - size, f))
            test_sets[f].update(groups[g])
            filled[f] += size

    all_ids = {r.record_id for r in records}
    return [FoldSplit(i, all_ids - test_sets[i], set(test_sets[i])) for i in range(k)]


def split_validation(
    records: Sequence[ImageRecord], fraction: float = 0.10, seed: int = 0
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Stratified, seeded hold-out of ``fraction`` of each class (at least one record)."""
    records = sorted(records, key=lambda r: r.record_id)
    rng = np.random.default_rng(seed)
    val_ids: set[str] = set()
    for lab in Label:
        ids = [r.record_id for r in records if r.label == lab]
        if len(ids) < 2:
            continue
        n = max(1, int(math.floor(len(ids) * fraction + 0.5)))
        picked = rng.choice(len(ids), size=min(n, len(ids) - 1), replace=False)
        val_ids.update(ids[i] for i in picked)
    train = [r for r in records if r.record_id not in val_ids]
    val = [r for r in records if r.record_id in val_ids]
    return train, val


def save_folds(folds: Sequence[FoldSplit], path: str | Path) -> None:
    payload = {
        str(f.fold_index): {"train": sorted(f.train_ids), "test": sorted(f.test_ids)}
        for f in folds
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_folds(path: str | Path) -> list[FoldSplit]:
    payload = json.loads(Path(path).read_text())
    return [
        FoldSplit(int(i), set(v["train"]), set(v["test"]))
        for i, v in sorted(payload.items(), key=lambda kv: int(kv[0]))
    ]


def class_weights_from_counts(counts: Sequence[int] | dict) -> dict[Label, float]:
    if not isinstance(counts, dict):
        counts = {lab: int(n) for lab, n in zip(Label, counts)}
    for lab in Label:
        if counts.get(lab, 0) <= 0:
            raise EmptyClass(lab)
    total = sum(counts[lab] for lab in Label)
    return {lab: total / (NUM_CLASSES * counts[lab]) for lab in Label}


def class_weights(records: Sequence[ImageRecord]) -> dict[Label, float]:
    """Inverse-frequency weights ``N / (K * N_c)``; all 1 for a balanced corpus."""
    return class_weights_from_counts(dict(_class_counts(records)))
