"""ChestX-ray14-style metadata ingestion, label cleaning and outlier removal.

The pipeline is: parse the NIH-schema CSV -> strip the Pneumonia label and
keep single-factor records only -> build the (z-scored age, gender) feature
matrix -> run the five-detector vote fusion -> drop fused outliers. Every
stage reports its record count so the shrinkage is auditable.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import re
from typing import Iterable, Sequence

import numpy as np

from .detectors import DetectorConfig, OutlierVerdict, detect_outliers
from .errors import DataSchemaError, DomainError, ShapeMismatchError
from .numeric import as_feature_matrix


class DiseaseLabel(enum.Enum):
    """The 14 retained classes plus the transient Pneumonia label.

    Values are the exact tokens used in the NIH ``Finding Labels`` column.
    Pneumonia is only valid before cleaning; clean records never carry it.
    """

    ATELECTASIS = "Atelectasis"
    CARDIOMEGALY = "Cardiomegaly"
    EFFUSION = "Effusion"
    INFILTRATION = "Infiltration"
    MASS = "Mass"
    NODULE = "Nodule"
    PNEUMOTHORAX = "Pneumothorax"
    CONSOLIDATION = "Consolidation"
    EDEMA = "Edema"
    EMPHYSEMA = "Emphysema"
    FIBROSIS = "Fibrosis"
    PLEURAL_THICKENING = "Pleural_Thickening"
    HERNIA = "Hernia"
    NO_FINDING = "No Finding"
    PNEUMONIA = "Pneumonia"


RETAINED_LABELS: tuple[DiseaseLabel, ...] = tuple(
    l for l in DiseaseLabel if l is not DiseaseLabel.PNEUMONIA)

MANDATORY_COLUMNS = ("Image Index", "Finding Labels", "Patient Age", "Patient Gender")

_AGE_PATTERN = re.compile(r"\s*(\d+)")


@dataclasses.dataclass(frozen=True)
class MetadataRecord:
    """One X-ray's non-image row: id, label set, age in years, gender (M=1, F=0)."""

    image_id: str
    labels: frozenset[DiseaseLabel]
    age: int
    gender: int
    dropped_raw: tuple[tuple[str, str], ...] = ()


@dataclasses.dataclass(frozen=True)
class RejectedRecord:
    image_id: str
    reason: str  # multi_factor | pneumonia_only | outlier | parse_error
    detail: str = ""


@dataclasses.dataclass(frozen=True)
class StageCounts:
    raw: int
    single_factor: int
    clean: int

    def __post_init__(self):
        if not self.raw >= self.single_factor >= self.clean >= 0:
            raise DomainError(
                f"stage counts must be non-increasing, got {self.raw} >= "
                f"{self.single_factor} >= {self.clean}")

    @property
    def removed_outliers(self) -> int:
        return self.single_factor - self.clean

    def to_dict(self) -> dict:
        return {"raw": self.raw, "single_factor": self.single_factor,
                "clean": self.clean, "removed_outliers": self.removed_outliers}


@dataclasses.dataclass
class CleanDataset:
    records: list[MetadataRecord]
    provenance: StageCounts


def _open_source(source):
    if hasattr(source, "read"):
        return source, False
    return open(source, "r", newline="", encoding="utf-8"), True


def parse_metadata_csv(source) -> tuple[list[MetadataRecord], list[RejectedRecord]]:
    """Parse an NIH-schema CSV into records plus a report of rejected rows.

    Mandatory columns are ``Image Index``, ``Finding Labels``, ``Patient Age``
    and ``Patient Gender``; a missing one raises :class:`DataSchemaError`.
    All other columns are preserved verbatim in ``dropped_raw``. Ages are
    read as the leading integer of the field (``"58"`` and ``"058Y"`` both
    give 58); bad ages, genders or label tokens reject the row with reason
    ``parse_error`` instead of aborting the whole file.
    """
    fh, owned = _open_source(source)
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in MANDATORY_COLUMNS:
            if column not in header:
                raise DataSchemaError(f"missing mandatory column: {column!r}")
        records: list[MetadataRecord] = []
        rejects: list[RejectedRecord] = []
        for row in reader:
            image_id = (row.get("Image Index") or "").strip()
            try:
                records.append(_parse_row(image_id, row))
            except ValueError as exc:
                rejects.append(RejectedRecord(image_id, "parse_error", str(exc)))
        return records, rejects
    finally:
        if owned:
            fh.close()


def _parse_row(image_id: str, row: dict) -> MetadataRecord:
    if not image_id:
        raise ValueError("empty Image Index")
    age_match = _AGE_PATTERN.match(row["Patient Age"] or "")
    if not age_match:
        raise ValueError(f"unparseable age {row['Patient Age']!r}")
    age = int(age_match.group(1))
    gender_raw = (row["Patient Gender"] or "").strip().upper()
    if gender_raw == "M":
        gender = 1
    elif gender_raw == "F":
        gender = 0
    else:
        raise ValueError(f"unparseable gender {row['Patient Gender']!r}")
    labels = set()
    for token in (row["Finding Labels"] or "").split("|"):
        token = token.strip()
        if not token:
            continue
        try:
            labels.add(DiseaseLabel(token))
        except ValueError:
            raise ValueError(f"unknown label {token!r}") from None
    if not labels:
        raise ValueError("empty label set")
    dropped = tuple((k, row[k]) for k in row
                    if k and k not in MANDATORY_COLUMNS and row[k] is not None)
    return MetadataRecord(image_id=image_id, labels=frozenset(labels),
                          age=age, gender=gender, dropped_raw=dropped)


def clean_labels(records: Sequence[MetadataRecord],
                 ) -> tuple[list[MetadataRecord], list[RejectedRecord]]:
    """Strip Pneumonia, then keep single-factor records only.

    Pneumonia removal happens first, so e.g. ``{Pneumonia, Effusion}``
    survives as single-label Effusion; a record left with no label at all
    is rejected as ``pneumonia_only`` and one with several remaining labels
    as ``multi_factor``.
    """
    kept: list[MetadataRecord] = []
    rejects: list[RejectedRecord] = []
    for record in records:
        labels = record.labels - {DiseaseLabel.PNEUMONIA}
        if not labels:
            rejects.append(RejectedRecord(record.image_id, "pneumonia_only"))
        elif len(labels) > 1:
            rejects.append(RejectedRecord(
                record.image_id, "multi_factor",
                "|".join(sorted(l.value for l in labels))))
        else:
            kept.append(dataclasses.replace(record, labels=frozenset(labels)))
    return kept, rejects


def build_features(records: Sequence[MetadataRecord]) -> np.ndarray:
    """Detector feature matrix: column 0 is z-scored age, column 1 raw gender."""
    if not records:
        raise DomainError("no records")
    ages = np.array([r.age for r in records], dtype=float)
    genders = np.array([r.gender for r in records], dtype=float)
    std = ages.std()
    z = (ages - ages.mean()) / std if std > 0 else np.zeros_like(ages)
    return as_feature_matrix(np.column_stack([z, genders]))


def apply_outlier_removal(records: Sequence[MetadataRecord],
                          verdicts: Sequence[OutlierVerdict],
                          raw_count: int | None = None) -> CleanDataset:
    """Drop records whose fused verdict is outlier; keep stage counts."""
    if len(records) != len(verdicts):
        raise ShapeMismatchError(
            f"{len(records)} records but {len(verdicts)} verdicts")
    kept = [r for r, v in zip(records, verdicts) if not v.is_outlier]
    counts = StageCounts(raw=len(records) if raw_count is None else raw_count,
                         single_factor=len(records), clean=len(kept))
    return CleanDataset(records=kept, provenance=counts)


def label_counts(dataset: CleanDataset) -> dict[DiseaseLabel, int]:
    """Exact per-label tally over the 14 retained classes (zeros included)."""
    counts = {label: 0 for label in RETAINED_LABELS}
    for record in dataset.records:
        if len(record.labels) != 1:
            raise DomainError(f"record {record.image_id} is not single-label")
        (label,) = record.labels
        if label not in counts:
            raise DomainError(f"record {record.image_id} carries transient label {label.value}")
        counts[label] += 1
    return counts


@dataclasses.dataclass
class PipelineResult:
    dataset: CleanDataset
    rejects: list[RejectedRecord]
    verdicts: list[OutlierVerdict]


def run_clean_pipeline(source, cfg: DetectorConfig) -> PipelineResult:
    """Full metadata pipeline: parse, clean labels, detect and drop outliers."""
    records, rejects = parse_metadata_csv(source)
    raw_count = len(records) + len(rejects)
    single, label_rejects = clean_labels(records)
    rejects = rejects + label_rejects
    if not single:
        dataset = CleanDataset(records=[], provenance=StageCounts(raw_count, 0, 0))
        return PipelineResult(dataset=dataset, rejects=rejects, verdicts=[])
    features = build_features(single)
    result = detect_outliers(features, cfg, sample_ids=[r.image_id for r in single])
    dataset = apply_outlier_removal(single, result.verdicts, raw_count=raw_count)
    rejects = rejects + [RejectedRecord(v.sample_id, "outlier",
                                        f"votes={v.vote_count}")
                         for v in result.verdicts if v.is_outlier]
    return PipelineResult(dataset=dataset, rejects=rejects, verdicts=result.verdicts)


# ---------------------------------------------------------------------------
# file formats


def write_clean_csv(dataset: CleanDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "label", "age", "gender"])
        for r in dataset.records:
            (label,) = r.labels
            writer.writerow([r.image_id, label.value, r.age, r.gender])


def read_clean_csv(path) -> list[tuple[str, DiseaseLabel, int, int]]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["image_id", "label", "age", "gender"]
        if reader.fieldnames != expected:
            raise DataSchemaError(
                f"clean CSV must have columns {expected}, got {reader.fieldnames}")
        rows = []
        for row in reader:
            try:
                label = DiseaseLabel(row["label"])
            except ValueError:
                raise DataSchemaError(f"unknown label {row['label']!r}") from None
            rows.append((row["image_id"], label, int(row["age"]), int(row["gender"])))
        return rows


def write_rejects_csv(rejects: Sequence[RejectedRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "reason", "detail"])
        for r in rejects:
            writer.writerow([r.image_id, r.reason, r.detail])


def write_provenance_json(counts: StageCounts, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(counts.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def records_from_text(text: str) -> tuple[list[MetadataRecord], list[RejectedRecord]]:
    """Convenience parser for in-memory CSV text (tests, fixtures)."""
    return parse_metadata_csv(io.StringIO(text))
