"""Accuracy tables: ingest, validate, persist and query.

All accuracies are stored as fractions in [0, 1]. Percent values are only
accepted at the file boundary, when the file says so explicitly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

LR_RESOLUTIONS = (16, 32, 64, 128)
HR_RESOLUTIONS = (224, 256, 336, 372, 378, 384, 512)
CSV_FIELDS = ("model_id", "backbone_id", "dataset_id", "resolution", "top1", "top5")


class IngestError(ValueError):
    """Raised when an accuracy file or a meta file fails validation."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class DatasetMeta:
    dataset_id: str
    num_classes: int

    def __post_init__(self):
        if int(self.num_classes) != self.num_classes or self.num_classes < 1:
            raise IngestError(f"dataset {self.dataset_id!r}: num_classes must be a positive integer")

    @property
    def a_rand(self) -> float:
        """Accuracy of uniform random guessing, 1/C."""
        return 1.0 / self.num_classes


@dataclass(frozen=True)
class ModelMeta:
    model_id: str
    backbone_id: str
    hr_resolution: int
    param_count: int | None = None

    def __post_init__(self):
        if self.hr_resolution not in HR_RESOLUTIONS:
            raise IngestError(
                f"model {self.model_id!r}: hr_resolution {self.hr_resolution} not in {HR_RESOLUTIONS}"
            )


@dataclass(frozen=True)
class AccuracyRecord:
    model_id: str
    backbone_id: str
    dataset_id: str
    resolution: int
    top1: float
    top5: float | None = None

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.model_id, self.dataset_id, self.resolution)


@dataclass
class ResultsTable:
    """Validated accuracy records plus the meta data they refer to.

    Treat as immutable once built; ``add`` is only used during ingestion.
    """

    datasets: dict[str, DatasetMeta] = field(default_factory=dict)
    models: dict[str, ModelMeta] = field(default_factory=dict)
    _records: dict[tuple[str, str, int], AccuracyRecord] = field(default_factory=dict, repr=False)

    def add(self, rec: AccuracyRecord, row: int | None = None) -> None:
        _validate_record(rec, self, row)
        if rec.key in self._records:
            raise IngestError(f"duplicate key {rec.key}", row)
        self._records[rec.key] = rec

    @property
    def records(self) -> list[AccuracyRecord]:
        return list(self._records.values())

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[AccuracyRecord]:
        return iter(self._records.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResultsTable):
            return NotImplemented
        return (
            self._records == other._records
            and self.datasets == other.datasets
            and self.models == other.models
        )

    def query(self, model_id: str, dataset_id: str, resolution: int) -> float | None:
        """Top-1 accuracy for the key, or None when the cell is absent."""
        rec = self._records.get((model_id, dataset_id, int(resolution)))
        return None if rec is None else rec.top1

    def coverage(self) -> set[tuple[str, str, int]]:
        """The (model, dataset, resolution) triples present in the table."""
        return set(self._records)

    def model_ids(self) -> list[str]:
        return sorted({k[0] for k in self._records})

    def dataset_ids(self) -> list[str]:
        return sorted({k[1] for k in self._records})

    def resolutions(self) -> list[int]:
        return sorted({k[2] for k in self._records})

    def hr_resolution(self, model_id: str) -> int:
        return self.models[model_id].hr_resolution


def query(table: ResultsTable, model_id: str, dataset_id: str, resolution: int) -> float | None:
    return table.query(model_id, dataset_id, resolution)


def _validate_record(rec: AccuracyRecord, table: ResultsTable, row: int | None) -> None:
    if rec.dataset_id not in table.datasets:
        raise IngestError(f"unknown dataset_id {rec.dataset_id!r}", row)
    if rec.model_id not in table.models:
        raise IngestError(f"unknown model_id {rec.model_id!r}", row)
    for name in ("top1", "top5"):
        v = getattr(rec, name)
        if v is None:
            continue
        if not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise IngestError(f"{name}={v} outside [0, 1]", row)
    if rec.top5 is not None and rec.top5 < rec.top1:
        raise IngestError(f"top5={rec.top5} < top1={rec.top1}", row)
    hr = table.models[rec.model_id].hr_resolution
    if rec.resolution not in LR_RESOLUTIONS and rec.resolution != hr:
        raise IngestError(
            f"resolution {rec.resolution} is neither a low resolution {LR_RESOLUTIONS} "
            f"nor the HR resolution {hr} of {rec.model_id!r}",
            row,
        )


# ---------------------------------------------------------------------------
# meta files


def load_datasets(path: str | Path) -> dict[str, DatasetMeta]:
    out = {}
    for i, obj in enumerate(_load_json_list(path)):
        try:
            meta = DatasetMeta(str(obj["id"]), int(obj["num_classes"]))
        except KeyError as exc:
            raise IngestError(f"{path}: entry {i} lacks field {exc}") from None
        out[meta.dataset_id] = meta
    return out


def load_models(path: str | Path) -> dict[str, ModelMeta]:
    out = {}
    for i, obj in enumerate(_load_json_list(path)):
        try:
            pc = obj.get("param_count")
            meta = ModelMeta(
                str(obj["id"]),
                str(obj["backbone"]),
                int(obj["hr_resolution"]),
                None if pc is None else int(pc),
            )
        except KeyError as exc:
            raise IngestError(f"{path}: entry {i} lacks field {exc}") from None
        out[meta.model_id] = meta
    return out


def save_datasets(datasets: Iterable[DatasetMeta], path: str | Path) -> None:
    data = [{"id": d.dataset_id, "num_classes": d.num_classes} for d in datasets]
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def save_models(models: Iterable[ModelMeta], path: str | Path) -> None:
    data = []
    for m in models:
        obj = {"id": m.model_id, "backbone": m.backbone_id, "hr_resolution": m.hr_resolution}
        if m.param_count is not None:
            obj["param_count"] = m.param_count
        data.append(obj)
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _load_json_list(path) -> list:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise IngestError(f"{path}: expected a JSON array")
    return data


# ---------------------------------------------------------------------------
# accuracy files


def ingest(
    path: str | Path,
    format: str | None = None,
    datasets: dict[str, DatasetMeta] | str | Path | None = None,
    models: dict[str, ModelMeta] | str | Path | None = None,
) -> ResultsTable:
    """Read an accuracy file into a validated :class:`ResultsTable`.

    Parameters
    ----------
    path : path to a CSV or JSON accuracy file.
    format : ``"csv"`` or ``"json"``; inferred from the suffix when omitted.
    datasets, models : meta dictionaries or paths to ``datasets.json`` /
        ``models.json``. When omitted, the files of that name next to
        ``path`` are used.

    Raises
    ------
    IngestError
        On duplicate keys, out-of-range accuracies or unresolvable ids. The
        message carries the 1-based data row number.
    FileNotFoundError
        When the accuracy file or a meta file is missing.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    if format not in ("csv", "json"):
        raise ValueError(f"unknown format {format!r}")
    table = ResultsTable(
        datasets=_resolve_meta(datasets, path.parent / "datasets.json", load_datasets),
        models=_resolve_meta(models, path.parent / "models.json", load_models),
    )
    text = path.read_text()
    rows, percent = _parse_json(text) if format == "json" else _parse_csv(text)
    scale = 0.01 if percent else 1.0
    hi = 100.0 if percent else 1.0
    for i, raw in enumerate(rows, start=1):
        table.add(_record_from_raw(raw, i, scale, hi), row=i)
    return table


def _resolve_meta(meta, default_path: Path, loader):
    if meta is None:
        return loader(default_path)
    if isinstance(meta, (str, Path)):
        return loader(meta)
    return dict(meta)


def _parse_csv(text: str) -> tuple[list[dict], bool]:
    lines = text.splitlines()
    percent = False
    if lines and lines[0].startswith("#"):
        flags = lines.pop(0).lstrip("#").strip().replace(" ", "")
        percent = "unit=percent" in flags.split(",")
    if not lines:
        raise IngestError("missing CSV header")
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    missing = set(CSV_FIELDS[:5]) - set(reader.fieldnames or ())
    if missing:
        raise IngestError(f"CSV header lacks {sorted(missing)}")
    return list(reader), percent


def _parse_json(text: str) -> tuple[list[dict], bool]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IngestError(f"invalid JSON ({exc})") from None
    percent = False
    if isinstance(data, dict):
        percent = data.get("unit") == "percent"
        data = data.get("records", [])
    if not isinstance(data, list):
        raise IngestError("expected a JSON array of records")
    return data, percent


def _record_from_raw(raw: dict, row: int, scale: float, hi: float) -> AccuracyRecord:
    try:
        top1 = float(raw["top1"])
        top5 = raw.get("top5")
        top5 = None if top5 in (None, "") else float(top5)
        resolution = int(raw["resolution"])
        model_id, backbone_id, dataset_id = (str(raw[k]) for k in CSV_FIELDS[:3])
    except KeyError as exc:
        raise IngestError(f"missing field {exc}", row) from None
    except (TypeError, ValueError) as exc:
        raise IngestError(f"malformed value ({exc})", row) from None
    for name, v in (("top1", top1), ("top5", top5)):
        if v is not None and not (0.0 <= v <= hi):
            raise IngestError(f"{name}={v} outside [0, {hi:g}]", row)
    if resolution < 1:
        raise IngestError(f"resolution {resolution} is not positive", row)
    return AccuracyRecord(
        model_id,
        backbone_id,
        dataset_id,
        resolution,
        top1 * scale,
        None if top5 is None else top5 * scale,
    )


def dump(table: ResultsTable, path: str | Path, format: str | None = None) -> None:
    """Write the records of ``table`` as fractions (CSV or JSON).

    ``repr`` of floats is used so that ingesting the output reproduces the
    table exactly.
    """
    path = Path(path)
    if format is None:
        format = "json" if path.suffix.lower() == ".json" else "csv"
    recs = sorted(table, key=lambda r: (r.model_id, r.dataset_id, r.resolution))
    if format == "json":
        data = [
            {
                "model_id": r.model_id,
                "backbone_id": r.backbone_id,
                "dataset_id": r.dataset_id,
                "resolution": r.resolution,
                "top1": r.top1,
                **({} if r.top5 is None else {"top5": r.top5}),
            }
            for r in recs
        ]
        path.write_text(json.dumps(data, indent=1) + "\n")
        return
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in recs:
            w.writerow([
                r.model_id, r.backbone_id, r.dataset_id, r.resolution,
                repr(r.top1), "" if r.top5 is None else repr(r.top5),
            ])
