"""Region-annotation records on a 7x7 grid: CSV reading, writing, validation, cell MOS."""

import csv
from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Dict, Iterable, List

import numpy as np

from .errors import ValidationError

GRID = 7
HEADER = ["image_id", "row", "col", "annotator_id", "score"]
SCORE_MIN = Decimal("1")
SCORE_MAX = Decimal("5")


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    row: int
    col: int
    annotator_id: str
    score: float


def parse_score(text: str, row: int = None) -> float:
    try:
        value = Decimal(text.strip())
    except InvalidOperation:
        raise ValidationError(f"score {text!r} is not a number", row) from None
    if not value.is_finite() or value < SCORE_MIN or value > SCORE_MAX or (value * 2) % 1 != 0:
        raise ValidationError(f"score {text!r} is not on the 1.0..5.0 half-point lattice", row)
    return float(value)


def format_score(score: float) -> str:
    return f"{Decimal(str(score)).quantize(Decimal('0.1'))}"


def validate_records(records: List[AnnotationRecord], rows: List[int] = None) -> None:
    """Check duplicates and grid completeness; ``rows`` gives the CSV row of each record."""
    rows = rows or list(range(1, len(records) + 1))
    seen = {}
    per_image: Dict[str, Dict[tuple, set]] = defaultdict(lambda: defaultdict(set))
    first_row = {}
    for rec, r in zip(records, rows):
        if not (0 <= rec.row < GRID and 0 <= rec.col < GRID):
            raise ValidationError(f"cell ({rec.row}, {rec.col}) outside the {GRID}x{GRID} grid", r)
        key = (rec.image_id, rec.row, rec.col, rec.annotator_id)
        if key in seen:
            raise ValidationError(f"duplicate annotation {key} (first at row {seen[key]})", r)
        seen[key] = r
        per_image[rec.image_id][(rec.row, rec.col)].add(rec.annotator_id)
        first_row.setdefault(rec.image_id, r)
    for image_id, cells in per_image.items():
        if len(cells) != GRID * GRID:
            raise ValidationError(
                f"image {image_id!r} covers {len(cells)} of {GRID * GRID} cells", first_row[image_id])
        annotators = next(iter(cells.values()))
        for cell, who in cells.items():
            if who != annotators:
                raise ValidationError(
                    f"image {image_id!r} cell {cell} has a different annotator set", first_row[image_id])


def load_lpvq_csv(path) -> List[AnnotationRecord]:
    records, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise ValidationError(f"expected header {','.join(HEADER)}, got {header}", 0)
        for n, fields in enumerate(reader, start=1):
            if not fields:
                continue
            if len(fields) != len(HEADER):
                raise ValidationError(f"expected {len(HEADER)} fields, got {len(fields)}", n)
            image_id, row, col, annotator, score = (f.strip() for f in fields)
            try:
                r, c = int(row), int(col)
            except ValueError:
                raise ValidationError(f"non-integer grid position ({row!r}, {col!r})", n) from None
            records.append(AnnotationRecord(image_id, r, c, annotator, parse_score(score, n)))
            rows.append(n)
    validate_records(records, rows)
    return records


def write_lpvq_csv(path, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HEADER)
        for rec in records:
            writer.writerow([rec.image_id, rec.row, rec.col, rec.annotator_id, format_score(rec.score)])


def image_ids(records: Iterable[AnnotationRecord]) -> List[str]:
    return list(dict.fromkeys(r.image_id for r in records))


def cell_mos(records: Iterable[AnnotationRecord], image_id: str) -> np.ndarray:
    """Per-cell mean score over annotators for one image, as a 7x7 array."""
    total = np.zeros((GRID, GRID))
    count = np.zeros((GRID, GRID))
    for rec in records:
        if rec.image_id == image_id:
            total[rec.row, rec.col] += rec.score
            count[rec.row, rec.col] += 1
    if not count.all():
        raise ValidationError(f"image {image_id!r} has unannotated cells")
    return total / count
