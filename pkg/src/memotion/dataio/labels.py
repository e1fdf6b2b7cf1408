"""Five-category meme labels, their coarsening, and the organiser label file."""

from __future__ import annotations

import csv
from dataclasses import dataclass, astuple
from importlib import resources
from pathlib import Path

from ..errors import FormatError, InputError, ParseError

TASKS = ("sentiment", "humor", "sarcasm", "offense", "motivation")
NUM_CLASSES = {"sentiment": 3, "humor": 4, "sarcasm": 4, "offense": 4, "motivation": 2}
SCALE_TASKS = ("humor", "sarcasm", "offense")
CATEGORY_TASKS = ("humor", "sarcasm", "offense", "motivation")

# label-file column -> task
COLUMNS = {
    "overall_sentiment": "sentiment",
    "humour": "humor",
    "sarcasm": "sarcasm",
    "offensive": "offense",
    "motivational": "motivation",
}
TEXT_COLUMNS = ("text", "text_corrected", "text_ocr")


@dataclass(frozen=True)
class LabelSet:
    """Fine-grained labels; humor/sarcasm/offense use 0 (absent) .. 3 (strongest)."""

    sentiment: int
    humor: int
    sarcasm: int
    offense: int
    motivation: int

    def __post_init__(self):
        for task, value in zip(TASKS, astuple(self)):
            if not 0 <= value < NUM_CLASSES[task]:
                raise InputError(f"{task} label {value} outside [0, {NUM_CLASSES[task]})")

    def as_tuple(self) -> tuple[int, ...]:
        return astuple(self)

    def coarse(self) -> dict[str, int]:
        """Binary labels of the four categories (sentiment is not coarsened)."""
        return {task: coarsen(task, getattr(self, task)) for task in CATEGORY_TASKS}


def coarsen(task: str, fine: int) -> int:
    """Map a fine label onto its binary category label."""
    if task in SCALE_TASKS:
        return int(fine > 0)
    return int(fine)


def load_label_map(path: str | Path | None = None) -> dict[str, dict[str, int]]:
    """``column -> {label string -> code}`` from a tab-separated mapping file."""
    if path is None:
        text = resources.files(__package__).joinpath("label_map.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table: dict[str, dict[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"label map line {lineno}: expected 3 tab-separated fields")
        column, label, code = parts
        table.setdefault(column, {})[label.strip().lower()] = int(code)
    missing = set(COLUMNS) - set(table)
    if missing:
        raise FormatError(f"label map lacks columns: {sorted(missing)}")
    return table


def canonical_names(label_map: dict[str, dict[str, int]] | None = None) -> dict[str, list[str]]:
    """``task -> class names`` using the first label listed for each code."""
    label_map = label_map or load_label_map()
    names: dict[str, list[str]] = {}
    for column, task in COLUMNS.items():
        by_code: dict[int, str] = {}
        for label, code in label_map[column].items():
            by_code.setdefault(code, label)
        names[task] = [by_code[c] for c in range(NUM_CLASSES[task])]
    return names


def parse_label_file(path, label_map=None) -> list[tuple[str, str, LabelSet]]:
    """Read ``(image_name, text, LabelSet)`` rows from a CSV or TSV label file."""
    label_map = label_map or load_label_map()
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        header = fh.readline()
        delimiter = "\t" if "\t" in header else ","
        fh.seek(0)
        reader = csv.DictReader(fh, delimiter=delimiter)
        fields = [f.strip() for f in reader.fieldnames or []]
        reader.fieldnames = fields
        text_col = next((c for c in TEXT_COLUMNS if c in fields), None)
        missing = [c for c in ("image_name", *COLUMNS) if c not in fields]
        if text_col is None:
            missing.append("text")
        if missing:
            raise FormatError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = []
        for row_no, row in enumerate(reader, start=2):
            codes = {}
            for column, task in COLUMNS.items():
                raw = (row.get(column) or "").strip().lower()
                if raw not in label_map[column]:
                    raise ParseError(f"{path}: unknown {column} label {raw!r}", row=row_no)
                codes[task] = label_map[column][raw]
            rows.append((row["image_name"].strip(), row[text_col] or "", LabelSet(**codes)))
    return rows
