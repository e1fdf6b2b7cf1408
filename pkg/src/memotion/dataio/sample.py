from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import TASKS, LabelSet


@dataclass
class EncodedText:
    input_ids: np.ndarray
    input_mask: np.ndarray
    segment_ids: np.ndarray
    truncated: bool = False

    def __len__(self):
        return len(self.input_ids)


@dataclass
class MemeSample:
    id: str
    image: np.ndarray | None  # 3×R×R, normalised
    text: EncodedText | None
    labels: LabelSet


@dataclass
class Batch:
    ids: list[str]
    images: np.ndarray | None
    input_ids: np.ndarray | None
    input_mask: np.ndarray | None
    segment_ids: np.ndarray | None
    labels: np.ndarray  # (B, 5) in TASKS order

    def __len__(self):
        return len(self.ids)

    def task_labels(self, task: str) -> np.ndarray:
        return self.labels[:, TASKS.index(task)]


def collate(samples: list[MemeSample]) -> Batch:
    has_image = all(s.image is not None for s in samples)
    has_text = all(s.text is not None for s in samples)
    return Batch(
        ids=[s.id for s in samples],
        images=np.stack([s.image for s in samples]) if has_image and samples else None,
        input_ids=np.stack([s.text.input_ids for s in samples]) if has_text and samples else None,
        input_mask=np.stack([s.text.input_mask for s in samples]) if has_text and samples else None,
        segment_ids=np.stack([s.text.segment_ids for s in samples]) if has_text and samples else None,
        labels=np.array([s.labels.as_tuple() for s in samples], dtype=np.int64).reshape(len(samples), len(TASKS)),
    )
