"""
Dataset files - one JSON record per line (.scga.jsonl)

Floats are written with Python's shortest round-trip repr, so values read back bit-equal.
"""
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.dialogue_world import DialogueSample
from core.encoders import VideoObjects, Vocabulary
from core.errors import ContractError, DatasetError

logger = logging.getLogger(__name__)

SUFFIX = ".scga.jsonl"
SPLITS = ("train", "eval")
VOCAB_FILE = "vocab.txt"


class VideoRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    appearance: List[List[List[float]]] = Field(..., description="T x O x d_v appearance vectors")
    boxes: List[List[List[float]]] = Field(..., description="T x O x [x, y, w, h], relative to the frame")
    labels: List[List[str]] = Field(..., description="T x O object labels")


class TurnRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    question: List[str]
    answer: List[str]


class SampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    video: VideoRecord
    caption: List[str]
    turns: List[TurnRecord]
    round: int = Field(..., ge=1)
    question: List[str]
    answer: List[str]
    referent: Optional[int] = Field(None, description="History unit holding the planted antecedent")

    @classmethod
    def from_sample(cls, sample: DialogueSample) -> "SampleRecord":
        return cls(
            id=sample.sample_id,
            video=VideoRecord(appearance=sample.video.appearance.tolist(), boxes=sample.video.boxes.tolist(),
                              labels=[list(row) for row in sample.video.labels]),
            caption=list(sample.caption),
            turns=[TurnRecord(question=list(q), answer=list(a)) for q, a in sample.turns],
            round=sample.round, question=list(sample.question), answer=list(sample.answer),
            referent=sample.referent,
        )

    def to_sample(self) -> DialogueSample:
        video = VideoObjects(appearance=np.array(self.video.appearance, dtype=np.float64),
                             boxes=np.array(self.video.boxes, dtype=np.float64),
                             labels=[list(row) for row in self.video.labels])
        return DialogueSample(
            sample_id=self.id, video=video, caption=list(self.caption),
            turns=[(list(t.question), list(t.answer)) for t in self.turns], round=self.round,
            question=list(self.question), answer=list(self.answer), referent=self.referent,
            entity_labels=list(self.video.labels[0]) if self.video.labels else [],
        )


def dataset_path(data_dir: Path, split: str) -> Path:
    if split not in SPLITS:
        raise ContractError(f"split must be one of {SPLITS}, got {split!r}")
    return Path(data_dir) / f"{split}{SUFFIX}"


def encode_record(sample: DialogueSample) -> str:
    return json.dumps(SampleRecord.from_sample(sample).model_dump(), ensure_ascii=False)


def write_dataset(path: Path, samples: Iterable[DialogueSample]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(encode_record(sample) + "\n")
            count += 1
    logger.info("wrote %d samples to %s", count, path)
    return count


def _validation_message(exc: ValidationError) -> tuple:
    err = exc.errors()[0]
    field = ".".join(str(p) for p in err.get("loc", ()))
    if err.get("type") == "missing":
        return f"missing required field '{field}'", field
    return f"field '{field}': {err.get('msg')}", field


def parse_record(text: str, line: Optional[int] = None) -> DialogueSample:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"not valid JSON ({exc.msg})", line=line) from exc
    try:
        record = SampleRecord.model_validate(payload)
    except ValidationError as exc:
        message, field = _validation_message(exc)
        raise DatasetError(message, line=line, field=field) from exc
    try:
        sample = record.to_sample()
    except ValueError as exc:
        raise DatasetError(f"video arrays are not rectangular ({exc})", line=line, field="video") from exc
    try:
        sample.validate()
    except ContractError as exc:
        raise DatasetError(str(exc), line=line) from exc
    return sample


def read_dataset(path: Path) -> List[DialogueSample]:
    """
    Parse a dataset file

    Raises:
        FileNotFoundError: path does not exist
        DatasetError: malformed record, with 1-based line number and field
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")
    samples = []
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                text = raw.decode("utf-8", errors="strict")
            except UnicodeDecodeError as exc:
                raise DatasetError(f"not valid UTF-8 ({exc.reason} at byte {exc.start})", line=lineno) from exc
            if text.strip():
                samples.append(parse_record(text, line=lineno))
    if not samples:
        raise DatasetError(f"{path} holds no records")
    return samples


def build_vocabulary(samples: Iterable[DialogueSample]) -> Vocabulary:
    """Every word of captions, turns, questions and answers"""
    def streams():
        for s in samples:
            yield s.caption
            for q, a in s.turns:
                yield q
                yield a
            yield s.question
            yield s.answer
    return Vocabulary.build(streams())
