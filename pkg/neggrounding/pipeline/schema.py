"""Record schemas for the dataset pipeline.

Input annotations, model replies and emitted records are pydantic models so
that malformed JSON is rejected at the boundary.
"""

from __future__ import annotations

import json
from typing import Iterable, Iterator, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import FormatError, SchemaError

Split = Literal["S", "M", "L"]
MIN_ATTRIBUTES = 3


def _check_box(box: list[float]) -> list[float]:
    if len(box) != 4:
        raise ValueError(f"box needs 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {box}")
    return box


class RegionInput(BaseModel):
    model_config = ConfigDict(extra="ignore")

    box: list[float]
    phrase: str = Field(min_length=1)
    phrase_type: str = Field(min_length=1)

    @field_validator("box")
    @classmethod
    def valid_box(cls, box):
        return _check_box(box)


class ImageAnnotations(BaseModel):
    """One line of the annotations JSONL."""

    model_config = ConfigDict(extra="ignore")

    image_id: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    regions: list[RegionInput] = Field(default_factory=list)

    @field_validator("image_id", mode="before")
    @classmethod
    def stringify_id(cls, value):
        return str(value)

    @model_validator(mode="after")
    def regions_inside(self):
        for r in self.regions:
            x1, y1, x2, y2 = r.box
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ValueError(f"region {r.phrase!r} box {r.box} exceeds image {self.width}x{self.height}")
        return self

    def region(self, index: int) -> "RegionAnnotation":
        r = self.regions[index]
        return RegionAnnotation(
            image_id=self.image_id,
            width=self.width,
            height=self.height,
            index=index,
            box=r.box,
            phrase=r.phrase,
            phrase_type=r.phrase_type,
        )


class RegionAnnotation(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: str
    width: int
    height: int
    index: int
    box: list[float]
    phrase: str = Field(min_length=1)
    phrase_type: str

    @field_validator("box")
    @classmethod
    def valid_box(cls, box):
        return _check_box(box)

    @model_validator(mode="after")
    def inside_image(self):
        x1, y1, x2, y2 = self.box
        if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
            raise ValueError(f"box {self.box} exceeds image {self.width}x{self.height}")
        return self

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


class OverlayLabel(BaseModel):
    letter: str = Field(pattern=r"^[A-Z]$")
    box: list[float]
    anchor: tuple[float, float]
    inside: bool


class OverlaySpec(BaseModel):
    width: int
    height: int
    target_box: list[float]
    labels: list[OverlayLabel] = Field(default_factory=list)
    line_width: int = 3

    @model_validator(mode="after")
    def unique_letters(self):
        letters = [label.letter for label in self.labels]
        if len(set(letters)) != len(letters):
            raise ValueError(f"duplicate overlay letters {letters}")
        return self

    @property
    def letters(self) -> list[str]:
        return [label.letter for label in self.labels]


class AttributeExtraction(BaseModel):
    present: list[str]
    absent: list[str]

    def is_complete(self, minimum: int = MIN_ATTRIBUTES) -> bool:
        return len(self.present) >= minimum and len(self.absent) >= minimum


class CaptionPair(BaseModel):
    c_pos: str
    c_neg: str
    pos_attribute: str
    neg_attribute: str
    cues: list[str] = Field(default_factory=list)


AnswerToken = str  # "target", "none" or a single letter


class AlignmentVerdict(BaseModel):
    pos_match: AnswerToken
    neg_match: AnswerToken
    accepted: bool

    @classmethod
    def decide(cls, pos_match: str, neg_match: str) -> "AlignmentVerdict":
        return cls(pos_match=pos_match, neg_match=neg_match, accepted=verdict_accepts(pos_match, neg_match))


def verdict_accepts(pos_match: str, neg_match: str) -> bool:
    """C_pos must land on the target; C_neg on nothing or on another instance."""
    return pos_match == "target" and neg_match != "target"


class DatasetRecord(BaseModel):
    region: RegionAnnotation
    attributes: AttributeExtraction
    captions: CaptionPair
    verdict: AlignmentVerdict
    retry_count: int = Field(ge=0)
    split: Split
    rationale: dict[str, str] = Field(default_factory=dict)


# --- model reply shapes ---

class _Captions(BaseModel):
    negative: str
    negative_attribute: str
    positive: str
    positive_attribute: str


class _Verification(BaseModel):
    negative: str = ""
    positive: str = ""


class CaptionReply(BaseModel):
    """Structured JSON the generator returns for the three reasoning steps."""

    attributes: AttributeExtraction
    captions: _Captions
    verification: _Verification = Field(default_factory=_Verification)

    def pair(self, cues: list[str]) -> CaptionPair:
        return CaptionPair(
            c_pos=self.captions.positive,
            c_neg=self.captions.negative,
            pos_attribute=self.captions.positive_attribute,
            neg_attribute=self.captions.negative_attribute,
            cues=cues,
        )


def parse_reply(payload: dict, model: type[BaseModel]) -> BaseModel:
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        raise SchemaError(f"reply does not match {model.__name__}: {e.error_count()} error(s)") from e


def read_annotations(lines: Iterable[str]) -> Iterator[ImageAnnotations]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield ImageAnnotations.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as e:
            raise FormatError(f"annotations line {lineno}: {e}") from e


def read_records(lines: Iterable[str]) -> Iterator[DatasetRecord]:
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            yield DatasetRecord.model_validate_json(line)
        except ValidationError as e:
            raise FormatError(f"record line {lineno}: {e}") from e
