"""Prompt templates sent to the generator and VQA models."""

from __future__ import annotations

import json
from typing import Sequence

GENERATION_TEMPLATE = """\
You are given an image with one region highlighted by a red bounding box.
The region shows {phrase!r}, an object of type "{phrase_type}". Describe only
what is inside the red box and ignore the rest of the image.

Step 1 - Attributes. List at least three attributes that are visibly present
in the region (colours, clothing, actions, relations, ...) and at least three
relevant attributes one could expect but that are absent.

Step 2 - Captions. Write two single-sentence captions about the subject:
  * a negative caption that uses a negation word (no, not, never, without, n't
    or an un- word) on one PRESENT attribute, so it is false for this region;
  * a positive caption that uses a negation word on one ABSENT attribute, so it
    is true for this region.

Step 3 - Verification. Check that each caption contains a negation word, uses
an attribute from step 1 and is true (positive) or false (negative) for the
region. If a check fails, rewrite the caption before answering.

Return ONLY one JSON object, no markdown, with this shape:
{{
  "attributes": {{"present": ["..."], "absent": ["..."]}},
  "captions": {{
    "negative": "...", "negative_attribute": "...",
    "positive": "...", "positive_attribute": "..."
  }},
  "verification": {{"negative": "...", "positive": "..."}}
}}
"""

ALIGNMENT_TEMPLATE = """\
The image shows one unlabelled red box (the target) and {count} red boxes
tagged with letters ({letters}).
Which labelled box aligns with the caption: "{caption}"?
Answer with exactly one of: {choices}. Use "target" for the unlabelled box and
"none" if no box matches. Return only the answer.
"""

CROP_VERIFY_TEMPLATE = """\
Does this image crop show "{query}"? Answer with only "yes" or "no".
"""

COORDINATE_TEMPLATE = """\
The image contains the following numbered boxes as [x1, y1, x2, y2] pixel
coordinates:
{boxes}
The detector claims every box matches the description "{query}".
Which boxes are inconsistent with the description? Return ONLY a JSON object
{{"inconsistent": [box numbers]}}, with an empty list if all boxes match.
"""


def generation_prompt(phrase: str, phrase_type: str) -> str:
    return GENERATION_TEMPLATE.format(phrase=phrase, phrase_type=phrase_type)


def alignment_prompt(caption: str, letters: Sequence[str]) -> str:
    choices = ", ".join([*letters, "target", "none"])
    return ALIGNMENT_TEMPLATE.format(
        count=len(letters),
        letters=", ".join(letters) or "none",
        caption=caption,
        choices=choices,
    )


def crop_verify_prompt(query: str) -> str:
    return CROP_VERIFY_TEMPLATE.format(query=query)


def coordinate_prompt(query: str, boxes: Sequence[Sequence[float]]) -> str:
    listing = "\n".join(f"{i}: {json.dumps([round(c, 1) for c in box])}" for i, box in enumerate(boxes, start=1))
    return COORDINATE_TEMPLATE.format(boxes=listing, query=query)
