"""Two-stage filters that ask a VQA model to prune detector output.

Both work per image on the top-k boxes by score. Crop & verify asks one
yes/no question per box, costing min(k, boxes) calls per image; coordinate
prompting sends all of an image's top-k boxes in a single call.
"""

from __future__ import annotations

import logging
import string
from collections import defaultdict
from typing import Callable, Sequence

from PIL import Image

from ..errors import SchemaError, UnparsableAnswer
from ..metrics import Detection, id_key
from . import prompts
from .clients import ClientRequest, ModelClient, parse_json_reply
from .overlay import crop, image_to_data_uri

logger = logging.getLogger(__name__)

CROP_VERIFY = "crop-verify"
COORDINATE = "coordinate"

ImageLoader = Callable[[str], Image.Image | None]


def top_k(dets: Sequence[Detection], k: int) -> list[Detection]:
    if k < 1:
        raise ValueError("k must be at least 1")
    return sorted(dets, key=lambda d: -d.score)[:k]


def _by_image(dets: Sequence[Detection]) -> list[list[Detection]]:
    groups: dict[str, list[Detection]] = defaultdict(list)
    for d in dets:
        groups[d.image_id].append(d)
    return [groups[key] for key in sorted(groups, key=id_key)]


def _box_ref(det: Detection, loader: ImageLoader | None) -> str:
    image = loader(det.image_id) if loader else None
    if image is not None:
        return image_to_data_uri(crop(image, det.box.as_list()))
    coords = ",".join(f"{c:g}" for c in det.box.as_list())
    return f"crop:{det.image_id}:{coords}"


def parse_yes_no(text: str) -> bool:
    token = text.strip().strip(string.punctuation + " ").lower()
    if token in ("yes", "no"):
        return token == "yes"
    raise UnparsableAnswer(f"expected yes or no, got {text!r}")


def crop_verify(dets: Sequence[Detection], query: str, client: ModelClient, k: int,
                loader: ImageLoader | None = None, model: str = "") -> list[Detection]:
    """Keep the top-k boxes per image that the model confirms on their crop.

    Makes one model call per verified box, so sum(min(k, boxes on the image))
    calls over all images.
    """
    kept = []
    for group in _by_image(dets):
        for det in top_k(group, k):
            request = ClientRequest(kind=CROP_VERIFY, prompt=prompts.crop_verify_prompt(query),
                                    images=(_box_ref(det, loader),), model=model)
            if parse_yes_no(client.complete(request)):
                kept.append(det)
    logger.info("crop & verify kept %d of %d detections", len(kept), len(dets))
    return kept


def coordinate_prompt(dets: Sequence[Detection], query: str, client: ModelClient, k: int | None = None,
                      image_refs: Callable[[str], str] | None = None, model: str = "") -> list[Detection]:
    """One call per image listing every top-k box; drop the boxes the model flags.

    Makes exactly one model call per image that has detections. Boxes are
    numbered from 1 in the prompt and in the expected reply.
    """
    kept = []
    for group in _by_image(dets):
        candidates = top_k(group, k or len(group))
        image_id = candidates[0].image_id
        request = ClientRequest(
            kind=COORDINATE,
            prompt=prompts.coordinate_prompt(query, [d.box.as_list() for d in candidates]),
            images=(image_refs(image_id) if image_refs else image_id,),
            model=model,
        )
        flagged = _parse_flags(client.complete(request), len(candidates))
        kept.extend(d for i, d in enumerate(candidates, start=1) if i not in flagged)
    logger.info("coordinate prompting kept %d of %d detections", len(kept), len(dets))
    return kept


def _parse_flags(text: str, count: int) -> set[int]:
    try:
        payload = parse_json_reply(text)
    except SchemaError as e:
        raise UnparsableAnswer(str(e)) from e
    flags = payload.get("inconsistent")
    if not isinstance(flags, list) or not all(isinstance(f, int) and not isinstance(f, bool) for f in flags):
        raise UnparsableAnswer(f"'inconsistent' must be a list of box numbers, got {flags!r}")
    unknown = [f for f in flags if not 1 <= f <= count]
    if unknown:
        raise UnparsableAnswer(f"flags {unknown} name no box (valid: 1..{count})")
    return set(flags)
