"""Convert Flickr30k Entities annotations into the pipeline's JSONL input."""

from __future__ import annotations

import logging
import re
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Iterator

from ..errors import FormatError
from .schema import ImageAnnotations, RegionInput

logger = logging.getLogger(__name__)

# [/EN#18/people A man]
_ENTITY_RE = re.compile(r"\[/EN#(\d+)/(\S+)\s+([^\]]+)\]")
SKIPPED_TYPES = {"notvisual", "scene"}


def parse_sentences(text: str) -> dict[str, tuple[str, str]]:
    """Entity id -> (phrase, phrase type), first mention wins."""
    entities: dict[str, tuple[str, str]] = {}
    for line in text.splitlines():
        for entity_id, types, phrase in _ENTITY_RE.findall(line):
            phrase_type = types.split("/")[0]
            if phrase_type in SKIPPED_TYPES:
                continue
            entities.setdefault(entity_id, (phrase.strip(), phrase_type))
    return entities


def parse_annotation_xml(text: str) -> tuple[int, int, list[tuple[str, list[float]]]]:
    """Image size plus (entity id, box) for every object with a bounding box."""
    try:
        root = ET.fromstring(text)
        width = int(root.findtext("size/width"))
        height = int(root.findtext("size/height"))
    except (ET.ParseError, TypeError, ValueError) as e:
        raise FormatError(f"bad Flickr30k Entities XML: {e}") from e
    boxes = []
    for obj in root.iter("object"):
        bndbox = obj.find("bndbox")
        if bndbox is None:
            continue
        try:
            coords = [float(bndbox.findtext(tag)) for tag in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError) as e:
            raise FormatError(f"bad bndbox in Flickr30k Entities XML: {e}") from e
        x1, y1 = max(coords[0], 0.0), max(coords[1], 0.0)
        x2, y2 = min(coords[2], float(width)), min(coords[3], float(height))
        if x1 >= x2 or y1 >= y2:
            continue
        for name in obj.iter("name"):
            entity_id = (name.text or "").strip()
            if not entity_id:
                raise FormatError("object with an empty <name> in Flickr30k Entities XML")
            boxes.append((entity_id, [x1, y1, x2, y2]))
    return width, height, boxes


def convert_image(image_id: str, xml_text: str, sentences_text: str) -> ImageAnnotations:
    width, height, boxes = parse_annotation_xml(xml_text)
    entities = parse_sentences(sentences_text)
    regions = [
        RegionInput(box=box, phrase=entities[entity_id][0], phrase_type=entities[entity_id][1])
        for entity_id, box in boxes
        if entity_id in entities
    ]
    return ImageAnnotations(image_id=image_id, width=width, height=height, regions=regions)


def convert_dir(annotations_dir: str | Path, sentences_dir: str | Path) -> Iterator[ImageAnnotations]:
    """Walk ``Annotations/<id>.xml`` with the matching ``Sentences/<id>.txt``."""
    annotations_dir, sentences_dir = Path(annotations_dir), Path(sentences_dir)
    for xml_path in sorted(annotations_dir.glob("*.xml")):
        sentences_path = sentences_dir / f"{xml_path.stem}.txt"
        if not sentences_path.is_file():
            logger.warning("no sentences for %s, skipped", xml_path.stem)
            continue
        image = convert_image(
            xml_path.stem,
            xml_path.read_text(encoding="utf-8"),
            sentences_path.read_text(encoding="utf-8"),
        )
        if image.regions:
            yield image
