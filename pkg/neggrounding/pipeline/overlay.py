"""Visual prompt geometry and its Pillow rasterization.

The geometry (``render_overlay``) never touches pixels; ``PillowRenderer``
draws a spec onto an image when one is available.
"""

from __future__ import annotations

import base64
import io
import logging
import string
from pathlib import Path
from typing import Sequence

from PIL import Image, ImageDraw, ImageFont

from ..errors import BoxOutOfBounds, TooManyInstances
from .schema import OverlayLabel, OverlaySpec

logger = logging.getLogger(__name__)

LABEL_WIDTH = 14
LABEL_HEIGHT = 16
LINE_WIDTH = 3
RED = (255, 0, 0)
WHITE = (255, 255, 255)
MAX_SIDE = 1024


def _check_bounds(box: Sequence[float], width: int, height: int) -> list[float]:
    x1, y1, x2, y2 = (float(c) for c in box)
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise BoxOutOfBounds(f"box {list(box)} is not inside the {width}x{height} image")
    return [x1, y1, x2, y2]


def label_anchor(box: Sequence[float], width: int, height: int) -> tuple[tuple[float, float], bool]:
    """Top-left corner of the letter tag: just outside the box, or inside when that leaves the image."""
    x1, y1 = box[0], box[1]
    if y1 - LABEL_HEIGHT >= 0 and x1 + LABEL_WIDTH <= width:
        return (x1, y1 - LABEL_HEIGHT), False
    return (x1, y1), True


def render_overlay(size: tuple[int, int], target_box: Sequence[float], sibling_boxes: Sequence[Sequence[float]],
                   line_width: int = LINE_WIDTH) -> OverlaySpec:
    width, height = size
    target = _check_bounds(target_box, width, height)
    boxes = [_check_bounds(b, width, height) for b in sibling_boxes]
    if len(boxes) > len(string.ascii_uppercase):
        raise TooManyInstances(f"{len(boxes)} sibling boxes but only 26 letters")

    # reading order: top to bottom, then left to right
    boxes.sort(key=lambda b: (b[1], b[0]))
    labels = []
    for letter, box in zip(string.ascii_uppercase, boxes):
        anchor, inside = label_anchor(box, width, height)
        labels.append(OverlayLabel(letter=letter, box=box, anchor=anchor, inside=inside))
    return OverlaySpec(width=width, height=height, target_box=target, labels=labels, line_width=line_width)


def overlay_ref(image_id: str, spec: OverlaySpec) -> str:
    """Stable textual reference to an overlay that was not rasterized."""
    target = ",".join(f"{c:g}" for c in spec.target_box)
    letters = "".join(spec.letters)
    return f"overlay:{image_id}:{target}:{letters or '-'}"


class PillowRenderer:
    """Draws the red target box and lettered sibling boxes."""

    def __init__(self, font: ImageFont.ImageFont | None = None):
        self.font = font or ImageFont.load_default()

    def draw(self, spec: OverlaySpec, image: Image.Image | None = None) -> Image.Image:
        if image is None:
            canvas = Image.new("RGB", (spec.width, spec.height), (128, 128, 128))
        else:
            canvas = image.convert("RGB") if image.mode != "RGB" else image.copy()
            if canvas.size != (spec.width, spec.height):
                logger.warning("image size %s differs from annotation %sx%s", canvas.size, spec.width, spec.height)
        pen = ImageDraw.Draw(canvas)
        pen.rectangle(spec.target_box, outline=RED, width=spec.line_width)
        for label in spec.labels:
            pen.rectangle(label.box, outline=RED, width=spec.line_width)
            x, y = label.anchor
            pen.rectangle([x, y, x + LABEL_WIDTH, y + LABEL_HEIGHT], fill=RED)
            pen.text((x + 3, y + 2), label.letter, fill=WHITE, font=self.font)
        return canvas

    def save(self, spec: OverlaySpec, path: str | Path, image: Image.Image | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.draw(spec, image).save(path, format="PNG")
        return path


def crop(image: Image.Image, box: Sequence[float]) -> Image.Image:
    x1, y1, x2, y2 = box
    return image.crop((int(x1), int(y1), int(round(x2)), int(round(y2))))


def image_to_bytes(image: Image.Image, max_side: int = MAX_SIDE) -> bytes:
    """JPEG bytes, downscaled so the longer side is at most ``max_side``."""
    if image.mode != "RGB":
        image = image.convert("RGB")
    if max(image.size) > max_side:
        image = image.copy()
        image.thumbnail((max_side, max_side), Image.Resampling.LANCZOS)
    buffer = io.BytesIO()
    image.save(buffer, format="JPEG", quality=85)
    return buffer.getvalue()


def image_to_data_uri(image: Image.Image, max_side: int = MAX_SIDE) -> str:
    encoded = base64.b64encode(image_to_bytes(image, max_side)).decode("utf-8")
    return f"data:image/jpeg;base64,{encoded}"


def load_image_ref(ref: str) -> Image.Image | None:
    """Open ``ref`` when it names an image file; textual overlay refs give None."""
    path = Path(ref)
    if ref.startswith("overlay:") or not path.is_file():
        return None
    with Image.open(path) as img:
        img.load()
        return img
