"""Region sampling for caption generation."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter

import numpy as np

from ..errors import NoEligibleRegions
from .schema import ImageAnnotations, RegionAnnotation

logger = logging.getLogger(__name__)

DEFAULT_MAX_AREA_RATIO = 0.85
DEFAULT_MAX_INSTANCES = 5
REGIONS_PER_IMAGE = 2


def stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    """Per-image generator, so results do not depend on processing order."""
    return np.random.default_rng([seed, stable_hash(image_id)])


def crowded_types(image: ImageAnnotations, max_instances: int = DEFAULT_MAX_INSTANCES) -> list[str]:
    counts = Counter(r.phrase_type for r in image.regions)
    return sorted(t for t, c in counts.items() if c > max_instances)


def eligible_regions(image: ImageAnnotations, max_area_ratio: float = DEFAULT_MAX_AREA_RATIO) -> list[RegionAnnotation]:
    limit = max_area_ratio * image.width * image.height
    regions = [image.region(i) for i in range(len(image.regions))]
    return [r for r in regions if r.area <= limit]


def select_regions(image: ImageAnnotations, seed: int, max_area_ratio: float = DEFAULT_MAX_AREA_RATIO,
                   max_instances: int = DEFAULT_MAX_INSTANCES, count: int = REGIONS_PER_IMAGE) -> list[RegionAnnotation]:
    """Sample up to ``count`` distinct regions uniformly from the eligible ones.

    The whole image is refused when some phrase type has more than
    ``max_instances`` boxes; single boxes covering more than ``max_area_ratio``
    of the image are skipped.
    """
    crowded = crowded_types(image, max_instances)
    if crowded:
        raise NoEligibleRegions(
            f"image {image.image_id}: more than {max_instances} instances of {', '.join(crowded)}"
        )
    candidates = eligible_regions(image, max_area_ratio)
    if not candidates:
        raise NoEligibleRegions(f"image {image.image_id}: no region under the area limit")

    rng = image_rng(seed, image.image_id)
    picked = rng.choice(len(candidates), size=min(count, len(candidates)), replace=False)
    chosen = [candidates[i] for i in sorted(picked.tolist())]
    logger.debug("image %s: picked regions %s", image.image_id, [r.index for r in chosen])
    return chosen


def siblings(image: ImageAnnotations, target: RegionAnnotation) -> list[RegionAnnotation]:
    """Other boxes of the target's phrase type, duplicates of the target box excluded."""
    return [
        image.region(i)
        for i, r in enumerate(image.regions)
        if i != target.index and r.phrase_type == target.phrase_type and r.box != target.box
    ]
