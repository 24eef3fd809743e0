"""End-to-end dataset construction over an annotations file."""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

from PIL import Image
from tqdm import tqdm

from ..errors import MalformedConfig, NoEligibleRegions, RetryExhausted, UnparsableAnswer
from ..textparse import Lexicon, default_lexicon
from .clients import BoundedClient, MockClient, ModelClient
from .generation import ALIGN, DEFAULT_RETRY_LIMIT, GENERATE, align, generate_pair
from .overlay import PillowRenderer, overlay_ref, render_overlay
from .regions import DEFAULT_MAX_AREA_RATIO, DEFAULT_MAX_INSTANCES, select_regions, siblings
from .schema import AlignmentVerdict, DatasetRecord, ImageAnnotations, RegionAnnotation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitTarget:
    images: int
    captions: int


SPLITS = {
    "S": SplitTarget(images=8_000, captions=30_600),
    "M": SplitTarget(images=16_000, captions=60_400),
    "L": SplitTarget(images=24_000, captions=91_100),
}


@dataclass(frozen=True)
class BuildConfig:
    split: str = "S"
    seed: int = 0
    retry_limit: int = DEFAULT_RETRY_LIMIT
    max_area_ratio: float = DEFAULT_MAX_AREA_RATIO
    max_instances: int = DEFAULT_MAX_INSTANCES
    parallelism: int = 8
    generator_model: str = ""
    vqa_model: str = ""
    # only ask the VQA model when the target has same-type siblings
    skip_align_without_siblings: bool = False
    image_dir: Path | None = None
    render_dir: Path | None = None
    progress: bool = True


@dataclass
class ImageOutcome:
    image_id: str
    records: list[DatasetRecord] = field(default_factory=list)
    rejections: Counter = field(default_factory=Counter)
    regions: int = 0


@dataclass
class BuildResult:
    records: list[DatasetRecord]
    summary: dict


class DatasetBuilder:
    def __init__(self, generator: ModelClient, vqa: ModelClient, cfg: BuildConfig | None = None,
                 lexicon: Lexicon | None = None):
        self.cfg = cfg or BuildConfig()
        if self.cfg.split not in SPLITS:
            raise MalformedConfig(f"unknown split {self.cfg.split!r}; expected S, M or L")
        self.raw_generator, self.raw_vqa = generator, vqa
        if vqa is generator:
            self.generator = self.vqa = BoundedClient(generator, self.cfg.parallelism)
        else:
            self.generator = BoundedClient(generator, self.cfg.parallelism)
            self.vqa = BoundedClient(vqa, self.cfg.parallelism)
        self.lexicon = lexicon or default_lexicon()
        self.renderer = PillowRenderer() if self.cfg.render_dir is not None else None

    def _source_image(self, image_id: str) -> Image.Image | None:
        if self.cfg.image_dir is None:
            return None
        for suffix in (".jpg", ".jpeg", ".png"):
            path = Path(self.cfg.image_dir) / f"{image_id}{suffix}"
            if path.is_file():
                with Image.open(path) as img:
                    img.load()
                    return img
        logger.warning("no image file for %s under %s", image_id, self.cfg.image_dir)
        return None

    def _image_ref(self, image: ImageAnnotations, region: RegionAnnotation, spec, tag: str,
                   source: Image.Image | None) -> str:
        if self.renderer is None:
            return overlay_ref(image.image_id, spec)
        path = Path(self.cfg.render_dir) / f"{image.image_id}_{region.index}_{tag}.png"
        return str(self.renderer.save(spec, path, source))

    def process_image(self, image: ImageAnnotations) -> ImageOutcome:
        outcome = ImageOutcome(image.image_id)
        try:
            regions = select_regions(image, self.cfg.seed, self.cfg.max_area_ratio, self.cfg.max_instances)
        except NoEligibleRegions as e:
            logger.warning("%s", e)
            outcome.rejections["no-eligible-regions"] += 1
            return outcome

        source = self._source_image(image.image_id)
        for region in regions:
            outcome.regions += 1
            size = (image.width, image.height)
            prompt_spec = render_overlay(size, region.box, [])
            others = siblings(image, region)
            label_spec = render_overlay(size, region.box, [s.box for s in others])

            try:
                gen = generate_pair(self.generator, self._image_ref(image, region, prompt_spec, "target", source),
                                    region.phrase, region.phrase_type, self.cfg.retry_limit,
                                    self.cfg.generator_model, self.lexicon)
            except RetryExhausted as e:
                logger.warning("image %s region %d: %s", image.image_id, region.index, e)
                outcome.rejections["retry-exhausted"] += 1
                continue

            if not others and self.cfg.skip_align_without_siblings:
                verdict = AlignmentVerdict.decide("target", "none")
            else:
                try:
                    verdict = align(self.vqa, self._image_ref(image, region, label_spec, "labels", source),
                                    gen.pair, label_spec.letters, self.cfg.vqa_model)
                except UnparsableAnswer as e:
                    logger.warning("image %s region %d: %s", image.image_id, region.index, e)
                    outcome.rejections["unparsable-answer"] += 1
                    continue
            if not verdict.accepted:
                outcome.rejections["misaligned"] += 1
                continue

            outcome.records.append(DatasetRecord(
                region=region,
                attributes=gen.attributes,
                captions=gen.pair,
                verdict=verdict,
                retry_count=gen.retries,
                split=self.cfg.split,
                rationale=gen.rationale,
            ))
        return outcome

    def build(self, images: Sequence[ImageAnnotations]) -> BuildResult:
        target = SPLITS[self.cfg.split]
        if len(images) > target.images:
            logger.info("split %s caps the run at %d of %d images", self.cfg.split, target.images, len(images))
            images = images[:target.images]

        with ThreadPoolExecutor(max_workers=self.cfg.parallelism) as pool:
            # map() yields in submission order, so output follows the input file
            outcomes = list(tqdm(pool.map(self.process_image, images), total=len(images),
                                 desc="build-dataset", unit="img", disable=None if self.cfg.progress else True))

        records = [r for o in outcomes for r in o.records]
        rejections = Counter()
        for o in outcomes:
            rejections.update(o.rejections)
        summary = {
            "split": self.cfg.split,
            "seed": self.cfg.seed,
            "target": {"images": target.images, "captions": target.captions},
            "images": len(images),
            "images_with_records": sum(1 for o in outcomes if o.records),
            "regions": sum(o.regions for o in outcomes),
            "records": len(records),
            "captions": 2 * len(records),
            "rejections": dict(sorted(rejections.items())),
        }
        summary.update(self._call_counts())
        logger.info("built %d records from %d images", len(records), len(images))
        return BuildResult(records=records, summary=summary)

    def _call_counts(self) -> dict:
        counts = {}
        for name, client, kind in (("generator_calls", self.raw_generator, GENERATE),
                                   ("vqa_calls", self.raw_vqa, ALIGN)):
            if isinstance(client, MockClient):
                counts[name] = client.count(kind)
        return counts


def build_dataset(images: Iterable[ImageAnnotations], generator: ModelClient, vqa: ModelClient | None = None,
                  cfg: BuildConfig | None = None) -> BuildResult:
    return DatasetBuilder(generator, vqa or generator, cfg).build(list(images))


def write_records(records: Iterable[DatasetRecord], stream: TextIO) -> int:
    n = 0
    for record in records:
        stream.write(record.model_dump_json() + "\n")
        n += 1
    return n
