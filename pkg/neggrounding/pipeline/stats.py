"""Negation statistics over a caption corpus."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from ..errors import EmptyCaption, EmptyCorpus
from ..textparse import Lexicon, default_lexicon, tag, tokenize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorpusStats:
    captions: int
    tokens: int
    cue_tokens: int
    cue_histogram: dict[str, int]
    cue_kinds: dict[str, int]
    word_classes: dict[str, int]

    @property
    def negation_frequency(self) -> float:
        """Cue tokens as a percentage of word tokens."""
        return 100.0 * self.cue_tokens / self.tokens

    def to_dict(self) -> dict:
        return {
            "captions": self.captions,
            "tokens": self.tokens,
            "cue_tokens": self.cue_tokens,
            "negation_frequency": round(self.negation_frequency, 4),
            "cue_histogram": self.cue_histogram,
            "cue_kinds": self.cue_kinds,
            "word_classes": self.word_classes,
        }


def is_word(surface: str) -> bool:
    return any(ch.isalnum() for ch in surface)


def corpus_stats(captions: Iterable[str], lexicon: Lexicon | None = None) -> CorpusStats:
    """Count cue tokens (word cues, ``n't`` and un- words) over word tokens.

    Punctuation tokens are not counted. Blank captions are skipped.
    """
    lexicon = lexicon or default_lexicon()
    n_captions = 0
    tokens = cues = 0
    histogram: Counter = Counter()
    kinds: Counter = Counter()
    classes: Counter = Counter()
    for caption in captions:
        try:
            tagged = tag(tokenize(caption, lexicon), lexicon)
        except EmptyCaption:
            continue
        n_captions += 1
        for token in tagged:
            if not is_word(token.surface):
                continue
            tokens += 1
            classes[token.tag.value] += 1
            if token.cue_kind is not None:
                cues += 1
                kinds[token.cue_kind.value] += 1
                key = "un-" if token.cue_kind.value == "un-prefix" else token.surface
                histogram[key] += 1
    if tokens == 0:
        raise EmptyCorpus("corpus has no word tokens")
    logger.info("%d captions, %d tokens, %d cues", n_captions, tokens, cues)
    return CorpusStats(
        captions=n_captions,
        tokens=tokens,
        cue_tokens=cues,
        cue_histogram=dict(sorted(histogram.items())),
        cue_kinds=dict(sorted(kinds.items())),
        word_classes=dict(sorted(classes.items())),
    )


def iter_corpus(path: str | Path) -> Iterator[str]:
    """Captions from a dataset JSONL, a ``{"caption": ...}`` JSONL or plain text lines."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            text = line.strip()
            if not text:
                continue
            if text.startswith("{"):
                try:
                    record = json.loads(text)
                except json.JSONDecodeError:
                    yield text
                    continue
                if "captions" in record:
                    yield record["captions"]["c_pos"]
                    yield record["captions"]["c_neg"]
                elif "caption" in record:
                    yield record["caption"]
                continue
            yield text
