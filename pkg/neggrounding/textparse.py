"""Caption tokenization, word-class tagging, negation cues and phrase chunking.

The pipeline is ``tokenize -> tag -> chunk`` (``parse`` composes the three).
Everything here is a pure function of the caption and the lexicon, so two
calls on the same input give identical results.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from nltk.chunk import RegexpParser
from nltk.tag import DefaultTagger, RegexpTagger, SequentialBackoffTagger, UnigramTagger
from nltk.tree import Tree

from .errors import EmptyCaption

logger = logging.getLogger(__name__)


class WordClass(str, Enum):
    NOUN = "NOUN"
    VERB = "VERB"
    ADJ = "ADJ"
    DET = "DET"
    ADP = "ADP"
    NEG = "NEG"
    OTHER = "OTHER"


class CueKind(str, Enum):
    WORD = "word-cue"
    CONTRACTION = "contraction"
    UN_PREFIX = "un-prefix"


CONTENT_CLASSES = frozenset({WordClass.NOUN, WordClass.VERB, WordClass.ADJ})

_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*|\S")
_UN_STEM_SUFFIXES = ("ed", "ing", "able")

_PUNCTUATION_RULES = [(r"^[\W_]+$", WordClass.OTHER.value)]
_NUMBER_RULES = [(r"^(?:\d+(?:\.\d*)?|\.\d+)$", WordClass.ADJ.value)]
_SUFFIX_RULES = [
    (r"^(?=.{5,}$).*(?:ing|ed)$", WordClass.VERB.value),
    (r"^(?=.{6,}$).*(?:ful|ous|ive|less|able|ible|ish)$", WordClass.ADJ.value),
    (r"^(?=.{5,}$).*ly$", WordClass.OTHER.value),
]

# Stages run in order; a chunk from an earlier stage is opaque to later ones.
CHUNK_GRAMMAR = r"""
NEGP: {<NEG><DET|ADP|ADJ>*(<NOUN>+|<VERB>|<ADJ>)}
NP: {<DET>?<ADJ>*<NOUN>+}
VP: {<VERB>+}
"""
_CHUNKER = RegexpParser(CHUNK_GRAMMAR)

_LEXICON_FILES = {
    "cues": "cues.txt",
    "un_exclusions": "un_exclusions.txt",
    "un_stems": "un_stems.txt",
    "det": "det.txt",
    "adp": "adp.txt",
    "verb": "verb.txt",
    "adj": "adj.txt",
    "noun": "noun.txt",
    "other": "other.txt",
}


def read_terms(text: str) -> list[str]:
    """Parse a lexicon file body: one term per line, ``#`` starts a comment."""
    terms = []
    for line in text.splitlines():
        term = line.split("#", 1)[0].strip().lower()
        if term:
            terms.append(term)
    return terms


@dataclass(frozen=True)
class Lexicon:
    cues: frozenset[str]
    un_excluded: frozenset[str]
    un_excluded_prefixes: tuple[str, ...]
    un_stems: frozenset[str]
    det: frozenset[str]
    adp: frozenset[str]
    verb: frozenset[str]
    adj: frozenset[str]
    noun: frozenset[str]
    other: frozenset[str]

    @classmethod
    def load(cls, directory: str | Path | None = None, cue_file: str | Path | None = None) -> "Lexicon":
        """Load the shipped lexicons, letting files in ``directory`` replace them by name."""
        packaged = resources.files("neggrounding") / "lexicons"
        tables: dict[str, list[str]] = {}
        for key, name in _LEXICON_FILES.items():
            override = Path(directory) / name if directory else None
            if key == "cues" and cue_file:
                override = Path(cue_file)
            if override is not None and override.is_file():
                logger.debug("lexicon %s overridden by %s", key, override)
                tables[key] = read_terms(override.read_text(encoding="utf-8"))
            else:
                tables[key] = read_terms((packaged / name).read_text(encoding="utf-8"))

        exclusions = tables.pop("un_exclusions")
        return cls(
            un_excluded=frozenset(t for t in exclusions if not t.endswith("*")),
            un_excluded_prefixes=tuple(t[:-1] for t in exclusions if t.endswith("*")),
            **{key: frozenset(terms) for key, terms in tables.items()},
        )

    def is_un_negation(self, surface: str) -> bool:
        if not surface.startswith("un") or not surface.isalpha():
            return False
        if surface in self.un_excluded or surface.startswith(self.un_excluded_prefixes):
            return False
        stem = surface[2:]
        if len(stem) < 3:
            return False
        return (
            stem in self.un_stems
            or stem in self.adj
            or stem in self.verb
            or stem.endswith(_UN_STEM_SUFFIXES)
        )

    def cue_kind(self, surface: str) -> CueKind | None:
        if surface == "n't":
            return CueKind.CONTRACTION
        if surface in self.cues:
            return CueKind.WORD
        if self.is_un_negation(surface):
            return CueKind.UN_PREFIX
        return None


@lru_cache(maxsize=None)
def default_lexicon() -> Lexicon:
    return Lexicon.load()


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    tag: WordClass | None = None
    cue_kind: CueKind | None = None

    @property
    def is_cue(self) -> bool:
        return self.cue_kind is not None

    @property
    def is_content(self) -> bool:
        return self.tag in CONTENT_CLASSES


@dataclass(frozen=True)
class Cue:
    index: int
    surface: str
    kind: CueKind


@dataclass(frozen=True)
class Phrase:
    token_indices: tuple[int, ...]
    is_negated: bool
    head_index: int

    def __len__(self) -> int:
        return len(self.token_indices)


@dataclass(frozen=True)
class ParsedCaption:
    raw: str
    tokens: tuple[Token, ...]
    phrases: tuple[Phrase, ...]
    cue_count: int = field(default=0)

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def m(self) -> int:
        return len(self.phrases)

    @property
    def negated_phrases(self) -> list[Phrase]:
        return [p for p in self.phrases if p.is_negated]

    def to_dict(self) -> dict:
        return {
            "raw": self.raw,
            "tokens": [
                {
                    "surface": t.surface,
                    "tag": t.tag.value if t.tag else None,
                    "cue_kind": t.cue_kind.value if t.cue_kind else None,
                }
                for t in self.tokens
            ],
            "phrases": [
                {"indices": list(p.token_indices), "is_negated": p.is_negated}
                for p in self.phrases
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParsedCaption":
        tokens = tuple(
            Token(
                surface=t["surface"],
                index=i,
                tag=WordClass(t["tag"]) if t.get("tag") else None,
                cue_kind=CueKind(t["cue_kind"]) if t.get("cue_kind") else None,
            )
            for i, t in enumerate(data["tokens"])
        )
        phrases = tuple(
            _make_phrase(tokens, p["indices"][0], p["indices"][-1] + 1)
            for p in data["phrases"]
        )
        return cls(
            raw=data["raw"],
            tokens=tokens,
            phrases=phrases,
            cue_count=sum(t.is_cue for t in tokens),
        )


def _split_piece(piece: str) -> list[str]:
    if piece.endswith("n't") and len(piece) > 3:
        return [piece[:-3], "n't"]
    if piece == "cannot":
        return ["can", "not"]
    return [piece]


def tokenize(caption: str, lexicon: Lexicon | None = None) -> list[Token]:
    """Split a caption into lowercased tokens with cue annotations.

    Punctuation becomes separate OTHER tokens and ``n't`` contractions are
    split off as their own cue token. Word classes other than NEG/OTHER are
    left for ``tag``.
    """
    lexicon = lexicon or default_lexicon()
    text = caption.strip()
    if not text:
        raise EmptyCaption("caption is empty")
    text = text.replace("’", "'").lower()

    surfaces: list[str] = []
    for match in _TOKEN_RE.finditer(text):
        surfaces.extend(_split_piece(match.group()))

    tokens = []
    for index, surface in enumerate(surfaces):
        kind = lexicon.cue_kind(surface)
        if kind in (CueKind.WORD, CueKind.CONTRACTION):
            tag = WordClass.NEG
        elif not any(ch.isalnum() for ch in surface):
            tag = WordClass.OTHER
        else:
            tag = None
        tokens.append(Token(surface=surface, index=index, tag=tag, cue_kind=kind))
    return tokens


def detect_cues(tokens: Sequence[Token], lexicon: Lexicon | None = None) -> list[Cue]:
    """Report every negation cue, in caption order. Zero cues is a valid answer."""
    lexicon = lexicon or default_lexicon()
    cues = []
    for token in tokens:
        kind = lexicon.cue_kind(token.surface)
        if kind is not None:
            cues.append(Cue(index=token.index, surface=token.surface, kind=kind))
    return cues


class UnPrefixTagger(SequentialBackoffTagger):
    """Tags ``un-`` negations: VERB when the stem tags as a verb, ADJ otherwise."""

    def __init__(self, lexicon: Lexicon, backoff=None):
        super().__init__(backoff)
        self.lexicon = lexicon
        self.stem_tagger: SequentialBackoffTagger | None = None

    def choose_tag(self, tokens, index, history):
        surface = tokens[index]
        if not self.lexicon.is_un_negation(surface):
            return None
        stem_tag = (self.stem_tagger or self).tag([surface[2:]])[0][1]
        return WordClass.VERB.value if stem_tag == WordClass.VERB.value else WordClass.ADJ.value


def _lexicon_model(lexicon: Lexicon) -> dict[str, str]:
    model: dict[str, str] = {}
    # later tables win
    for table, cls in (
        (lexicon.noun, WordClass.NOUN),
        (lexicon.adj, WordClass.ADJ),
        (lexicon.verb, WordClass.VERB),
        (lexicon.other, WordClass.OTHER),
        (lexicon.adp, WordClass.ADP),
        (lexicon.det, WordClass.DET),
        (lexicon.cues | {"n't"}, WordClass.NEG),
    ):
        model.update(dict.fromkeys(table, cls.value))
    return model


@lru_cache(maxsize=8)
def word_class_tagger(lexicon: Lexicon) -> SequentialBackoffTagger:
    """Backoff chain: punctuation, lexicon lookup, numbers, ``un-`` words, suffixes, NOUN."""
    un_prefix = UnPrefixTagger(lexicon, backoff=RegexpTagger(_SUFFIX_RULES, backoff=DefaultTagger(WordClass.NOUN.value)))
    tagger = RegexpTagger(
        _PUNCTUATION_RULES,
        backoff=UnigramTagger(model=_lexicon_model(lexicon), backoff=RegexpTagger(_NUMBER_RULES, backoff=un_prefix)),
    )
    un_prefix.stem_tagger = tagger
    return tagger


def word_class(surface: str, lexicon: Lexicon | None = None) -> WordClass:
    lexicon = lexicon or default_lexicon()
    return WordClass(word_class_tagger(lexicon).tag([surface])[0][1])


def tag(tokens: Sequence[Token], lexicon: Lexicon | None = None) -> list[Token]:
    lexicon = lexicon or default_lexicon()
    tagged = word_class_tagger(lexicon).tag([t.surface for t in tokens])
    return [
        replace(token, tag=WordClass(cls), cue_kind=lexicon.cue_kind(token.surface))
        for token, (_, cls) in zip(tokens, tagged)
    ]


def _head(tokens: Sequence[Token], start: int, end: int) -> int:
    span = tokens[start:end]
    for wanted in (WordClass.NOUN, WordClass.VERB, WordClass.ADJ):
        for token in reversed(span):
            if token.tag is wanted:
                return token.index
    for token in reversed(span):
        if not token.is_cue:
            return token.index
    return span[-1].index


def _make_phrase(tokens: Sequence[Token], start: int, end: int) -> Phrase:
    span = tokens[start:end]
    return Phrase(
        token_indices=tuple(t.index for t in span),
        is_negated=any(t.is_cue for t in span),
        head_index=_head(tokens, start, end),
    )


def _is_stranded(tokens: Sequence[Token], start: int, end: int) -> bool:
    span = tokens[start:end]
    if not any(t.is_cue for t in span):
        return False
    return len(span) < 2 or not any(t.is_content for t in span)


def _attach_stranded_cues(spans: list[tuple[int, int]], tokens: Sequence[Token]) -> list[tuple[int, int]]:
    # A cue the grammar left alone joins forward up to the next phrase holding content.
    merged = []
    j = 0
    while j < len(spans):
        start, end = spans[j]
        if _is_stranded(tokens, start, end):
            k = j + 1
            while k < len(spans) and not any(t.is_content for t in tokens[spans[k][0]:spans[k][1]]):
                k += 1
            if k < len(spans):
                end = spans[k][1]
                j = k
        merged.append((start, end))
        j += 1
    return merged


def chunk(tokens: Sequence[Token], lexicon: Lexicon | None = None, raw: str | None = None) -> ParsedCaption:
    """Group tagged tokens into a disjoint, order-preserving phrase partition.

    ``CHUNK_GRAMMAR`` runs as an nltk cascade: negated phrases first, then
    noun and verb groups. Tokens outside every chunk become singleton phrases.
    """
    tokens = list(tokens)
    if any(t.tag is None for t in tokens):
        tokens = tag(tokens, lexicon)

    spans: list[tuple[int, int]] = []
    if tokens:
        tree = _CHUNKER.parse([(t.surface, t.tag.value) for t in tokens])
        start = 0
        for node in tree:
            width = len(node.leaves()) if isinstance(node, Tree) else 1
            spans.append((start, start + width))
            start += width

    spans = _attach_stranded_cues(spans, tokens)
    phrases = tuple(_make_phrase(tokens, start, end) for start, end in spans)
    return ParsedCaption(
        raw=raw if raw is not None else " ".join(t.surface for t in tokens),
        tokens=tuple(tokens),
        phrases=phrases,
        cue_count=sum(t.is_cue for t in tokens),
    )


def parse(caption: str, lexicon: Lexicon | None = None) -> ParsedCaption:
    lexicon = lexicon or default_lexicon()
    return chunk(tag(tokenize(caption, lexicon), lexicon), lexicon, raw=caption)


def parse_many(captions: Iterable[str], lexicon: Lexicon | None = None) -> list[ParsedCaption]:
    lexicon = lexicon or default_lexicon()
    return [parse(caption, lexicon) for caption in captions]
