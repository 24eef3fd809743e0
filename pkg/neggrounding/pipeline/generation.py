"""Caption-pair generation, local verification and VQA alignment."""

from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass
from typing import NamedTuple, Sequence

from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from ..errors import EmptyCaption, RetryExhausted, SchemaError, UnparsableAnswer, VerificationFailed
from ..textparse import Lexicon, default_lexicon, detect_cues, tokenize
from . import prompts
from .clients import ClientRequest, ModelClient, parse_json_reply
from .schema import AlignmentVerdict, AttributeExtraction, CaptionPair, CaptionReply, parse_reply

logger = logging.getLogger(__name__)

DEFAULT_RETRY_LIMIT = 3
GENERATE = "generate"
ALIGN = "align"

_WORD_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_BREAK = re.compile(r"[.!?]+\s+\S")


def normalize_words(text: str) -> list[str]:
    """Lowercase words with a trailing plural ``s`` removed."""
    words = _WORD_RE.findall(text.lower().replace("n't", " not"))
    return [w[:-1] if len(w) > 3 and w.endswith("s") and not w.endswith("ss") else w for w in words]


def mentions(caption: str, attribute: str) -> bool:
    """True when the attribute's words appear contiguously in the caption."""
    needle = normalize_words(attribute)
    hay = normalize_words(caption)
    if not needle:
        return False
    k = len(needle)
    return any(hay[i:i + k] == needle for i in range(len(hay) - k + 1))


def caption_cues(caption: str, lexicon: Lexicon | None = None) -> list[str]:
    lexicon = lexicon or default_lexicon()
    try:
        tokens = tokenize(caption, lexicon)
    except EmptyCaption:
        return []
    return [cue.surface for cue in detect_cues(tokens, lexicon)]


@dataclass(frozen=True)
class Verification:
    passed: bool
    reasons: tuple[str, ...] = ()

    @property
    def codes(self) -> set[str]:
        return {r.split(":", 1)[1] for r in self.reasons}

    def __bool__(self) -> bool:
        return self.passed


def _check_caption(side: str, caption: str, declared: str, own: Sequence[str], other: Sequence[str],
                   lexicon: Lexicon) -> list[str]:
    reasons = []
    if _SENTENCE_BREAK.search(caption.strip()):
        reasons.append(f"{side}:multi-sentence")
    if not caption_cues(caption, lexicon):
        reasons.append(f"{side}:missing-cue")
    if not any(mentions(caption, a) for a in own):
        code = "wrong-attribute" if any(mentions(caption, a) for a in other) else "unknown-attribute"
        reasons.append(f"{side}:{code}")
    if not any(normalize_words(declared) == normalize_words(a) for a in own):
        reasons.append(f"{side}:undeclared-attribute")
    return reasons


def verify_pair(pair: CaptionPair, attrs: AttributeExtraction, lexicon: Lexicon | None = None) -> Verification:
    """Local step-3 checks.

    C_neg must carry a cue and reference a present attribute; C_pos a cue and
    an absent attribute. Each failure is reported as ``side:code``.
    """
    lexicon = lexicon or default_lexicon()
    reasons = _check_caption("negative", pair.c_neg, pair.neg_attribute, attrs.present, attrs.absent, lexicon)
    reasons += _check_caption("positive", pair.c_pos, pair.pos_attribute, attrs.absent, attrs.present, lexicon)
    return Verification(passed=not reasons, reasons=tuple(reasons))


class Generation(NamedTuple):
    attributes: AttributeExtraction
    pair: CaptionPair
    retries: int
    rationale: dict[str, str]


def _attempt_once(client: ModelClient, request: ClientRequest, lexicon: Lexicon) -> Generation:
    reply = parse_reply(parse_json_reply(client.complete(request)), CaptionReply)
    if not reply.attributes.is_complete():
        raise SchemaError(
            f"need at least 3 present and 3 absent attributes, got "
            f"{len(reply.attributes.present)}/{len(reply.attributes.absent)}"
        )
    cues = caption_cues(reply.captions.negative, lexicon) + caption_cues(reply.captions.positive, lexicon)
    pair = reply.pair(cues)
    verdict = verify_pair(pair, reply.attributes, lexicon)
    if not verdict:
        raise VerificationFailed(f"caption pair rejected: {', '.join(verdict.reasons)}", verdict.reasons)
    rationale = reply.verification.model_dump()
    return Generation(reply.attributes, pair, request.attempt, rationale)


def generate_pair(client: ModelClient, image_ref: str, phrase: str, phrase_type: str,
                  retry_limit: int = DEFAULT_RETRY_LIMIT, model: str = "",
                  lexicon: Lexicon | None = None) -> Generation:
    """Ask the generator for attributes and a caption pair, retrying bad replies.

    Issues at most ``1 + retry_limit`` calls. Transport errors are not retried.
    """
    lexicon = lexicon or default_lexicon()
    prompt = prompts.generation_prompt(phrase, phrase_type)
    attempt = 0

    def attempt_once() -> Generation:
        nonlocal attempt
        request = ClientRequest(kind=GENERATE, prompt=prompt, images=(image_ref,), model=model, attempt=attempt)
        attempt += 1
        return _attempt_once(client, request, lexicon)

    def log_failure(state) -> None:
        logger.warning("generation for %r failed (attempt %d): %s", phrase, state.attempt_number,
                       state.outcome.exception())

    retrying = Retrying(
        stop=stop_after_attempt(retry_limit + 1),
        retry=retry_if_exception_type((SchemaError, VerificationFailed)),
        after=log_failure,
    )
    try:
        return retrying(attempt_once)
    except RetryError as e:
        last = e.last_attempt.exception()
        raise RetryExhausted(f"no valid caption pair for {phrase!r} after {attempt} attempts: {last}") from last


def parse_answer(text: str, letters: Sequence[str]) -> str:
    """Map a VQA reply onto {letters, "target", "none"}; anything else is rejected."""
    body = text.strip()
    if body.startswith("{"):
        payload = parse_json_reply(body)
        body = str(payload.get("answer", ""))
    token = body.strip().strip(string.punctuation + " ").strip()
    lowered = token.lower()
    if lowered in ("target", "none"):
        return lowered
    if token.upper() in letters and len(token) == 1:
        return token.upper()
    raise UnparsableAnswer(f"answer {text!r} is not one of {', '.join([*letters, 'target', 'none'])}")


def align(client: ModelClient, image_ref: str, pair: CaptionPair, letters: Sequence[str],
          model: str = "") -> AlignmentVerdict:
    """Two VQA questions, one per caption."""
    answers = []
    for caption in (pair.c_pos, pair.c_neg):
        request = ClientRequest(kind=ALIGN, prompt=prompts.alignment_prompt(caption, letters),
                                images=(image_ref,), model=model)
        try:
            answers.append(parse_answer(client.complete(request), letters))
        except SchemaError as e:
            raise UnparsableAnswer(str(e)) from e
    verdict = AlignmentVerdict.decide(*answers)
    logger.debug("alignment pos=%s neg=%s accepted=%s", verdict.pos_match, verdict.neg_match, verdict.accepted)
    return verdict
