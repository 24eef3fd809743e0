"""Negation-aware text token merging.

Each phrase of a parsed caption is replaced by one representative vector, a
softmax-weighted average of its token rows. The logits are ``log(gamma)``
with ``gamma = beta`` on cue tokens of a negated phrase and ``1`` elsewhere,
which is the same thing as normalizing the gamma weights directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySequence,
    MalformedConfig,
    MultipleNegatedPhrases,
    NoCue,
    NonFiniteInput,
    ZeroAlignment,
)
from .textparse import Lexicon, ParsedCaption, Phrase, parse

logger = logging.getLogger(__name__)

DEFAULT_BETA = 2.0


@dataclass(frozen=True)
class BoostConfig:
    beta: float = DEFAULT_BETA
    cue_lexicon_override: Path | None = None

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise MalformedConfig(f"beta must be a positive number, got {self.beta}")
        if self.beta <= 1:
            logger.debug("beta=%s gives no strict boost to cue tokens", self.beta)


@dataclass(frozen=True)
class MergedSequence:
    rows: np.ndarray
    spans: tuple[tuple[int, ...], ...]
    weights: tuple[np.ndarray, ...]

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows.tolist(),
            "spans": [list(s) for s in self.spans],
            "weights": [w.tolist() for w in self.weights],
        }


@dataclass(frozen=True)
class AmplificationReport:
    s_single: float
    s_merge: float
    bound_factor: float
    n: int
    m: int
    beta: float
    s_merge_exact: float
    cue_weight: float

    @property
    def ratio(self) -> float:
        return self.s_merge / self.s_single

    def holds(self, tol: float = 1e-9) -> bool:
        return self.ratio >= self.bound_factor - tol

    def to_dict(self) -> dict:
        return {
            "s_single": self.s_single,
            "s_merge": self.s_merge,
            "s_merge_exact": self.s_merge_exact,
            "cue_weight": self.cue_weight,
            "ratio": self.ratio,
            "bound_factor": self.bound_factor,
            "n": self.n,
            "m": self.m,
            "beta": self.beta,
        }


def as_embedding_matrix(emb) -> np.ndarray:
    """Validate an (n, d) embedding array and promote it to float64."""
    rows = np.asarray(emb)
    if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
        raise DimensionMismatch(f"expected a non-empty (n, d) matrix, got shape {rows.shape}")
    rows = rows.astype(np.float64, copy=False)
    if not np.all(np.isfinite(rows)):
        raise NonFiniteInput("embedding matrix contains NaN or Inf")
    return rows


def bound_factor(beta: float, n: int, m: int) -> float:
    return beta / (beta + 1.0) * n / m


def phrase_weights(parsed: ParsedCaption, phrase: Phrase, beta: float) -> np.ndarray:
    """Normalized gamma weights of one phrase's tokens."""
    gamma = np.ones(len(phrase.token_indices), dtype=np.float64)
    if phrase.is_negated:
        for j, index in enumerate(phrase.token_indices):
            if parsed.tokens[index].is_cue:
                gamma[j] = beta
    logits = np.log(gamma)
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


@lru_cache(maxsize=8)
def _override_lexicon(cue_file: Path) -> Lexicon:
    if not cue_file.is_file():
        raise MalformedConfig(f"cue lexicon override {cue_file} is not a file")
    return Lexicon.load(cue_file=cue_file)


def apply_cue_override(parsed: ParsedCaption, cfg: BoostConfig) -> ParsedCaption:
    """Re-parse the caption when ``cfg`` names its own cue lexicon.

    Cue flags, negated phrases and spans all follow the override. The token
    count must not change, since embedding rows are aligned to tokens.
    """
    if cfg.cue_lexicon_override is None:
        return parsed
    reparsed = parse(parsed.raw, _override_lexicon(Path(cfg.cue_lexicon_override)))
    if reparsed.n != parsed.n:
        raise DimensionMismatch(
            f"cue override re-tokenizes {parsed.raw!r} into {reparsed.n} tokens, expected {parsed.n}"
        )
    return reparsed


def merge(parsed: ParsedCaption, emb, cfg: BoostConfig | None = None) -> MergedSequence:
    cfg = cfg or BoostConfig()
    parsed = apply_cue_override(parsed, cfg)
    rows = as_embedding_matrix(emb)
    if rows.shape[0] != parsed.n:
        raise DimensionMismatch(
            f"embedding has {rows.shape[0]} rows but the caption has {parsed.n} tokens"
        )

    merged = np.empty((parsed.m, rows.shape[1]), dtype=np.float64)
    weights = []
    for i, phrase in enumerate(parsed.phrases):
        w = phrase_weights(parsed, phrase, cfg.beta)
        merged[i] = w @ rows[list(phrase.token_indices)]
        weights.append(w)

    return MergedSequence(
        rows=merged,
        spans=tuple(p.token_indices for p in parsed.phrases),
        weights=tuple(weights),
    )


def mean_pool(seq) -> np.ndarray:
    rows = seq.rows if isinstance(seq, MergedSequence) else np.asarray(seq, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptySequence("cannot pool an empty sequence")
    return rows.mean(axis=0)


def amplification_check(parsed: ParsedCaption, emb, cfg: BoostConfig | None, probe) -> AmplificationReport:
    """Compare the cue's share of a linear probe before and after merging.

    ``s_single`` is the cue's contribution under plain mean pooling over all
    n tokens. ``s_merge`` uses the cue/predicate pair representation
    ``(beta*h_c + h_p) / (beta + 1)`` over m phrases, where ``h_c`` is the mean
    cue row of the negated phrase and ``h_p`` the mean of its other rows.
    With ``<v, h_p> >= 0`` the ratio is at least ``bound_factor``.
    """
    cfg = cfg or BoostConfig()
    parsed = apply_cue_override(parsed, cfg)
    rows = as_embedding_matrix(emb)
    if rows.shape[0] != parsed.n:
        raise DimensionMismatch(
            f"embedding has {rows.shape[0]} rows but the caption has {parsed.n} tokens"
        )
    v = np.asarray(probe, dtype=np.float64)
    if v.shape != (rows.shape[1],):
        raise DimensionMismatch(f"probe has shape {v.shape}, expected ({rows.shape[1]},)")

    negated = parsed.negated_phrases
    if not negated:
        raise NoCue("caption has no negated phrase")
    if len(negated) > 1:
        raise MultipleNegatedPhrases(f"caption has {len(negated)} negated phrases, expected one")
    phrase = negated[0]

    cue_idx = [i for i in phrase.token_indices if parsed.tokens[i].is_cue]
    rest_idx = [i for i in phrase.token_indices if not parsed.tokens[i].is_cue]
    h_c = rows[cue_idx].mean(axis=0)
    align = float(v @ h_c)
    if align <= 0:
        raise ZeroAlignment(f"<v, h_c> = {align:.6g} must be positive")
    pred = float(v @ rows[rest_idx].mean(axis=0)) if rest_idx else 0.0

    n, m, beta = parsed.n, parsed.m, cfg.beta
    w = phrase_weights(parsed, phrase, beta)
    phrase_pos = parsed.phrases.index(phrase)
    exact_row = merge(parsed, rows, cfg).rows[phrase_pos]
    cue_weight = float(sum(wj for wj, i in zip(w, phrase.token_indices) if parsed.tokens[i].is_cue))

    return AmplificationReport(
        s_single=align / n,
        s_merge=(beta * align + pred) / ((beta + 1.0) * m),
        bound_factor=bound_factor(beta, n, m),
        n=n,
        m=m,
        beta=beta,
        s_merge_exact=float(v @ exact_row) / m,
        cue_weight=cue_weight,
    )
