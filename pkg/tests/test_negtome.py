import numpy as np
import pytest

from neggrounding.errors import (
    DimensionMismatch,
    EmptySequence,
    MalformedConfig,
    MultipleNegatedPhrases,
    NoCue,
    NonFiniteInput,
    ZeroAlignment,
)
from neggrounding.negtome import (
    BoostConfig,
    amplification_check,
    bound_factor,
    mean_pool,
    merge,
    phrase_weights,
)
from neggrounding.textparse import parse

SUBJECTS = ["a dog", "the man", "a small red car", "two women", "an old bus"]
NEGATED = ["without a hat", "not lying", "with no umbrella", "not wearing glasses", "never smiling"]
TAILS = ["", "on the grass", "in a park", "near the wooden fence"]
WORDS = ["a", "the", "dog", "hat", "red", "on", "and", "not", "no", "without", "lying", "isn't", "unhappy", "."]


def one_negation_caption(rng):
    parts = [rng.choice(SUBJECTS), rng.choice(NEGATED), rng.choice(TAILS)]
    return " ".join(p for p in parts if p)


def brute_force_merge(parsed, rows, beta):
    out = []
    for phrase in parsed.phrases:
        total = np.zeros(rows.shape[1])
        norm = 0.0
        for i in phrase.token_indices:
            g = beta if phrase.is_negated and parsed.tokens[i].is_cue else 1.0
            total += g * rows[i]
            norm += g
        out.append(total / norm)
    return np.array(out)


class TestBoostConfig:
    @pytest.mark.parametrize("beta", [0.0, -1.0, float("nan"), float("inf")])
    def test_rejects_bad_beta(self, beta):
        with pytest.raises(MalformedConfig):
            BoostConfig(beta=beta)

    def test_default(self):
        assert BoostConfig().beta == 2.0


class TestCueOverride:
    @pytest.fixture
    def cue_file(self, tmp_path):
        path = tmp_path / "cues.txt"
        path.write_text("# domain cues\nlacking\n")
        return path

    def test_override_cue_changes_merged_rows(self, cue_file):
        parsed = parse("a dog lacking a collar")
        emb = np.eye(5)
        plain = merge(parsed, emb, BoostConfig(beta=4.0))
        boosted = merge(parsed, emb, BoostConfig(beta=4.0, cue_lexicon_override=cue_file))
        assert plain.spans == ((0, 1), (2,), (3, 4))
        assert boosted.spans == ((0, 1), (2, 3, 4))
        np.testing.assert_allclose(boosted.rows[1], (4 * emb[2] + emb[3] + emb[4]) / 6, atol=1e-12)

    def test_override_drops_shipped_cues(self, cue_file):
        parsed = parse("a man without a hat")
        merged = merge(parsed, np.eye(5), BoostConfig(beta=4.0, cue_lexicon_override=cue_file))
        for w in merged.weights:
            np.testing.assert_allclose(w, np.full(len(w), 1 / len(w)))

    def test_amplification_uses_override(self, cue_file):
        parsed = parse("a dog lacking a collar")
        emb = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        with pytest.raises(NoCue):
            amplification_check(parsed, emb, BoostConfig(beta=4.0), [1.0, 0.0])
        report = amplification_check(parsed, emb, BoostConfig(beta=4.0, cue_lexicon_override=cue_file), [1.0, 0.0])
        assert report.cue_weight == pytest.approx(4 / 6)
        assert report.holds()

    def test_missing_override_file(self, tmp_path):
        with pytest.raises(MalformedConfig):
            merge(parse("a dog"), np.eye(2), BoostConfig(cue_lexicon_override=tmp_path / "absent.txt"))


class TestMerge:
    def test_two_token_negated_phrase(self):
        parsed = parse("cat not lying")
        emb = np.array([[5.0, 5.0], [1.0, 0.0], [0.0, 1.0]])
        merged = merge(parsed, emb, BoostConfig(beta=2.0))
        np.testing.assert_allclose(merged.rows, [[5.0, 5.0], [2 / 3, 1 / 3]], atol=1e-12)

    def test_unit_basis(self):
        parsed = parse("a man without a hat")
        e = np.eye(5)
        merged = merge(parsed, e, BoostConfig(beta=2.0))
        expected = np.array([(e[0] + e[1]) / 2, (2 * e[2] + e[3] + e[4]) / 4])
        np.testing.assert_allclose(merged.rows, expected, atol=1e-12)
        assert merged.spans == ((0, 1), (2, 3, 4))
        np.testing.assert_allclose(merged.weights[1], [0.5, 0.25, 0.25])

    def test_beta_one_is_phrase_mean(self, rng):
        for _ in range(1000):
            words = rng.choice(WORDS, size=int(rng.integers(1, 9)))
            parsed = parse(" ".join(words))
            emb = rng.normal(size=(parsed.n, 6))
            merged = merge(parsed, emb, BoostConfig(beta=1.0))
            expected = np.array([emb[list(p.token_indices)].mean(axis=0) for p in parsed.phrases])
            np.testing.assert_allclose(merged.rows, expected, atol=1e-6, rtol=0)

    def test_beta_two_pair_formula(self, rng):
        parsed = parse("cat not lying")
        for _ in range(1000):
            emb = rng.normal(size=(3, 8))
            merged = merge(parsed, emb, BoostConfig(beta=2.0))
            np.testing.assert_allclose(merged.rows[1], (2 * emb[1] + emb[2]) / 3, atol=1e-9, rtol=0)

    def test_matches_weighted_sum(self, rng):
        for _ in range(200):
            words = rng.choice(WORDS, size=int(rng.integers(1, 9)))
            parsed = parse(" ".join(words))
            emb = rng.normal(size=(parsed.n, 4))
            beta = float(rng.uniform(0.5, 5.0))
            merged = merge(parsed, emb, BoostConfig(beta=beta))
            np.testing.assert_allclose(merged.rows, brute_force_merge(parsed, emb, beta), atol=1e-12)

    def test_weights_are_convex(self, rng):
        for _ in range(200):
            parsed = parse(one_negation_caption(rng))
            for phrase in parsed.phrases:
                w = phrase_weights(parsed, phrase, float(rng.uniform(0.1, 10.0)))
                assert np.all(w >= 0)
                assert w.sum() == pytest.approx(1.0)

    def test_monotone_in_beta(self, rng):
        parsed = parse("a man without a hat")
        for _ in range(100):
            v = rng.normal(size=5)
            emb = rng.normal(size=(5, 5))
            # cue row projects at least as high as the rest of its phrase
            top = max(v @ emb[3], v @ emb[4])
            emb[2] += (top - v @ emb[2] + abs(rng.normal())) * v / (v @ v)
            projections = [v @ merge(parsed, emb, BoostConfig(beta=b)).rows[1] for b in (0.5, 1, 2, 4, 8, 16)]
            assert all(b >= a - 1e-12 for a, b in zip(projections, projections[1:]))

    def test_row_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            merge(parse("a man without a hat"), np.zeros((4, 3)))

    def test_non_finite(self):
        emb = np.zeros((3, 2))
        emb[1, 0] = np.nan
        with pytest.raises(NonFiniteInput):
            merge(parse("cat not lying"), emb)

    def test_output_keeps_phrase_order(self, rng):
        parsed = parse("a dog on the grass")
        merged = merge(parsed, rng.normal(size=(parsed.n, 3)))
        assert merged.m == parsed.m
        assert [list(s) for s in merged.spans] == [list(p.token_indices) for p in parsed.phrases]


class TestMeanPool:
    def test_two_rows(self):
        np.testing.assert_allclose(mean_pool([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])

    def test_single_row(self):
        np.testing.assert_array_equal(mean_pool([[3.0, -2.0, 7.0]]), [3.0, -2.0, 7.0])

    def test_constant_rows(self):
        v = np.array([0.25, 1.5, -4.0])
        np.testing.assert_allclose(mean_pool(np.tile(v, (4, 1))), v)

    def test_merged_sequence(self):
        merged = merge(parse("cat not lying"), [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(mean_pool(merged), [(1 + 2 / 3) / 2, (1 / 3) / 2])

    def test_empty(self):
        with pytest.raises(EmptySequence):
            mean_pool(np.zeros((0, 3)))


class TestAmplification:
    def test_bound_factor(self):
        assert bound_factor(2.0, 6, 3) == pytest.approx(4 / 3)

    def test_no_merging_limit(self):
        assert bound_factor(1e12, 3, 3) == pytest.approx(1.0)

    def test_hand_example(self):
        parsed = parse("cat not lying")
        emb = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        report = amplification_check(parsed, emb, BoostConfig(beta=2.0), [1.0, 1.0])
        assert report.s_single == pytest.approx(1 / 3)
        assert report.s_merge == pytest.approx(0.5)
        assert report.s_merge_exact == pytest.approx(0.5)
        assert report.cue_weight == pytest.approx(2 / 3)
        assert report.bound_factor == pytest.approx(1.0)
        assert report.ratio == pytest.approx(1.5)
        assert report.holds()

    def test_random_trials_never_violate_bound(self, rng):
        violations = 0
        for _ in range(1000):
            parsed = parse(one_negation_caption(rng))
            beta = float(rng.uniform(0.5, 8.0))
            d = int(rng.integers(2, 9))
            emb = rng.uniform(0.0, 1.0, size=(parsed.n, d))
            for token in parsed.tokens:
                if token.is_cue:
                    emb[token.index] = np.abs(rng.normal(size=d)) + 0.1
            v = rng.uniform(0.01, 1.0, size=d)
            report = amplification_check(parsed, emb, BoostConfig(beta=beta), v)

            phrase = parsed.negated_phrases[0]
            cue = [i for i in phrase.token_indices if parsed.tokens[i].is_cue]
            rest = [i for i in phrase.token_indices if not parsed.tokens[i].is_cue]
            a = sum(v @ emb[i] for i in cue) / len(cue)
            p = sum(v @ emb[i] for i in rest) / len(rest) if rest else 0.0
            s_single = a / parsed.n
            s_merge = (beta * a + p) / ((beta + 1) * parsed.m)
            assert report.s_single == pytest.approx(s_single, rel=1e-12)
            assert report.s_merge == pytest.approx(s_merge, rel=1e-12)
            if s_merge / s_single < bound_factor(beta, parsed.n, parsed.m) - 1e-9:
                violations += 1
            assert report.holds(tol=1e-9)
        assert violations == 0

    def test_no_cue(self):
        with pytest.raises(NoCue):
            amplification_check(parse("a dog on the grass"), np.ones((5, 2)), None, [1.0, 1.0])

    def test_two_negated_phrases(self):
        parsed = parse("a dog without a hat and not lying")
        with pytest.raises(MultipleNegatedPhrases):
            amplification_check(parsed, np.ones((parsed.n, 2)), None, [1.0, 1.0])

    def test_misaligned_probe(self):
        emb = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        with pytest.raises(ZeroAlignment):
            amplification_check(parse("cat not lying"), emb, None, [-1.0, 0.0])

    def test_probe_dimension(self):
        with pytest.raises(DimensionMismatch):
            amplification_check(parse("cat not lying"), np.ones((3, 2)), None, [1.0, 1.0, 1.0])
