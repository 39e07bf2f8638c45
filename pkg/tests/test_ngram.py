"""Back-off language model tests.

The centerpiece is a worksheet fixture whose probabilities were computed by
hand as exact fractions; the trained model must reproduce every entry to
machine precision. Counting is checked against a brute-force window
counter, discounting against the defining formula, and every reachable
context against the sum-to-one invariant.
"""

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from nbestrr.errors import ConfigurationError, InputError, ParseError
from nbestrr.ngram import (BOS_TOKEN, EOS_TOKEN, LOG10_FLOOR, UNK_TOKEN,
                           BackoffModel, CountTable, apply_cutoffs,
                           conditional_logprob, count, estimate, export_arpa,
                           good_turing_discount, import_arpa, logprob, train)

WORKSHEET = Path(__file__).parent / "data" / "katz_worksheet.txt"

VOCAB = ["play", "the", "song", "next", "track", "stop", "music", "volume"]


def random_corpus(rng, sentences=40, max_len=7):
    out = []
    for _ in range(sentences):
        n = int(rng.integers(1, max_len + 1))
        out.append(tuple(rng.choice(VOCAB, size=n)))
    return out


def context_sum(model, context):
    """Total conditional probability mass over the predictable vocabulary."""
    return math.fsum(10.0 ** conditional_logprob(model, context, w)
                     for w in model.vocab)


class TestCount:
    def test_unigram_counts(self):
        table = count(["a a b"], order=4)
        assert table.count_of(("a",)) == 2
        assert table.count_of(("b",)) == 1

    def test_boundary_tokens_added_for_higher_orders(self):
        table = count(["a a b", "b a"], order=2)
        tokens = sum(table.counts[1].values())
        assert tokens == 5 + 2 * 2  # corpus tokens + one bos and eos per line
        assert table.count_of((BOS_TOKEN,)) == 2
        assert table.count_of((EOS_TOKEN,)) == 2

    def test_order_one_has_no_boundaries(self):
        table = count(["a a b"], order=1)
        assert table.count_of((BOS_TOKEN,)) == 0
        assert sum(table.counts[1].values()) == 3

    def test_matches_brute_force_window_counter(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            corpus = random_corpus(rng, sentences=int(rng.integers(1, 15)))
            order = int(rng.integers(1, 5))
            table = count(corpus, order=order)
            expected = {k: {} for k in range(1, order + 1)}
            for sent in corpus:
                padded = ((BOS_TOKEN,) + sent + (EOS_TOKEN,)
                          if order >= 2 else sent)
                for k in range(1, order + 1):
                    for i in range(len(padded) - k + 1):
                        gram = padded[i:i + k]
                        expected[k][gram] = expected[k].get(gram, 0) + 1
            for k in range(1, order + 1):
                assert dict(table.counts[k]) == expected[k]

    def test_lower_order_marginal_consistency(self):
        table = count(random_corpus(np.random.default_rng(1)), order=3)
        for k in (2, 3):
            marginals = {}
            for gram, c in table.counts[k].items():
                marginals[gram[:-1]] = marginals.get(gram[:-1], 0) + c
            for context, total in marginals.items():
                # Contexts ending the padded sentence never extend; everything
                # else extends exactly count(context) times.
                assert total <= table.count_of(context)

    def test_empty_corpus_raises(self):
        with pytest.raises(ConfigurationError):
            count([], order=4)
        with pytest.raises(ConfigurationError):
            count(["a"], order=0)


class TestCutoffs:
    def make_table(self):
        return count(["a b c d", "a b c d", "a b x y"], order=4)

    def test_singleton_high_order_grams_dropped(self):
        cut = apply_cutoffs(self.make_table())
        assert cut.count_of(("b", "x", "y")) == 0
        assert cut.count_of(("a", "b", "x", "y")) == 0
        assert cut.count_of(("a", "b", "c")) == 2

    def test_singleton_bigrams_and_unigrams_kept(self):
        cut = apply_cutoffs(self.make_table())
        assert cut.count_of(("x", "y")) == 1
        assert cut.count_of(("y",)) == 1

    def test_idempotent(self):
        once = apply_cutoffs(self.make_table())
        twice = apply_cutoffs(once)
        assert once.counts == twice.counts

    def test_count_of_count_statistics_preserved(self):
        table = self.make_table()
        cut = apply_cutoffs(table)
        assert cut.counts_of_counts == table.counts_of_counts


class TestGoodTuringDiscount:
    def cofc_table(self, cofc):
        return CountTable(order=2, counts={1: {}, 2: {}},
                          counts_of_counts={2: cofc})

    def test_unit_count_ratio_from_defining_formula(self):
        """N_1=400, N_2=200 gives r* = 2 * 200/400 = 1.0, hence d_1 = 1."""
        cofc = {1: 400, 2: 200, 3: 100, 4: 60, 5: 40, 6: 30, 7: 25, 8: 20}
        d = good_turing_discount(self.cofc_table(cofc))[2]
        assert d[1] == pytest.approx(1.0)
        # d_2 by hand: r*_2 = 3*100/200 = 1.5, A = 8*20/400 = 0.4,
        # d_2 = (1.5/2 - 0.4) / (1 - 0.4) = 7/12.
        assert d[2] == pytest.approx(7.0 / 12.0)

    def test_counts_above_bound_undiscounted(self):
        cofc = {r: max(1, 400 >> r) for r in range(1, 12)}
        d = good_turing_discount(self.cofc_table(cofc))[2]
        assert set(d) == set(range(1, 8))
        assert 8 not in d

    def test_ratios_in_unit_interval_over_random_tables(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            base = float(rng.uniform(50, 5000))
            decay = float(rng.uniform(0.3, 0.95))
            cofc = {}
            n = base
            for r in range(1, 10):
                cofc[r] = max(int(n * rng.uniform(0.5, 1.5)), 0)
                n *= decay
            d = good_turing_discount(self.cofc_table(cofc))[2]
            assert all(0.0 < v <= 1.0 for v in d.values())

    def test_sparse_statistics_fall_back_to_smoothing(self):
        # N_5 = 0 breaks the raw path; the regression fit still yields
        # usable ratios when the available points decay steeply.
        cofc = {1: 1000, 2: 250, 3: 110, 4: 60, 6: 25, 7: 18, 8: 12}
        d = good_turing_discount(self.cofc_table(cofc))[2]
        assert all(0.0 < v <= 1.0 for v in d.values())
        assert d[1] < 1.0

    def test_unigrams_never_discounted(self):
        corpus = random_corpus(np.random.default_rng(3))
        discounts = good_turing_discount(count(corpus, order=4))
        assert 1 not in discounts
        assert set(discounts) == {2, 3, 4}


def read_worksheet():
    lines = WORKSHEET.read_text(encoding="utf-8").split("\n")
    entries = []
    for line in lines:
        if not line or line.startswith("#"):
            continue
        entries.append(line.split("\t"))
    return entries


class TestKatzWorksheet:
    """The model must reproduce a fixture computed by hand on paper."""

    def build(self):
        corpus, discounts, order = [], {}, 2
        checks = []
        for fields in read_worksheet():
            kind = fields[0]
            if kind == "corpus":
                corpus.append(fields[1])
            elif kind == "order":
                order = int(fields[1])
            elif kind == "discount":
                discounts.setdefault(int(fields[1]), {})[int(fields[2])] = \
                    float(fields[3])
            else:
                checks.append(fields)
        model = estimate(count(corpus, order=order), discounts)
        return model, checks

    def test_every_worksheet_entry(self):
        model, checks = self.build()
        assert checks, "worksheet fixture has no check lines"
        for fields in checks:
            kind = fields[0]
            if kind == "prob":
                gram = tuple(fields[1].split())
                want = float(Fraction(fields[2]))
                got = 10.0 ** model.logp[len(gram)][gram]
                assert got == pytest.approx(want, rel=1e-12), gram
            elif kind == "bow":
                gram = tuple(fields[1].split())
                want = float(Fraction(fields[2]))
                got = 10.0 ** model.backoff[len(gram)][gram]
                assert got == pytest.approx(want, rel=1e-12), gram
            elif kind == "floor_prob":
                gram = tuple(fields[1].split())
                assert model.logp[len(gram)][gram] == LOG10_FLOOR
            elif kind == "floor_bow":
                gram = tuple(fields[1].split())
                assert model.backoff[len(gram)][gram] == LOG10_FLOOR
            elif kind == "cond":
                history, word = tuple(fields[1].split()), fields[2]
                want = float(Fraction(fields[3]))
                got = 10.0 ** conditional_logprob(model, history, word)
                assert got == pytest.approx(want, rel=1e-12), (history, word)
            elif kind == "score":
                want = float(Fraction(fields[2]))
                got = 10.0 ** logprob(model, fields[1])
                assert got == pytest.approx(want, rel=1e-12), fields[1]
            else:
                raise AssertionError(f"unknown worksheet entry {kind!r}")

    def test_worksheet_contexts_normalize(self):
        model, _ = self.build()
        for context in ((), ("a",), ("b",), ("c",), (BOS_TOKEN,)):
            assert context_sum(model, context) == pytest.approx(1.0, abs=1e-9)


class TestEstimate:
    def test_unigram_ml_when_nothing_triggers(self):
        model = train(["a a b"], order=1)
        assert 10.0 ** logprob(model, ["a"]) == pytest.approx(2.0 / 3.0)

    def test_all_reachable_contexts_sum_to_one(self):
        corpus = random_corpus(np.random.default_rng(4), sentences=60)
        model = train(corpus, order=4)
        contexts = {()}
        for k, grams in model.logp.items():
            if k < model.order:
                contexts.update(grams)
            contexts.update(g[:-1] for g in grams)
        contexts = {c for c in contexts if EOS_TOKEN not in c
                    and UNK_TOKEN not in c}
        assert len(contexts) > 50
        for context in contexts:
            assert context_sum(model, context) == pytest.approx(1.0, abs=1e-6)

    def test_reduces_to_ml_without_discounts(self):
        corpus = [("a", "b"), ("a", "b"), ("a", "c"), ("b", "a")]
        table = count(corpus, order=2)
        model = estimate(table, {})
        for sentence in corpus:
            padded = (BOS_TOKEN,) + sentence + (EOS_TOKEN,)
            expect = 0.0
            for i in range(1, len(padded)):
                gram = padded[i - 1:i + 1]
                expect += math.log10(table.count_of(gram) /
                                     table.count_of(gram[:-1]))
            assert logprob(model, sentence) == pytest.approx(expect, abs=1e-12)

    def test_more_evidence_never_lowers_ml_probability(self):
        for extra in range(0, 6):
            corpus = [("a", "b")] * (2 + extra) + [("a", "c")]
            model = estimate(count(corpus, order=2), {})
            p = 10.0 ** conditional_logprob(model, ("a",), "b")
            if extra == 0:
                prev = p
            else:
                assert p >= prev
                prev = p

    def test_oov_scored_via_unk(self):
        model = train(["play the song", "play the track"], order=2)
        score = logprob(model, ["play", "the", "zebra"])
        assert math.isfinite(score)
        assert score == pytest.approx(
            logprob(model, ["play", "the", UNK_TOKEN]))

    def test_empty_sequence_raises(self):
        model = train(["a b"], order=2)
        with pytest.raises(InputError):
            logprob(model, [])

    def test_vocab_excludes_bos(self):
        model = train(["a b"], order=2)
        assert BOS_TOKEN not in model.vocab
        assert EOS_TOKEN in model.vocab and UNK_TOKEN in model.vocab

    def test_history_truncated_to_model_order(self):
        model = train(["play the song now", "play the song later"], order=2)
        long_history = ("stop", "play", "the")
        assert conditional_logprob(model, long_history, "song") == \
            conditional_logprob(model, ("the",), "song")


class TestArpaRoundTrip:
    def build_model(self):
        return train(random_corpus(np.random.default_rng(5), sentences=50),
                     order=4)

    def test_every_entry_preserved(self, tmp_path):
        model = self.build_model()
        path = tmp_path / "model.arpa"
        export_arpa(model, path)
        back = import_arpa(path)
        assert back.order == model.order
        for k in model.logp:
            assert set(back.logp[k]) == set(model.logp[k])
            for gram, lp in model.logp[k].items():
                assert back.logp[k][gram] == pytest.approx(lp, abs=1e-6)
        for k in model.backoff:
            for gram, bow in model.backoff[k].items():
                assert back.backoff[k][gram] == pytest.approx(bow, abs=1e-6)

    def test_sentence_scores_preserved(self, tmp_path):
        model = self.build_model()
        path = tmp_path / "model.arpa"
        export_arpa(model, path)
        back = import_arpa(path)
        rng = np.random.default_rng(6)
        for sent in random_corpus(rng, sentences=30):
            assert logprob(back, sent) == pytest.approx(
                logprob(model, sent), abs=1e-6)

    def test_header_counts_match_sections(self, tmp_path):
        model = self.build_model()
        path = tmp_path / "model.arpa"
        export_arpa(model, path)
        text = path.read_text(encoding="utf-8")
        assert text.startswith("\\data\\\n")
        for k in range(1, 5):
            declared = int(text.split(f"ngram {k}=")[1].split("\n")[0])
            section = text.split(f"\\{k}-grams:\n")[1].split("\n\\")[0]
            body = [l for l in section.split("\n") if l.strip()]
            assert declared == len(body) == len(model.logp.get(k, {}))

    def test_malformed_files_raise_with_location(self, tmp_path):
        cases = {
            "no_end.arpa": "\\data\\\nngram 1=1\n\n\\1-grams:\n-1.0\t<unk>\n",
            "bad_header.arpa": "\\data\\\nngram one=1\n\\end\\\n",
            "wrong_count.arpa": ("\\data\\\nngram 1=2\n\n\\1-grams:\n"
                                 "-1.0\t<unk>\n\n\\end\\\n"),
            "stray_entry.arpa": "\\data\\\nngram 1=1\n-1.0\t<unk>\n\\end\\\n",
            "no_unk.arpa": ("\\data\\\nngram 1=1\n\n\\1-grams:\n"
                            "-1.0\ta\n\n\\end\\\n"),
            "wrong_order_gram.arpa": ("\\data\\\nngram 1=1\n\n\\1-grams:\n"
                                      "-1.0\ta b\n\n\\end\\\n"),
        }
        for name, content in cases.items():
            path = tmp_path / name
            path.write_text(content)
            with pytest.raises(ParseError):
                import_arpa(path)
