"""Word-level edit distance, WER, query similarity, and N-best oracle stats.

All functions tokenize text by whitespace; scoring is done on words, not
subword units. Stateless and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EditStats:
    """Minimal substitution/insertion/deletion counts for one hyp/ref pair."""

    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _words(text) -> list:
    if isinstance(text, str):
        return text.split()
    return list(text)


def edit_stats(hyp, ref) -> EditStats:
    """Levenshtein-minimal (S, I, D) counts via dynamic programming, unit costs.

    Ties on total distance are broken deterministically: diagonal
    (match/substitution) is preferred over deletion, deletion over insertion.
    """
    h = _words(hyp)
    r = _words(ref)
    m, n = len(h), len(r)
    # dp[i][j] = (dist, S, I, D) for hyp[:i] vs ref[:j]
    prev = [(j, 0, 0, j) for j in range(n + 1)]
    for i in range(1, m + 1):
        cur = [(i, 0, i, 0)] + [None] * n
        hi = h[i - 1]
        for j in range(1, n + 1):
            dd, ds, di, dl = prev[j - 1]
            if hi == r[j - 1]:
                best = (dd, ds, di, dl)
            else:
                best = (dd + 1, ds + 1, di, dl)
            # deletion from ref (hyp is missing ref[j-1])
            dd, ds, di, dl = cur[j - 1]
            cand = (dd + 1, ds, di, dl + 1)
            if cand[0] < best[0]:
                best = cand
            # insertion into ref (hyp has extra word hi)
            dd, ds, di, dl = prev[j]
            cand = (dd + 1, ds, di + 1, dl)
            if cand[0] < best[0]:
                best = cand
            cur[j] = best
        prev = cur
    dist, s, i_, d = prev[n]
    assert dist == s + i_ + d
    return EditStats(substitutions=s, insertions=i_, deletions=d, ref_len=n)


def wer(hyp, ref) -> float:
    """Word error rate (S+I+D)/ref_len, uncapped.

    Empty reference: 0.0 if the hypothesis is also empty, else 1.0.
    """
    st = edit_stats(hyp, ref)
    if st.ref_len == 0:
        return 0.0 if st.distance == 0 else 1.0
    return st.distance / st.ref_len


def query_similarity(hyp, ref) -> float:
    """Similarity score (1 - min(wer, 1))^2, in [0, 1]."""
    w = min(wer(hyp, ref), 1.0)
    return (1.0 - w) ** 2


def corpus_wer(pairs) -> float:
    """Total errors over total reference words for (hyp, ref) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("corpus_wer: empty input")
    errs = 0
    ref_words = 0
    for hyp, ref in pairs:
        st = edit_stats(hyp, ref)
        errs += st.distance
        ref_words += st.ref_len
    if ref_words == 0:
        raise ValueError("corpus_wer: zero total reference length")
    return errs / ref_words


def _min_errors(record) -> tuple:
    ref = record.reference
    best = None
    for hyp in record.hypotheses:
        d = edit_stats(hyp.words, ref).distance
        if best is None or d < best:
            best = d
    if best is None:
        raise ValueError("oracle_wer: record has no hypotheses")
    return best, len(_words(ref))


def oracle_wer(record) -> float:
    """Best achievable WER on one record: min errors over its hypotheses."""
    best, ref_len = _min_errors(record)
    if ref_len == 0:
        return 0.0 if best == 0 else 1.0
    return best / ref_len


def oracle_corpus_wer(records) -> float:
    """Corpus-level oracle: per-record minimal errors over total ref words."""
    records = list(records)
    if not records:
        raise ValueError("oracle_corpus_wer: empty input")
    errs = 0
    ref_words = 0
    for rec in records:
        best, ref_len = _min_errors(rec)
        errs += best
        ref_words += ref_len
    return errs / ref_words
