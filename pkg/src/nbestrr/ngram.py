"""Katz back-off 4-gram language model with Good-Turing discounting.

Counting pads each sentence with one start and one end symbol and slides a
window per order; an order-1 table uses raw tokens only. Good-Turing
discounts r* = (r+1) N_{r+1} / N_r are Katz-normalized for counts up to 7
and computed from pre-cutoff count-of-count statistics, falling back to a
log-log regression fit (simple Good-Turing) when the needed N_r are sparse.
The start symbol is never predicted; its unigram mass funds the unknown
word, which keeps every conditional distribution summing to one exactly.
Probabilities are kept in log10 for ARPA compatibility.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigurationError, InputError, ParseError

BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
LOG10_FLOOR = -99.0


def _as_words(sentence):
    if isinstance(sentence, str):
        return tuple(sentence.split())
    return tuple(sentence)


@dataclass
class CountTable:
    order: int
    counts: dict            # order -> {ngram tuple -> count}
    counts_of_counts: dict  # order -> {r -> N_r}, frozen at counting time

    def count_of(self, ngram) -> int:
        return self.counts[len(ngram)].get(tuple(ngram), 0)


@dataclass
class BackoffModel:
    order: int
    logp: dict     # order -> {ngram tuple -> log10 probability}
    backoff: dict  # order -> {ngram tuple -> log10 back-off weight}
    vocab: tuple = field(default=())  # predictable tokens: words, </s>, <unk>

    def __post_init__(self):
        if not self.vocab:
            self.vocab = tuple(sorted(
                w[0] for w in self.logp.get(1, {}) if w[0] != BOS_TOKEN))


def count(corpus, order: int = 4) -> CountTable:
    """N-gram counts for orders 1..order with sentence-boundary padding.

    Boundaries are only introduced when order >= 2; an order-1 table is the
    plain token frequency of the corpus.
    """
    sentences = [_as_words(s) for s in corpus]
    sentences = [s for s in sentences if s]
    if not sentences:
        raise ConfigurationError("count: corpus is empty")
    if order < 1:
        raise ConfigurationError(f"count: order {order} < 1")
    counts = {k: Counter() for k in range(1, order + 1)}
    for sent in sentences:
        padded = (BOS_TOKEN,) + sent + (EOS_TOKEN,) if order >= 2 else sent
        for k in range(1, order + 1):
            for i in range(len(padded) - k + 1):
                counts[k][padded[i:i + k]] += 1
    cofc = {k: Counter(counts[k].values()) for k in counts}
    return CountTable(order=order, counts=counts, counts_of_counts=cofc)


def apply_cutoffs(table: CountTable) -> CountTable:
    """Drop order-3 and order-4 entries seen fewer than twice."""
    counts = {}
    for k, grams in table.counts.items():
        if k >= 3:
            counts[k] = Counter({g: c for g, c in grams.items() if c >= 2})
        else:
            counts[k] = Counter(grams)
    return CountTable(order=table.order, counts=counts,
                      counts_of_counts=dict(table.counts_of_counts))


def _smoothed_counts_of_counts(cofc, max_r):
    """Least-squares fit of log N_r against log r, evaluated at 1..max_r."""
    points = [(math.log(r), math.log(n)) for r, n in cofc.items() if n > 0]
    if len({x for x, _ in points}) < 2:
        return None
    n = len(points)
    sx = sum(x for x, _ in points)
    sy = sum(y for _, y in points)
    sxx = sum(x * x for x, _ in points)
    sxy = sum(x * y for x, y in points)
    denom = n * sxx - sx * sx
    slope = (n * sxy - sx * sy) / denom
    intercept = (sy - slope * sx) / n
    return {r: math.exp(intercept + slope * math.log(r)) for r in range(1, max_r + 1)}


def good_turing_discount(table: CountTable, max_count: int = 7) -> dict:
    """Katz discount ratios d_r per order for counts r <= max_count.

    Unigrams are left undiscounted. Raw count-of-count statistics are used
    when N_1..N_{max_count+1} are all positive; otherwise the regression
    smoothing supplies them. Ratios outside (0, 1] disable the discount for
    that count (d_r = 1), as does an unusable normalizer.
    """
    discounts = {}
    for k in range(2, table.order + 1):
        cofc = table.counts_of_counts.get(k, {})
        per_r = {r: 1.0 for r in range(1, max_count + 1)}
        discounts[k] = per_r
        need = range(1, max_count + 2)
        if all(cofc.get(r, 0) > 0 for r in need):
            n_r = {r: float(cofc[r]) for r in need}
        else:
            n_r = _smoothed_counts_of_counts(cofc, max_count + 1)
            if n_r is None:
                continue
        big_a = (max_count + 1) * n_r[max_count + 1] / n_r[1]
        if not 0.0 < big_a < 1.0:
            continue
        for r in range(1, max_count + 1):
            r_star = (r + 1) * n_r[r + 1] / n_r[r]
            d = (r_star / r - big_a) / (1.0 - big_a)
            per_r[r] = d if 0.0 < d <= 1.0 else 1.0
    return discounts


def _conditional(logp, backoff, history, word):
    """Katz recursion on partially built tables: log10 p(word | history)."""
    acc = 0.0
    while True:
        k = len(history) + 1
        hit = logp.get(k, {}).get(history + (word,))
        if hit is not None:
            return acc + hit
        if not history:
            return acc + logp[1].get((word,), logp[1][(UNK_TOKEN,)])
        # Contexts absent from the back-off table contribute weight 1.
        acc += backoff.get(k - 1, {}).get(history, 0.0)
        history = history[1:]


def estimate(table: CountTable, discounts: dict) -> BackoffModel:
    """Build the back-off model from a (cut) count table and discount ratios.

    Each surviving n-gram gets discounted maximum likelihood mass against
    the raw lower-order context count; the freed mass becomes the context's
    back-off weight over the words it does not model directly.
    """
    unigrams = table.counts[1]
    total = sum(unigrams.values())
    logp = {1: {}}
    backoff = {}
    bos_mass = unigrams.get((BOS_TOKEN,), 0) / total
    for gram, c in unigrams.items():
        if gram == (BOS_TOKEN,):
            logp[1][gram] = LOG10_FLOOR
        else:
            logp[1][gram] = math.log10(c / total)
    logp[1][(UNK_TOKEN,)] = math.log10(bos_mass) if bos_mass > 0 else LOG10_FLOOR

    for k in range(2, table.order + 1):
        logp[k] = {}
        by_context = {}
        for gram, c in table.counts[k].items():
            by_context.setdefault(gram[:-1], []).append((gram[-1], c))
        backoff[k - 1] = {}
        for context, continuations in by_context.items():
            denom = table.counts[k - 1].get(context, 0)
            if denom <= 0:
                raise ConfigurationError(
                    f"estimate: context {context} missing from order-{k - 1} counts")
            kept_mass = 0.0
            lower_mass = 0.0
            for word, c in continuations:
                d = discounts.get(k, {}).get(c, 1.0)
                p = d * c / denom
                logp[k][context + (word,)] = math.log10(p)
                kept_mass += p
                lower_mass += 10.0 ** _conditional(logp, backoff, context[1:], word)
            freed = max(1.0 - kept_mass, 0.0)
            remaining = 1.0 - lower_mass
            if freed > 0.0 and remaining > 0.0:
                backoff[k - 1][context] = math.log10(freed) - math.log10(remaining)
            else:
                # Directly modeled words absorb everything; starve the rest.
                backoff[k - 1][context] = LOG10_FLOOR
    return BackoffModel(order=table.order, logp=logp, backoff=backoff)


def logprob(model: BackoffModel, words) -> float:
    """Log10 probability of a sentence, with boundary handling for order >= 2.

    Unknown words are mapped to the unk token. For order >= 2 the score
    includes the end-of-sentence prediction; order-1 models score tokens
    independently.
    """
    words = _as_words(words)
    if not words:
        raise InputError("logprob: empty word sequence")
    known = set(model.logp[1])
    tokens = tuple(w if (w,) in known else UNK_TOKEN for w in words)
    if model.order == 1:
        return sum(_conditional(model.logp, model.backoff, (), w) for w in tokens)
    padded = (BOS_TOKEN,) + tokens + (EOS_TOKEN,)
    total = 0.0
    for i in range(1, len(padded)):
        history = padded[max(0, i - (model.order - 1)):i]
        total += _conditional(model.logp, model.backoff, history, padded[i])
    return total


def conditional_logprob(model: BackoffModel, history, word) -> float:
    """Log10 p(word | history), truncating history to the model order."""
    known = set(model.logp[1])
    history = tuple(w if (w,) in known else UNK_TOKEN for w in _as_words(history))
    if (word,) not in known:
        word = UNK_TOKEN
    history = history[len(history) - min(len(history), model.order - 1):]
    return _conditional(model.logp, model.backoff, history, word)


def export_arpa(model: BackoffModel, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\\data\\\n")
        for k in range(1, model.order + 1):
            f.write(f"ngram {k}={len(model.logp.get(k, {}))}\n")
        for k in range(1, model.order + 1):
            f.write(f"\n\\{k}-grams:\n")
            for gram in sorted(model.logp.get(k, {})):
                lp = model.logp[k][gram]
                # Ten decimals keep whole-sentence scores stable across a
                # round trip; per-word error stays below 1e-9.
                line = f"{lp:.10f}\t{' '.join(gram)}"
                bow = model.backoff.get(k, {}).get(gram)
                if bow is not None:
                    line += f"\t{bow:.10f}"
                f.write(line + "\n")
        f.write("\n\\end\\\n")


def import_arpa(path) -> BackoffModel:
    header_re = re.compile(r"ngram (\d+)=(\d+)")
    section_re = re.compile(r"\\(\d+)-grams:")
    declared = {}
    logp = {}
    backoff = {}
    section = None
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    state = "preamble"
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "\\data\\":
            state = "header"
            continue
        if line == "\\end\\":
            state = "done"
            continue
        m = section_re.fullmatch(line)
        if m:
            section = int(m.group(1))
            logp.setdefault(section, {})
            state = "body"
            continue
        if state == "header":
            m = header_re.fullmatch(line)
            if not m:
                raise ParseError(f"{path}:{lineno}: bad header line {line!r}")
            declared[int(m.group(1))] = int(m.group(2))
            continue
        if state != "body" or section is None:
            raise ParseError(f"{path}:{lineno}: entry outside any n-gram section")
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise ParseError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
        try:
            lp = float(fields[0])
            gram = tuple(fields[1].split())
            if len(gram) != section:
                raise ValueError(f"{len(gram)}-gram in {section}-gram section")
            logp[section][gram] = lp
            if len(fields) == 3:
                backoff.setdefault(section, {})[gram] = float(fields[2])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if state != "done":
        raise ParseError(f"{path}: missing \\end\\ marker")
    for k, n in declared.items():
        if len(logp.get(k, {})) != n:
            raise ParseError(
                f"{path}: section {k} declares {n} entries, found {len(logp.get(k, {}))}")
    if 1 not in logp or (UNK_TOKEN,) not in logp[1]:
        raise ParseError(f"{path}: model lacks a unigram section with {UNK_TOKEN}")
    return BackoffModel(order=max(logp), logp=logp, backoff=backoff)


def train(corpus, order: int = 4) -> BackoffModel:
    """Count, cut, discount, estimate: the full pipeline on reference text."""
    table = apply_cutoffs(count(corpus, order=order))
    return estimate(table, good_turing_discount(table))
