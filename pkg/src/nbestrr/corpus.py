"""Synthetic query generation and a word-level ASR error channel.

Reference queries are built by filling slotted templates from a catalog.
An error channel then corrupts each reference into an N-best list: every
word is independently substituted or deleted, every gap independently
receives an insertion, and each sampled hypothesis is scored with the
log-likelihood of its own corruption path plus Gaussian jitter. Scores are
log-softmax normalized per record so they are finite and non-positive.
"""

from __future__ import annotations

import json
import math
import re
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, InputError, ParseError

_SLOT_RE = re.compile(r"\{([^{}]+)\}")


@dataclass(frozen=True)
class QueryTemplate:
    """A query pattern with named slots, e.g. "play {song} by {artist}"."""

    pattern: str
    slot_names: tuple

    def __post_init__(self):
        if not self.pattern.strip():
            raise ConfigurationError("QueryTemplate: pattern is empty")
        object.__setattr__(self, "slot_names", tuple(self.slot_names))
        for slot in _SLOT_RE.findall(self.pattern):
            if slot not in self.slot_names:
                raise ConfigurationError(
                    f"QueryTemplate: slot '{slot}' not declared in slot_names")


@dataclass(frozen=True)
class ErrorChannelConfig:
    p_sub: float
    p_del: float
    p_ins: float
    confusion_map: dict = field(default_factory=dict)
    nbest_size_max: int = 5
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("p_sub", "p_del", "p_ins"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"ErrorChannelConfig: {name}={p} outside [0, 1]")
        if self.p_sub + self.p_del > 1.0:
            raise ConfigurationError("ErrorChannelConfig: p_sub + p_del exceeds 1")
        if not 1 <= self.nbest_size_max <= 10:
            raise ConfigurationError("ErrorChannelConfig: nbest_size_max outside [1, 10]")
        if self.noise_scale < 0.0:
            raise ConfigurationError("ErrorChannelConfig: noise_scale is negative")


@dataclass(frozen=True)
class Hypothesis:
    words: tuple
    acoustic_logp: float
    firstpass_lm_logp: float = 0.0


@dataclass
class NBestRecord:
    query_id: str
    reference: tuple
    hypotheses: list

    def __post_init__(self):
        self.reference = tuple(self.reference)
        if not self.reference:
            raise InputError(f"NBestRecord {self.query_id}: reference is empty")


def generate_queries(templates, catalog, count: int, seed: int) -> list:
    """Instantiate `count` templates with uniform catalog choices.

    Returns word sequences (tuples of lowercase words). Deterministic in seed.
    """
    templates = list(templates)
    if not templates:
        raise ConfigurationError("generate_queries: no templates given")
    for t in templates:
        for slot in t.slot_names:
            if slot not in catalog or not catalog[slot]:
                raise ConfigurationError(
                    f"generate_queries: catalog has no entries for slot '{slot}'")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        t = templates[rng.integers(len(templates))]
        filled = _SLOT_RE.sub(
            lambda m: catalog[m.group(1)][rng.integers(len(catalog[m.group(1)]))],
            t.pattern)
        out.append(tuple(filled.lower().split()))
    return out


def _fallback_pool(cfg: ErrorChannelConfig) -> list:
    pool = set(cfg.confusion_map)
    for words in cfg.confusion_map.values():
        pool.update(words)
    return sorted(pool)


def _sample_path(reference, cfg, pool, rng):
    """One draw from the channel; returns (words, path log-likelihood)."""
    keep = 1.0 - cfg.p_sub - cfg.p_del
    words, logp = [], 0.0

    def insert_at_gap():
        nonlocal logp
        if cfg.p_ins == 0.0:
            return
        if rng.random() < cfg.p_ins:
            words.append(pool[rng.integers(len(pool))])
            logp += math.log(cfg.p_ins) - math.log(len(pool))
        else:
            logp += math.log1p(-cfg.p_ins)

    for word in reference:
        insert_at_gap()
        u = rng.random()
        if u < cfg.p_del:
            logp += math.log(cfg.p_del)
        elif u < cfg.p_del + cfg.p_sub:
            choices = cfg.confusion_map.get(word) or pool
            words.append(choices[rng.integers(len(choices))])
            logp += math.log(cfg.p_sub) - math.log(len(choices))
        else:
            words.append(word)
            if keep < 1.0:
                logp += math.log(keep)
    insert_at_gap()
    return tuple(words), logp


def corrupt(reference, cfg: ErrorChannelConfig, n: int) -> NBestRecord:
    """Sample an N-best list of at most n distinct corruptions of reference.

    The random state is derived from (cfg.seed, reference), so one config
    gives independent channels across queries while staying reproducible.
    Duplicate texts keep their maximum score; the list is sorted by score
    descending, then normalized so acoustic_logp values sum to one in
    probability space.
    """
    reference = tuple(reference)
    if not reference:
        raise InputError("corrupt: reference is empty")
    if not 1 <= n <= cfg.nbest_size_max:
        raise InputError(f"corrupt: n={n} outside [1, {cfg.nbest_size_max}]")
    pool = _fallback_pool(cfg)
    if not pool and (cfg.p_sub > 0.0 or cfg.p_ins > 0.0):
        raise ConfigurationError(
            "corrupt: confusion_map is empty but substitution/insertion is enabled")

    rng = np.random.default_rng([cfg.seed, zlib.crc32(" ".join(reference).encode())])
    best = {}
    for _ in range(n):
        words, logp = _sample_path(reference, cfg, pool, rng)
        score = logp + cfg.noise_scale * rng.standard_normal()
        if not words:
            # A fully deleted hypothesis carries no text; re-emit the
            # reference so every hypothesis is a non-empty word sequence.
            words = reference
        if words not in best or score > best[words]:
            best[words] = score
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    scores = np.array([s for _, s in ranked])
    scores -= np.logaddexp.reduce(scores)
    hyps = [Hypothesis(words=w, acoustic_logp=float(s), firstpass_lm_logp=0.0)
            for (w, _), s in zip(ranked, scores)]
    return NBestRecord(query_id="", reference=reference, hypotheses=hyps)


def attach_lm_scores(records, logprob_fn) -> list:
    """Return copies of records with firstpass_lm_logp = logprob_fn(words)."""
    out = []
    for rec in records:
        hyps = [replace(h, firstpass_lm_logp=float(logprob_fn(h.words)))
                for h in rec.hypotheses]
        out.append(NBestRecord(rec.query_id, rec.reference, hyps))
    return out


def emit_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "id": rec.query_id,
                "ref": " ".join(rec.reference),
                "nbest": [{"text": " ".join(h.words),
                           "am": h.acoustic_logp,
                           "lm": h.firstpass_lm_logp}
                          for h in rec.hypotheses],
            }
            f.write(json.dumps(obj) + "\n")


def read_jsonl(path) -> list:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                hyps = [Hypothesis(words=tuple(h["text"].split()),
                                   acoustic_logp=float(h["am"]),
                                   firstpass_lm_logp=float(h["lm"]))
                        for h in obj["nbest"]]
                rec = NBestRecord(query_id=obj["id"],
                                  reference=tuple(obj["ref"].split()),
                                  hypotheses=hyps)
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc})") from exc
            if not rec.hypotheses:
                raise ParseError(f"{path}:{lineno}: record has no hypotheses")
            for h in rec.hypotheses:
                if not (math.isfinite(h.acoustic_logp) and math.isfinite(h.firstpass_lm_logp)):
                    raise ParseError(f"{path}:{lineno}: non-finite hypothesis score")
            records.append(rec)
    return records
