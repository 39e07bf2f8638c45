"""Byte-pair-encoding subword vocabulary: training, encode/decode, file I/O.

Text is lowercased and split on whitespace. A word-boundary marker 0x2581
("▁") is prepended to every word except the first, as its own base symbol,
so that concatenating decoded tokens and mapping the marker back to a space
reconstructs the original text unambiguously. Merges operate inside these
word units and never produce the reserved tokens.
"""

from __future__ import annotations

from collections import Counter

from .errors import ConfigurationError, InputError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
BOUNDARY = "▁"


def _units(text: str) -> list:
    """Split text into word units; non-initial words carry the boundary marker."""
    words = text.lower().split()
    return [w if i == 0 else BOUNDARY + w for i, w in enumerate(words)]


class Vocabulary:
    """Immutable token inventory plus the ordered merge list that built it."""

    def __init__(self, tokens, merges):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ConfigurationError("vocabulary contains duplicate tokens")
        self.merges = [tuple(m) for m in merges]
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache = {}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def _segment(self, unit: str) -> list:
        """Apply merges to one word unit, lowest training rank first."""
        cached = self._cache.get(unit)
        if cached is not None:
            return cached
        symbols = list(unit)
        while len(symbols) > 1:
            best_rank, best_idx = None, -1
            for i in range(len(symbols) - 1):
                rank = self._ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_idx = rank, i
            if best_rank is None:
                break
            pair = (symbols[best_idx], symbols[best_idx + 1])
            merged = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    merged.append(symbols[i] + symbols[i + 1])
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        self._cache[unit] = symbols
        return symbols

    def encode(self, text: str) -> list:
        """Token ids for text, bracketed by bos/eos; unknown symbols become unk."""
        ids = [BOS]
        for unit in _units(text):
            for sym in self._segment(unit):
                ids.append(self.token_to_id.get(sym, UNK))
        ids.append(EOS)
        return ids

    def decode(self, ids) -> str:
        """Text for ids; reserved tokens (pad/bos/eos/unk) are stripped anywhere."""
        parts = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.size:
                raise InputError(f"decode: token id {i} out of range [0, {self.size})")
            if i <= UNK:
                continue
            parts.append(self.id_to_token[i])
        return "".join(parts).replace(BOUNDARY, " ").strip()

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("bpe-vocab v1\n")
            f.write(f"merges {len(self.merges)}\n")
            for a, b in self.merges:
                f.write(f"{a}\t{b}\n")
            f.write(f"vocab {self.size}\n")
            for i, tok in enumerate(self.id_to_token):
                f.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        pos = 0

        def expect(prefix):
            nonlocal pos
            if pos >= len(lines) or not lines[pos].startswith(prefix):
                raise ParseError(f"{path}:{pos + 1}: expected '{prefix} ...'")
            value = lines[pos][len(prefix):].strip()
            pos += 1
            return value

        if expect("bpe-vocab") != "v1":
            raise ParseError(f"{path}:1: unsupported vocabulary version")
        n_merges = int(expect("merges"))
        merges = []
        for _ in range(n_merges):
            fields = lines[pos].split("\t")
            if len(fields) != 2:
                raise ParseError(f"{path}:{pos + 1}: malformed merge line")
            merges.append((fields[0], fields[1]))
            pos += 1
        n_vocab = int(expect("vocab"))
        tokens = [None] * n_vocab
        for _ in range(n_vocab):
            fields = lines[pos].split("\t")
            if len(fields) != 2:
                raise ParseError(f"{path}:{pos + 1}: malformed vocab line")
            tok, idx = fields[0], int(fields[1])
            if not (0 <= idx < n_vocab) or tokens[idx] is not None:
                raise ParseError(f"{path}:{pos + 1}: bad or duplicate token id {idx}")
            tokens[idx] = tok
            pos += 1
        if tuple(tokens[:4]) != RESERVED:
            raise ParseError(f"{path}: reserved tokens missing or reordered")
        return cls(tokens, merges)


def train_bpe(corpus, vocab_budget: int) -> Vocabulary:
    """Greedy highest-frequency pair merging until the budget fills.

    Stops early when no pair occurs at least twice. Ties on frequency break
    toward the lexicographically smallest pair, so retraining on the same
    corpus reproduces the same merge list.
    """
    corpus = list(corpus)
    if not corpus:
        raise ConfigurationError("train_bpe: corpus is empty")
    unit_freq = Counter()
    for line in corpus:
        unit_freq.update(_units(line))

    alphabet = sorted({ch for unit in unit_freq for ch in unit})
    if vocab_budget <= len(RESERVED) + len(alphabet):
        raise ConfigurationError(
            f"train_bpe: budget {vocab_budget} too small for "
            f"{len(alphabet)} base symbols plus {len(RESERVED)} reserved tokens")

    tokens = list(RESERVED) + alphabet
    known = set(tokens)
    merges = []
    units = {tuple(unit): freq for unit, freq in unit_freq.items()}

    while len(tokens) < vocab_budget:
        pair_counts = Counter()
        for symbols, freq in units.items():
            for i in range(len(symbols) - 1):
                pair_counts[(symbols[i], symbols[i + 1])] += freq
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in pair_counts.items() if c == best_count)
        product = pair[0] + pair[1]
        if product in RESERVED:
            break
        merges.append(pair)
        if product not in known:
            known.add(product)
            tokens.append(product)
        new_units = {}
        for symbols, freq in units.items():
            out = []
            i = 0
            while i < len(symbols):
                if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                    out.append(product)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            key = tuple(out)
            new_units[key] = new_units.get(key, 0) + freq
        units = new_units

    return Vocabulary(tokens, merges)
