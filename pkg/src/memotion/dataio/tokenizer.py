"""Byte-pair-merge vocabulary building and greedy longest-match tokenisation.

Text is NFC-normalised and lower-cased, then split into words (runs of word
characters) and single punctuation marks. Subwords carry no word-boundary
marker, so :func:`detokenize` can only restore single words.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from pathlib import Path

import numpy as np

from ..errors import FormatError, InputError
from .sample import EncodedText

PAD, UNK, CLS, SEP = "[pad]", "[unk]", "[cls]", "[sep]"
RESERVED = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text).lower()


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(normalize_text(text))


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise FormatError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary entries must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self._units = {t for t in tokens[len(RESERVED) :]}
        self._max_len = max((len(t) for t in self._units), default=1)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def segment(self, word: str) -> list[str]:
        """Greedy longest-match split of one word; unmatched spans become one ``[unk]``."""
        pieces, i, n = [], 0, len(word)
        while i < n:
            for j in range(min(n, i + self._max_len), i, -1):
                if word[i:j] in self._units:
                    pieces.append(word[i:j])
                    i = j
                    break
            else:
                if not pieces or pieces[-1] != UNK:
                    pieces.append(UNK)
                i += 1
        return pieces

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def build_vocab(corpus, size: int) -> Vocabulary:
    """Frequency-ranked characters followed by byte-pair merges until ``size`` entries.

    Merge ties are broken by the lexicographically smallest pair, so the result
    is fully determined by the corpus.
    """
    if size < len(RESERVED) + 1:
        raise InputError(f"vocabulary size must be at least {len(RESERVED) + 1}")
    word_freq = Counter(w for text in corpus for w in split_words(text))
    if not word_freq:
        raise InputError("cannot build a vocabulary from an empty corpus")

    char_freq = Counter()
    for word, f in word_freq.items():
        for ch in word:
            char_freq[ch] += f
    alphabet = sorted(char_freq, key=lambda ch: (-char_freq[ch], ch))[: size - len(RESERVED)]
    tokens = list(RESERVED) + alphabet
    known = set(tokens)
    allowed = set(alphabet)
    splits = {w: list(w) for w in word_freq}

    while len(tokens) < size:
        pairs = Counter()
        for word, parts in splits.items():
            f = word_freq[word]
            for a, b in zip(parts, parts[1:]):
                if a in allowed and b in allowed:
                    pairs[(a, b)] += f
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = a + b
        allowed.add(merged)
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        for word, parts in splits.items():
            out, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            splits[word] = out
    return Vocabulary(tokens)


def tokenize(text: str, vocab: Vocabulary, max_seq_len: int) -> EncodedText:
    """``[cls] subwords [sep]`` padded to ``max_seq_len``; keeps the first ``max_seq_len - 2`` subwords."""
    if max_seq_len < 2:
        raise InputError("max_seq_len must leave room for [cls] and [sep]")
    pieces = [p for word in split_words(text) for p in vocab.segment(word)]
    truncated = len(pieces) > max_seq_len - 2
    pieces = pieces[: max_seq_len - 2]
    ids = [CLS_ID] + [vocab.index[p] for p in pieces] + [SEP_ID]
    n_real = len(ids)
    input_ids = np.full(max_seq_len, PAD_ID, dtype=np.int64)
    input_ids[:n_real] = ids
    mask = np.zeros(max_seq_len, dtype=np.int64)
    mask[:n_real] = 1
    return EncodedText(input_ids, mask, np.zeros(max_seq_len, dtype=np.int64), truncated)


def detokenize(ids, vocab: Vocabulary) -> str:
    return "".join(vocab.tokens[i] for i in np.asarray(ids).tolist() if i not in (PAD_ID, CLS_ID, SEP_ID))
