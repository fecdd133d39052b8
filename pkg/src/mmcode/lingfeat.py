"""Sparse linguistic features: tokenizer, token/POS n-grams, and DAL affect
scores with vernacular/emoji phrasebook translation."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .base import BaseEstimator, ValidationError

logger = logging.getLogger(__name__)

TOKEN_KINDS = ("word", "emoji", "mention", "url", "punct")

MENTION_TOKEN = "@mention"
URL_TOKEN = "<url>"

_URL_RE = re.compile(r"(?:https?://|www\.)\S+")
_MENTION_RE = re.compile(r"@\w+")
_WORD_RE = re.compile(r"#?\w[\w']*")

# Pragmatic emoji coverage: pictographs, dingbats, misc symbols, and the
# transport/supplemental planes. ZWJ sequences and modifiers are glued onto
# the preceding base so a multi-codepoint emoji stays one token.
_EMOJI_RANGES = (
    (0x1F000, 0x1FAFF),
    (0x2600, 0x27BF),
    (0x2B00, 0x2BFF),
    (0x2190, 0x21FF),
    (0x2700, 0x27BF),
    (0x1F900, 0x1F9FF),
)
_EMOJI_EXTRA = {0x203C, 0x2049, 0x2122, 0x2139, 0x3030, 0x303D, 0x3297, 0x3299, 0x24C2}
_EMOJI_MODIFIERS = {0xFE0F, 0xFE0E, 0x20E3} | set(range(0x1F3FB, 0x1F400))
_ZWJ = 0x200D


def _is_emoji_base(ch):
    cp = ord(ch)
    if cp in _EMOJI_EXTRA:
        return True
    return any(lo <= cp <= hi for lo, hi in _EMOJI_RANGES)


def _is_emoji_modifier(ch):
    return ord(ch) in _EMOJI_MODIFIERS


@dataclass(frozen=True)
class Token:
    surface: str
    kind: str


def _consume_emoji(text, i):
    """Return end index of the emoji token starting at i (base + modifiers,
    extended across zero-width joiners)."""
    n = len(text)
    j = i + 1
    while j < n and _is_emoji_modifier(text[j]):
        j += 1
    while j < n and ord(text[j]) == _ZWJ and j + 1 < n and _is_emoji_base(text[j + 1]):
        j += 2
        while j < n and _is_emoji_modifier(text[j]):
            j += 1
    return j


def tokenize(text):
    """Tokenize tweet text.

    Word tokens are lowercased, @mentions collapse to "@mention", URLs to
    "<url>", and each emoji (including multi-codepoint ZWJ sequences) is a
    single token. Whitespace separates; runs of other punctuation become one
    punct token. Joining surfaces with spaces and re-tokenizing is a fixed
    point.
    """
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if text.startswith(URL_TOKEN, i):
            tokens.append(Token(URL_TOKEN, "url"))
            i += len(URL_TOKEN)
            continue
        m = _URL_RE.match(text, i)
        if m:
            tokens.append(Token(URL_TOKEN, "url"))
            i = m.end()
            continue
        m = _MENTION_RE.match(text, i)
        if m:
            tokens.append(Token(MENTION_TOKEN, "mention"))
            i = m.end()
            continue
        if _is_emoji_base(ch):
            j = _consume_emoji(text, i)
            tokens.append(Token(text[i:j], "emoji"))
            i = j
            continue
        m = _WORD_RE.match(text, i)
        if m:
            tokens.append(Token(m.group(0).lower(), "word"))
            i = m.end()
            continue
        # punct fallback: maximal run of characters no other rule claims
        j = i
        while j < n:
            c = text[j]
            if (
                c.isspace()
                or _is_emoji_base(c)
                or _URL_RE.match(text, j)
                or _MENTION_RE.match(text, j)
                or _WORD_RE.match(text, j)
                or text.startswith(URL_TOKEN, j)
            ):
                break
            j += 1
        tokens.append(Token(text[i:j], "punct"))
        i = j
    return tokens


def detokenize(tokens):
    return " ".join(t.surface for t in tokens)


@dataclass(frozen=True)
class DalEntry:
    word: str
    pleasantness: float
    activation: float
    imagery: float


def load_dal(path):
    """Read a DAL lexicon CSV (word,pleasantness,activation,imagery)."""
    entries = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            word = row[0]
            if word in entries:
                raise ValidationError(f"{path}:{lineno}: duplicate DAL entry {word!r}")
            try:
                scores = tuple(float(x) for x in row[1:])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: bad score: {exc}") from exc
            if not all(math.isfinite(s) for s in scores):
                raise ValidationError(f"{path}:{lineno}: non-finite score for {word!r}")
            entries[word] = DalEntry(word, *scores)
    return entries


def load_phrasebook(path, dal=None):
    """Read a phrasebook CSV (token,translation). Translations may be
    multi-word. With a DAL given, warns about targets it cannot resolve."""
    book = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            token, translation = row
            words = translation.split()
            book[token] = words
            if dal is not None:
                unresolved = [w for w in words if w not in dal]
                if unresolved:
                    logger.warning(
                        "phrasebook %s:%d: translation words %s not in DAL",
                        path,
                        lineno,
                        unresolved,
                    )
    return book


def dal_vector(tokens, dal, phrasebook=None):
    """Six affect features: (min, max) of pleasantness, activation, imagery
    over all tokens that resolve in the DAL, directly or via the phrasebook.
    All zeros when nothing resolves."""
    resolved = []
    for tok in tokens:
        surface = tok.surface if isinstance(tok, Token) else tok
        entry = dal.get(surface)
        if entry is not None:
            resolved.append(entry)
            continue
        if phrasebook and surface in phrasebook:
            for word in phrasebook[surface]:
                entry = dal.get(word)
                if entry is not None:
                    resolved.append(entry)
    if not resolved:
        return np.zeros(6)
    p = [e.pleasantness for e in resolved]
    a = [e.activation for e in resolved]
    i = [e.imagery for e in resolved]
    return np.array([min(p), max(p), min(a), max(a), min(i), max(i)], dtype=np.float64)


def _token_units(tweet_tokens):
    return [t.surface for t in tweet_tokens]


def _pos_units(pos_tags):
    return [f"{tok}/{tag}" for tok, tag in pos_tags]


def _ngrams(units, n):
    return [tuple(units[i : i + n]) for i in range(len(units) - n + 1)]


class NgramVocab:
    """Ordered map from n-gram key (channel, n, units) to column index.

    Built from training data only; ordering is lexicographic over keys, so
    two builds over the same data agree column for column.
    """

    def __init__(self, index):
        self.index = index
        self.n_cols = len(index)

    @classmethod
    def build(cls, tweets, min_df=1, tokens_by_id=None):
        """Collect token and POS n-grams (n = 1, 2) that occur in at least
        `min_df` training tweets. The POS channel only sees tweets that carry
        pos_tags."""
        df = {}
        for tweet in tweets:
            toks = (
                tokens_by_id[tweet.tweet_id] if tokens_by_id is not None else tokenize(tweet.text)
            )
            keys = set()
            units = _token_units(toks)
            for n in (1, 2):
                keys.update(("token", n, g) for g in _ngrams(units, n))
            if tweet.pos_tags:
                pos_units = _pos_units(tweet.pos_tags)
                for n in (1, 2):
                    keys.update(("pos", n, g) for g in _ngrams(pos_units, n))
            for key in keys:
                df[key] = df.get(key, 0) + 1
        kept = sorted(key for key, count in df.items() if count >= min_df)
        return cls({key: col for col, key in enumerate(kept)})

    def __contains__(self, key):
        return key in self.index

    def __len__(self):
        return self.n_cols


def ngram_counts(tokens, pos_tags, vocab):
    """Column -> count dict of the known n-grams in one tweet."""
    counts = {}
    units = _token_units(tokens) if tokens and isinstance(tokens[0], Token) else list(tokens or [])
    streams = [("token", units)]
    if pos_tags:
        streams.append(("pos", _pos_units(pos_tags)))
    for channel, stream in streams:
        for n in (1, 2):
            for gram in _ngrams(stream, n):
                col = vocab.index.get((channel, n, gram))
                if col is not None:
                    counts[col] = counts.get(col, 0) + 1
    return counts


def ngram_vector(tokens, pos_tags, vocab, binary=False):
    """Sparse 1 x n_cols count vector (or presence indicator) of known
    n-grams; unknown n-grams are ignored, POS columns are zero without
    pos_tags."""
    counts = ngram_counts(tokens, pos_tags, vocab)
    cols = sorted(counts)
    data = [1.0 if binary else float(counts[c]) for c in cols]
    return sp.csr_matrix((data, ([0] * len(cols), cols)), shape=(1, vocab.n_cols))


class LinguisticFeaturizer(BaseEstimator):
    """n-gram counts plus the six DAL affect scores, as one sparse block.

    fit() builds the n-gram vocabulary from the training tweets only;
    transform() maps any tweets into that fixed space (unknown n-grams
    vanish). The DAL columns sit after the n-gram columns.
    """

    def __init__(self, dal=None, phrasebook=None, min_df=1, binary_ngrams=False):
        self.dal = dal
        self.phrasebook = phrasebook
        self.min_df = min_df
        self.binary_ngrams = binary_ngrams

    def fit(self, tweets, y=None):
        self.vocab_ = NgramVocab.build(tweets, min_df=self.min_df)
        return self

    def transform(self, tweets):
        if not hasattr(self, "vocab_"):
            raise ValidationError("LinguisticFeaturizer is not fitted")
        rows = []
        dal_rows = np.zeros((len(tweets), 6))
        for i, tweet in enumerate(tweets):
            toks = tokenize(tweet.text)
            rows.append(ngram_vector(toks, tweet.pos_tags, self.vocab_, self.binary_ngrams))
            if self.dal:
                dal_rows[i] = dal_vector(toks, self.dal, self.phrasebook)
        ngram_block = sp.vstack(rows, format="csr") if rows else sp.csr_matrix((0, len(self.vocab_)))
        return sp.hstack([ngram_block, sp.csr_matrix(dal_rows)], format="csr")

    def fit_transform(self, tweets, y=None):
        return self.fit(tweets).transform(tweets)

    def state_dict(self):
        return {
            "vocab": [list(map(str, key)) for key in sorted(self.vocab_.index)],
            "min_df": self.min_df,
            "binary": self.binary_ngrams,
        }
