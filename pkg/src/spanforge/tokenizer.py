"""Devanagari-aware normalization, greedy-merge subword vocabulary, and window packing."""
from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, InputError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONT = "##"
DANDA = "।"
DOUBLE_DANDA = "॥"
ZERO_WIDTH = {"‌", "‍"}
NO_OFFSET = (-1, -1)


# ------------------------------------------------------------- normalization

def _is_lossy(ch: str) -> bool:
    if 0xD800 <= ord(ch) <= 0xDFFF:
        return True
    return unicodedata.category(ch) == "Cc" and not ch.isspace()


def _nfc_groups(text: str):
    """Split ``text`` into runs that NFC-normalize independently of their neighbours."""
    clusters = []
    for i, ch in enumerate(text):
        if clusters and unicodedata.combining(ch):
            clusters[-1][1] = i + 1
        else:
            clusters.append([i, i + 1])
    groups = []
    for start, end in clusters:
        if groups:
            gs, ge = groups[-1]
            left, right = text[gs:ge], text[start:end]
            if unicodedata.normalize("NFC", left + right) != (
                unicodedata.normalize("NFC", left) + unicodedata.normalize("NFC", right)
            ):
                groups[-1][1] = end
                continue
        groups.append([start, end])
    return groups


def _normalize_aligned(text: str):
    """Normalize and return (normalized, per-char source spans, replacement count)."""
    replaced = 0
    chars = []
    for ch in text:
        if _is_lossy(ch):
            replaced += 1
            chars.append("�")
        else:
            chars.append(ch)
    cleaned = "".join(chars)

    composed, spans = [], []
    for gs, ge in _nfc_groups(cleaned):
        raw = cleaned[gs:ge]
        nfc = unicodedata.normalize("NFC", raw)
        if nfc == raw:
            composed.extend(raw)
            spans.extend((i, i + 1) for i in range(gs, ge))
        else:
            composed.extend(nfc)
            spans.extend((gs, ge) for _ in nfc)

    out, out_spans = [], []
    i, n = 0, len(composed)
    while i < n:
        if composed[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not composed[j].isspace():
            j += 1
        lo, hi = i, j
        while lo < hi and composed[lo] in ZERO_WIDTH:
            lo += 1
        while hi > lo and composed[hi - 1] in ZERO_WIDTH:
            hi -= 1
        if lo < hi:
            if out:
                out.append(" ")
                out_spans.append((spans[i - 1][0], spans[i - 1][1]) if i else (0, 0))
            out.extend(composed[lo:hi])
            out_spans.extend(spans[lo:hi])
        i = j
    return "".join(out), out_spans, replaced


def normalize_with_report(text: str) -> tuple[str, int]:
    norm, _, replaced = _normalize_aligned(text)
    return norm, replaced


def normalize(text: str) -> str:
    """NFC, single spaces, no zero-width joiners at word edges, lossy characters replaced by U+FFFD."""
    return _normalize_aligned(text)[0]


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(norm: str):
    """Yield (word, start) over a normalized string; every punctuation mark (danda included) is its own word."""
    pos = 0
    for chunk in norm.split(" "):
        start = None
        for k, ch in enumerate(chunk):
            if _is_punct(ch):
                if start is not None:
                    yield chunk[start:k], pos + start
                    start = None
                yield ch, pos + k
            elif start is None:
                start = k
        if start is not None:
            yield chunk[start:], pos + start
        pos += len(chunk) + 1


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    def __init__(self, pieces):
        pieces = list(pieces)
        if tuple(pieces[:5]) != SPECIALS:
            raise ConfigError(f"vocabulary must start with {SPECIALS}, got {pieces[:5]}")
        if len(set(pieces)) != len(pieces):
            raise ConfigError("vocabulary contains duplicate pieces")
        for p in pieces[5:]:
            if not p or p == CONT:
                raise ConfigError(f"empty vocabulary piece {p!r}")
        self.pieces = pieces
        self.index = {p: i for i, p in enumerate(pieces)}
        self.max_piece_len = max((len(p) for p in pieces[5:]), default=1)

    def __len__(self):
        return len(self.pieces)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.pieces == other.pieces

    def __contains__(self, piece):
        return piece in self.index

    def id(self, piece: str) -> int:
        return self.index.get(piece, UNK_ID)

    def piece(self, idx: int) -> str:
        if not 0 <= idx < len(self.pieces):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self.pieces)}")
        return self.pieces[idx]

    def save(self, path):
        Path(path).write_text("".join(p + "\n" for p in self.pieces), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def train_vocab(corpus, vocab_size: int) -> Vocabulary:
    """Character start plus greedy most-frequent-pair merges until ``vocab_size`` pieces.

    Ties between equally frequent pairs go to the lexicographically smallest
    merged piece, so the result depends only on the corpus contents and order.
    """
    if vocab_size < len(SPECIALS) + 1:
        raise ConfigError(f"vocab_size must be at least {len(SPECIALS) + 1}, got {vocab_size}")
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("cannot train a vocabulary on an empty corpus")

    words = Counter()
    for line in corpus:
        for w, _ in pre_tokenize(normalize(line)):
            words[w] += 1
    chars = Counter()
    for w, c in words.items():
        for ch in w:
            chars[ch] += c
    alphabet = sorted(chars, key=lambda ch: (-chars[ch], ch))
    budget = vocab_size - len(SPECIALS)
    alphabet = alphabet[: max(1, budget // 2)]
    pieces = list(SPECIALS)
    for ch in alphabet:
        pieces.append(ch)
        if len(pieces) < vocab_size:
            pieces.append(CONT + ch)
    known = set(pieces)
    kept = set(alphabet)

    # each word as a list of symbols; None marks an uncovered character (merge barrier)
    seqs = []
    for w, c in words.items():
        syms = [(ch if k == 0 else CONT + ch) if ch in kept else None for k, ch in enumerate(w)]
        seqs.append((syms, c))

    def merged(a, b):
        return a + b[len(CONT):]

    while len(pieces) < vocab_size:
        pairs = Counter()
        for syms, c in seqs:
            for a, b in zip(syms, syms[1:]):
                if a is not None and b is not None:
                    pairs[(a, b)] += c
        if not pairs:
            break
        best = min(pairs, key=lambda ab: (-pairs[ab], merged(*ab), ab))
        new = merged(*best)
        for syms, _ in seqs:
            k = 0
            while k < len(syms) - 1:
                if syms[k] == best[0] and syms[k + 1] == best[1]:
                    syms[k:k + 2] = [new]
                k += 1
        if new not in known:
            known.add(new)
            pieces.append(new)
    return Vocabulary(pieces)


# ------------------------------------------------------------------ encoding

@dataclass(frozen=True)
class Token:
    id: int
    piece: str
    start: int
    end: int


def tokenize(text: str, vocab: Vocabulary) -> list[Token]:
    """Longest-match-first subword split with offsets into the ORIGINAL ``text``."""
    norm, spans, _ = _normalize_aligned(text)
    out = []
    prev_end = 0
    for word, wstart in pre_tokenize(norm):
        k = 0
        while k < len(word):
            piece_len, pid = 1, UNK_ID
            for ln in range(min(vocab.max_piece_len, len(word) - k), 0, -1):
                cand = word[k:k + ln] if k == 0 else CONT + word[k:k + ln]
                if cand in vocab.index:
                    piece_len, pid = ln, vocab.index[cand]
                    break
            a, b = wstart + k, wstart + k + piece_len
            start, end = spans[a][0], spans[b - 1][1]
            start = max(start, prev_end)
            end = max(end, start)
            prev_end = end
            piece = vocab.pieces[pid] if pid != UNK_ID else word[k:b - wstart]
            out.append(Token(pid, piece, start, end))
            k += piece_len
    return out


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [t.id for t in tokenize(text, vocab)]


def decode(token_ids, vocab: Vocabulary) -> str:
    parts = []
    for i in token_ids:
        piece = vocab.piece(int(i))
        if int(i) < len(SPECIALS):
            continue
        if piece.startswith(CONT):
            parts.append(piece[len(CONT):])
        else:
            if parts:
                parts.append(" ")
            parts.append(piece)
    return "".join(parts)


@dataclass(frozen=True)
class EncodedWindow:
    token_ids: tuple
    segment_ids: tuple
    attention_mask: tuple
    offsets: tuple
    window_index: int
    context_token_range: tuple  # [start, end) over the example's context tokens
    context_start: int  # window position of the first context token

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def n_context(self) -> int:
        return self.context_token_range[1] - self.context_token_range[0]

    @property
    def context_positions(self) -> range:
        return range(self.context_start, self.context_start + self.n_context)


def _pack(first_ids, second: list[Token], max_len, window_index, token_range) -> EncodedWindow:
    ids = [CLS_ID, *first_ids, SEP_ID]
    segs = [0] * len(ids)
    offs = [NO_OFFSET] * len(ids)
    ctx_start = len(ids)
    for t in second:
        ids.append(t.id)
        segs.append(1)
        offs.append((t.start, t.end))
    ids.append(SEP_ID)
    segs.append(1)
    offs.append(NO_OFFSET)
    real = len(ids)
    pad = max_len - real
    return EncodedWindow(
        token_ids=tuple(ids + [PAD_ID] * pad),
        segment_ids=tuple(segs + [0] * pad),
        attention_mask=tuple([1] * real + [0] * pad),
        offsets=tuple(offs + [NO_OFFSET] * pad),
        window_index=window_index,
        context_token_range=tuple(token_range),
        context_start=ctx_start,
    )


def window_starts(n_tokens: int, capacity: int, stride: int) -> list[int]:
    """Start offsets of consecutive windows; neighbours share exactly ``stride`` tokens."""
    starts = [0]
    while starts[-1] + capacity < n_tokens:
        starts.append(starts[-1] + capacity - stride)
    return starts


def encode_pair(question: str, context: str, vocab: Vocabulary, max_len: int = 384, stride: int = 128):
    """Pack ``[CLS] Q [SEP] C [SEP]`` into padded windows that slide over the context."""
    q = encode(question, vocab)
    if len(q) + 3 >= max_len:
        raise InputError(f"question has {len(q)} tokens; needs fewer than {max_len - 3} for max_len={max_len}")
    capacity = max_len - len(q) - 3
    if stride < 0 or stride >= capacity:
        raise ConfigError(f"stride {stride} must be in [0, {capacity}) (context capacity per window)")
    ctx = tokenize(context, vocab)
    windows = []
    for w, start in enumerate(window_starts(len(ctx), capacity, stride)):
        end = min(start + capacity, len(ctx))
        windows.append(_pack(q, ctx[start:end], max_len, w, (start, end)))
    return windows


def pack_sentence_pair(first: str, second: str, vocab: Vocabulary, max_len: int) -> EncodedWindow:
    """``[CLS] A [SEP] B [SEP]`` truncated longest-first to ``max_len``."""
    a = encode(first, vocab)
    b = tokenize(second, vocab)
    while len(a) + len(b) + 3 > max_len:
        if len(b) >= len(a):
            b = b[:-1]
        else:
            a = a[:-1]
    return _pack(a, b, max_len, 0, (0, len(b)))
