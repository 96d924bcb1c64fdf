"""Word/space/punctuation pre-tokenization.

Pieces are maximal runs of one byte group (letters, digits, punctuation,
whitespace), except that a single space directly before a non-whitespace run
joins that run: ``b"hello world"`` -> ``[b"hello", b" world"]``.  Bytes
>= 0x80 count as letters so multi-byte UTF-8 stays inside words.

Two implementations share these rules: a table-driven vectorised classifier
(the fast path) and a plain per-byte scalar reference.
"""

from __future__ import annotations

import numpy as np

LETTER, DIGIT, SPACE, WS, PUNCT = 0, 1, 2, 3, 4

# byte -> class
BYTE_CLASS = np.full(256, PUNCT, dtype=np.uint8)
BYTE_CLASS[ord("a"):ord("z") + 1] = LETTER
BYTE_CLASS[ord("A"):ord("Z") + 1] = LETTER
BYTE_CLASS[0x80:] = LETTER
BYTE_CLASS[ord("0"):ord("9") + 1] = DIGIT
BYTE_CLASS[0x20] = SPACE
for _b in (0x09, 0x0A, 0x0B, 0x0C, 0x0D):
    BYTE_CLASS[_b] = WS
# class -> group (space and other whitespace share a group)
CLASS_GROUP = np.array([LETTER, DIGIT, WS, WS, PUNCT], dtype=np.uint8)
BYTE_GROUP = CLASS_GROUP[BYTE_CLASS]


def boundaries_wide(data: bytes) -> list[int]:
    """Start offsets of every piece, computed with whole-array table lookups."""
    n = len(data)
    if n == 0:
        return []
    buf = np.frombuffer(data, dtype=np.uint8)
    cls = BYTE_CLASS[buf]
    grp = CLASS_GROUP[cls]
    cut = np.zeros(n, dtype=bool)
    cut[0] = True
    cut[1:] = grp[1:] != grp[:-1]
    # a space followed by non-whitespace moves the cut one byte left
    attach = np.flatnonzero((cls[:-1] == SPACE) & (grp[1:] != WS)) + 1
    cut[attach] = False
    cut[attach - 1] = True
    return np.flatnonzero(cut).tolist()


def _group_scalar(b: int) -> int:
    if 97 <= b <= 122 or 65 <= b <= 90 or b >= 128:
        return LETTER
    if 48 <= b <= 57:
        return DIGIT
    if b == 32 or 9 <= b <= 13:
        return WS
    return PUNCT


def boundaries_scalar(data: bytes) -> list[int]:
    """Reference: one byte at a time, no lookup tables."""
    starts = []
    n = len(data)
    for i in range(n):
        if i == 0:
            starts.append(0)
            continue
        g, gp = _group_scalar(data[i]), _group_scalar(data[i - 1])
        joins_prev_space = data[i - 1] == 32 and g != WS
        space_opens_next = data[i] == 32 and i + 1 < n and _group_scalar(data[i + 1]) != WS
        if space_opens_next or (g != gp and not joins_prev_space):
            starts.append(i)
    return starts


def pretokenize(data: bytes, wide: bool = True) -> list[bytes]:
    starts = boundaries_wide(data) if wide else boundaries_scalar(data)
    ends = starts[1:] + [len(data)]
    return [data[s:e] for s, e in zip(starts, ends)]
